#pragma once

#include <cstdint>
#include <vector>

// Low-level float kernels. Every kernel fixes the accumulation order of each
// output element independently of blocking, batching, or thread count, so a
// row computed during incremental decoding is bit-identical to the same row
// computed in a full-sequence pass. Kept out-of-line in one translation unit.
namespace patchflow::kern {

// dot product over n elements, eight interleaved partial sums
float det_dot(const float* a, const float* b, int n);

// C[M,N] = A[M,K] (row-major) * B (col-major: column j contiguous), plus
// optional bias[N]. C is overwritten.
void gemm_colB(const float* A, const float* Bcm, float* C, int M, int K, int N,
               const float* bias);

// dX[M,K] (+)= G[M,N] * W^T with W row-major [K,N] (row k contiguous)
void gemm_rowBT(const float* G, const float* Wrm, float* dX, int M, int N, int K,
                bool accumulate);

// dW[K,N] += A^T * G, accumulated in row order i = 0..M-1
void accum_outer(const float* A, const float* G, float* dW, int M, int K, int N);

// db[N] += column sums of G[M,N]
void accum_colsum(const float* G, float* db, int M, int N);

// y = x * w / sqrt(mean(x^2) + eps), row of length n; returns the rms divisor
float rmsnorm_row(const float* x, const float* w, float* y, int n, float eps);

// in-place rotary position embedding on one row of n_heads*head_dim floats
void rope_row(float* x, int pos, int n_heads, int head_dim);
// inverse rotation (backward of rope_row)
void rope_row_inv(float* x, int pos, int n_heads, int head_dim);

// softmax over x[0..n), in place, sequential max/sum
void softmax_row(float* x, int n);

// attention for a single query row against n_keys cached keys/values.
//   q: [n_heads*head_dim], K,V: row-major [n_keys, n_heads*head_dim]
//   probs: scratch of size n_heads*n_keys (written), out: [n_heads*head_dim]
void attn_row(const float* q, const float* K, const float* V, int n_keys,
              int n_heads, int head_dim, float* probs, float* out);

// scalar lattice quantizer: y = delta * clip(round(x/delta), -L, L)
void fsq_apply(const float* x, float* y, std::int64_t n, float delta, int L);

// activations (elementwise)
void silu(const float* x, float* y, std::int64_t n);
void silu_grad(const float* x, const float* gy, float* gx, std::int64_t n); // gx +=
void tanh_v(const float* x, float* y, std::int64_t n);
void sigmoid_v(const float* x, float* y, std::int64_t n);

} // namespace patchflow::kern
