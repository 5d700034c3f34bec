#include "patchflow/kernels.hpp"

#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace patchflow::kern {

float det_dot(const float* a, const float* b, int n) {
    float s0 = 0.f, s1 = 0.f, s2 = 0.f, s3 = 0.f;
    float s4 = 0.f, s5 = 0.f, s6 = 0.f, s7 = 0.f;
    int n8 = n & ~7;
    for (int i = 0; i < n8; i += 8) {
        s0 += a[i + 0] * b[i + 0];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        s4 += a[i + 4] * b[i + 4];
        s5 += a[i + 5] * b[i + 5];
        s6 += a[i + 6] * b[i + 6];
        s7 += a[i + 7] * b[i + 7];
    }
    float s = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
    for (int i = n8; i < n; ++i) s += a[i] * b[i];
    return s;
}

void gemm_colB(const float* A, const float* Bcm, float* C, int M, int K, int N,
               const float* bias) {
#pragma omp parallel for schedule(static) if (M * N > 4096)
    for (int i = 0; i < M; ++i) {
        const float* arow = A + static_cast<std::int64_t>(i) * K;
        float* crow = C + static_cast<std::int64_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            float v = det_dot(arow, Bcm + static_cast<std::int64_t>(j) * K, K);
            crow[j] = bias ? v + bias[j] : v;
        }
    }
}

void gemm_rowBT(const float* G, const float* Wrm, float* dX, int M, int N, int K,
                bool accumulate) {
#pragma omp parallel for schedule(static) if (M * K > 4096)
    for (int i = 0; i < M; ++i) {
        const float* grow = G + static_cast<std::int64_t>(i) * N;
        float* xrow = dX + static_cast<std::int64_t>(i) * K;
        for (int k = 0; k < K; ++k) {
            float v = det_dot(grow, Wrm + static_cast<std::int64_t>(k) * N, N);
            if (accumulate) xrow[k] += v; else xrow[k] = v;
        }
    }
}

void accum_outer(const float* A, const float* G, float* dW, int M, int K, int N) {
    // each thread owns a stripe of dW rows; i-order accumulation within a row
#pragma omp parallel for schedule(static) if (K * N > 4096)
    for (int k = 0; k < K; ++k) {
        float* wrow = dW + static_cast<std::int64_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            float a = A[static_cast<std::int64_t>(i) * K + k];
            if (a == 0.f) continue;
            const float* grow = G + static_cast<std::int64_t>(i) * N;
            for (int j = 0; j < N; ++j) wrow[j] += a * grow[j];
        }
    }
}

void accum_colsum(const float* G, float* db, int M, int N) {
    for (int i = 0; i < M; ++i) {
        const float* grow = G + static_cast<std::int64_t>(i) * N;
        for (int j = 0; j < N; ++j) db[j] += grow[j];
    }
}

float rmsnorm_row(const float* x, const float* w, float* y, int n, float eps) {
    float ss = det_dot(x, x, n);
    float inv = 1.0f / std::sqrt(ss / static_cast<float>(n) + eps);
    for (int i = 0; i < n; ++i) y[i] = x[i] * inv * w[i];
    return inv;
}

void rope_row(float* x, int pos, int n_heads, int head_dim) {
    int half = head_dim / 2;
    for (int j = 0; j < half; ++j) {
        float freq = std::pow(10000.0f, -static_cast<float>(2 * j) / static_cast<float>(head_dim));
        float ang = static_cast<float>(pos) * freq;
        float c = std::cos(ang), s = std::sin(ang);
        for (int h = 0; h < n_heads; ++h) {
            float* v = x + h * head_dim;
            float a = v[j], b = v[j + half];
            v[j] = a * c - b * s;
            v[j + half] = b * c + a * s;
        }
    }
}

void rope_row_inv(float* x, int pos, int n_heads, int head_dim) {
    int half = head_dim / 2;
    for (int j = 0; j < half; ++j) {
        float freq = std::pow(10000.0f, -static_cast<float>(2 * j) / static_cast<float>(head_dim));
        float ang = static_cast<float>(pos) * freq;
        float c = std::cos(ang), s = std::sin(ang);
        for (int h = 0; h < n_heads; ++h) {
            float* v = x + h * head_dim;
            float a = v[j], b = v[j + half];
            v[j] = a * c + b * s;
            v[j + half] = b * c - a * s;
        }
    }
}

void softmax_row(float* x, int n) {
    float mx = x[0];
    for (int i = 1; i < n; ++i) mx = x[i] > mx ? x[i] : mx;
    float sum = 0.f;
    for (int i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        sum += x[i];
    }
    float inv = 1.0f / sum;
    for (int i = 0; i < n; ++i) x[i] *= inv;
}

void attn_row(const float* q, const float* K, const float* V, int n_keys,
              int n_heads, int head_dim, float* probs, float* out) {
    int dim = n_heads * head_dim;
    float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
    for (int h = 0; h < n_heads; ++h) {
        const float* qh = q + h * head_dim;
        float* ph = probs + static_cast<std::int64_t>(h) * n_keys;
        for (int j = 0; j < n_keys; ++j)
            ph[j] = det_dot(qh, K + static_cast<std::int64_t>(j) * dim + h * head_dim, head_dim) * scale;
        softmax_row(ph, n_keys);
        float* oh = out + h * head_dim;
        for (int d = 0; d < head_dim; ++d) oh[d] = 0.f;
        for (int j = 0; j < n_keys; ++j) {
            float p = ph[j];
            const float* vh = V + static_cast<std::int64_t>(j) * dim + h * head_dim;
            for (int d = 0; d < head_dim; ++d) oh[d] += p * vh[d];
        }
    }
}

void fsq_apply(const float* x, float* y, std::int64_t n, float delta, int L) {
    const float lim = static_cast<float>(L);
    for (std::int64_t i = 0; i < n; ++i) {
        float q = std::round(x[i] / delta);
        if (q > lim) q = lim;
        if (q < -lim) q = -lim;
        y[i] = delta * q;
    }
}

void silu(const float* x, float* y, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) {
        float s = 1.0f / (1.0f + std::exp(-x[i]));
        y[i] = x[i] * s;
    }
}

void silu_grad(const float* x, const float* gy, float* gx, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) {
        float s = 1.0f / (1.0f + std::exp(-x[i]));
        gx[i] += gy[i] * (s + x[i] * s * (1.0f - s));
    }
}

void tanh_v(const float* x, float* y, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
}

void sigmoid_v(const float* x, float* y, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) y[i] = 1.0f / (1.0f + std::exp(-x[i]));
}

} // namespace patchflow::kern
