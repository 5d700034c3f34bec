#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

namespace patchflow {

struct Param;

// A node on the autodiff tape. All tensors are 2-D row-major [rows, cols];
// scalars are [1,1].
struct Tensor {
    int rows = 0, cols = 0;
    std::vector<float> v;
    std::vector<float> g;
    bool needs_grad = false;
    std::function<void()> back;
    Param* param = nullptr;

    std::int64_t size() const { return static_cast<std::int64_t>(rows) * cols; }
    void ensure_grad() {
        if (g.size() != static_cast<std::size_t>(size())) g.assign(size(), 0.f);
    }
    float item() const { return v[0]; }
};

using TPtr = std::shared_ptr<Tensor>;

// Attention segment: rows [start, start+len) attend among themselves.
struct Seg {
    int start = 0;
    int len = 0;
    bool causal = true;
};

// Records ops in creation order (a topological order) and replays them in
// reverse on backward(). One tape per optimization step.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape(); // breaks the shared_ptr cycles held by the backward closures

    TPtr leaf(const std::shared_ptr<Param>& p);
    TPtr constant(int rows, int cols, const float* data);
    TPtr constant(int rows, int cols, std::vector<float>&& data);
    TPtr zeros(int rows, int cols, bool needs_grad = false);
    // raw node; caller fills v and back
    TPtr make(int rows, int cols, bool needs_grad);

    void backward(const TPtr& loss);
    // adds the grads of all param leaves into their Param::g buffers
    void sync_param_grads();

    std::size_t node_count() const { return order_.size(); }

private:
    std::vector<TPtr> order_;
    std::unordered_map<const Param*, TPtr> leaf_cache_;
};

// ---- ops -------------------------------------------------------------

TPtr add(Tape& t, const TPtr& a, const TPtr& b);
TPtr add_scaled(Tape& t, const TPtr& a, const TPtr& b, float alpha);
TPtr mul(Tape& t, const TPtr& a, const TPtr& b);
TPtr scale(Tape& t, const TPtr& a, float c);
// x[R,K] * w[K,N] + b[1,N]; b may be null
TPtr linear(Tape& t, const TPtr& x, const TPtr& w, const TPtr& b);
TPtr embedding(Tape& t, const TPtr& table, const std::vector<int>& ids);
TPtr concat_rows(Tape& t, const std::vector<TPtr>& parts);
TPtr slice_rows(Tape& t, const TPtr& x, int r0, int n);
TPtr gather_rows(Tape& t, const TPtr& x, const std::vector<int>& idx);
TPtr concat_cols(Tape& t, const TPtr& a, const TPtr& b);
TPtr slice_cols(Tape& t, const TPtr& x, int c0, int n);
// x[G*L,C] + e[L,C] tiled over groups
TPtr tile_add(Tape& t, const TPtr& x, const TPtr& e, int L);
// out row r = mask[r] ? sub[0,:] : x[r,:]
TPtr row_mix(Tape& t, const TPtr& x, const TPtr& sub, const std::vector<std::uint8_t>& mask);
// n copies of a [1,C] row
TPtr repeat_row(Tape& t, const TPtr& row, int n);
TPtr rmsnorm(Tape& t, const TPtr& x, const TPtr& w);
TPtr silu(Tape& t, const TPtr& x);
TPtr tanh_op(Tape& t, const TPtr& x);
TPtr sigmoid_op(Tape& t, const TPtr& x);
// rotary embedding, one position per row
TPtr rope(Tape& t, const TPtr& x, const std::vector<int>& pos, int n_heads);
TPtr attention(Tape& t, const TPtr& q, const TPtr& k, const TPtr& v,
               const std::vector<Seg>& segs, int n_heads);
// straight-through scalar quantizer: forward snaps to the lattice, backward
// passes gradients unchanged
TPtr fsq_quantize(Tape& t, const TPtr& x, float delta, int L);
TPtr mean_pool_groups(Tape& t, const TPtr& x, int L);
// out[r,:] = x[r,:] .* (1 + scale[g,:]) + shift[g,:], g = r / L
TPtr group_mod(Tape& t, const TPtr& x, const TPtr& scl, const TPtr& shift, int L);
TPtr group_gate(Tape& t, const TPtr& x, const TPtr& gate, int L);
// last P rows of every L-row group
TPtr group_tail(Tape& t, const TPtr& x, int L, int P);
// sum((pred-target)^2 .* mask) / sum(mask)
TPtr mse_masked(Tape& t, const TPtr& pred, const TPtr& target, const TPtr& mask);
TPtr bce_logits_mean(Tape& t, const TPtr& logits, const TPtr& labels);
TPtr kl_std_normal(Tape& t, const TPtr& mean, const TPtr& logvar);
TPtr gauss_reparam(Tape& t, const TPtr& mean, const TPtr& logvar, const TPtr& eps);
TPtr sum_weighted(Tape& t, const TPtr& x, const TPtr& w);
// causal strided conv; x[T,Cin], w[K*Cin,Cout] (kernel-major rows), out [T/stride, Cout]
TPtr conv1d_causal(Tape& t, const TPtr& x, const TPtr& w, const TPtr& b,
                   int K, int Cin, int Cout, int stride);
// causal transposed conv; x[T,Cin], w[Cin,K*Cout], out [T*stride, Cout]
TPtr tconv1d_causal(Tape& t, const TPtr& x, const TPtr& w, const TPtr& b,
                    int K, int Cin, int Cout, int stride);

} // namespace patchflow
