#include "patchflow/fsq.hpp"

#include <cmath>
#include <stdexcept>

#include "patchflow/kernels.hpp"

namespace patchflow {

FsqLattice lattice_for(const ModelConfig& cfg) {
    FsqLattice lat;
    lat.L = cfg.fsq_L();
    lat.delta = 1.0f / static_cast<float>(lat.L);
    lat.dim = cfg.fsq_dim;
    return lat;
}

void quantize_inplace(const float* x, float* out, int n, const FsqLattice& lat) {
    for (int i = 0; i < n; ++i)
        if (!std::isfinite(x[i]))
            throw std::runtime_error("quantize: non-finite input at coordinate " +
                                     std::to_string(i));
    kern::fsq_apply(x, out, n, lat.delta, lat.L);
}

std::vector<float> quantize(const std::vector<float>& x, const FsqLattice& lat) {
    std::vector<float> out(x.size());
    quantize_inplace(x.data(), out.data(), static_cast<int>(x.size()), lat);
    return out;
}

CodebookSize codebook_size(const FsqLattice& lat) {
    CodebookSize cs;
    const std::uint64_t levels = 2ull * lat.L + 1;
    cs.log10_size = lat.dim * std::log10(static_cast<double>(levels));
    std::uint64_t v = 1;
    for (int i = 0; i < lat.dim; ++i) {
        if (v > UINT64_MAX / levels) {
            cs.exact = false;
            cs.value = 0;
            return cs;
        }
        v *= levels;
    }
    cs.value = v;
    return cs;
}

void FsqBottleneck::init(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
    lat = lattice_for(cfg);
    const int d = cfg.model_dim, f = cfg.fsq_dim;
    down_w = store.create("fsq.down.w", d, f, {ParamInit::normal, 0.02f}, rng, true);
    down_b = store.create("fsq.down.b", 1, f, {ParamInit::zeros}, rng);
    up_w = store.create("fsq.up.w", f, d, {ParamInit::normal, 0.02f}, rng, true);
    up_b = store.create("fsq.up.b", 1, d, {ParamInit::zeros}, rng);
}

void FsqBottleneck::bind(ParamStore& store) {
    down_w = store.get("fsq.down.w");
    down_b = store.get("fsq.down.b");
    up_w = store.get("fsq.up.w");
    up_b = store.get("fsq.up.b");
}

FsqBottleneck::Out FsqBottleneck::forward(Tape& t, const TPtr& h) const {
    Out o;
    auto bounded = tanh_op(t, linear(t, h, t.leaf(down_w), t.leaf(down_b)));
    // scale the (-1,1) activation onto [-L*delta, L*delta]
    const float span = lat.L * lat.delta;
    o.pre_q = span == 1.0f ? bounded : scale(t, bounded, span);
    o.lattice_vec = bypass ? o.pre_q : fsq_quantize(t, o.pre_q, lat.delta, lat.L);
    o.up = linear(t, o.lattice_vec, t.leaf(up_w), t.leaf(up_b));
    return o;
}

void FsqBottleneck::raw_forward(const float* h, int model_dim, float* lattice_vec,
                                float* up) const {
    const int f = lat.dim;
    std::vector<float> pre(f);
    kern::gemm_colB(h, down_w->wcm.data(), pre.data(), 1, model_dim, f, down_b->w.data());
    kern::tanh_v(pre.data(), pre.data(), f);
    const float span = lat.L * lat.delta;
    if (span != 1.0f)
        for (int i = 0; i < f; ++i) pre[i] *= span;
    if (bypass) {
        for (int i = 0; i < f; ++i) lattice_vec[i] = pre[i];
    } else {
        quantize_inplace(pre.data(), lattice_vec, f, lat);
    }
    raw_up(lattice_vec, up);
}

void FsqBottleneck::raw_up(const float* lattice_vec, float* up) const {
    kern::gemm_colB(lattice_vec, up_w->wcm.data(), up, 1, lat.dim, up_w->cols, up_b->w.data());
}

} // namespace patchflow
