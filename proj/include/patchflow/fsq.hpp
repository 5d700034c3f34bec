#pragma once

#include <cstdint>
#include <vector>

#include "patchflow/config.hpp"
#include "patchflow/params.hpp"
#include "patchflow/tensor.hpp"

namespace patchflow {

struct FsqLattice {
    float delta = 0.25f;
    int L = 4;
    int dim = 32;
};

FsqLattice lattice_for(const ModelConfig& cfg);

// per-coordinate delta * clip(round(x/delta), -L, L); rejects non-finite input
std::vector<float> quantize(const std::vector<float>& x, const FsqLattice& lat);
void quantize_inplace(const float* x, float* out, int n, const FsqLattice& lat);

struct CodebookSize {
    bool exact = true;            // value fits in 64 bits
    std::uint64_t value = 0;      // valid when exact
    double log10_size = 0.0;      // always valid
};
CodebookSize codebook_size(const FsqLattice& lat);

// down-projection -> tanh bound -> lattice snap -> up-projection
struct FsqBottleneck {
    FsqLattice lat;
    bool bypass = false; // no_fsq ablation: skip the lattice snap
    ParamPtr down_w, down_b, up_w, up_b;

    void init(ParamStore& store, const ModelConfig& cfg, Rng& rng);
    void bind(ParamStore& store); // look up existing params (checkpoint load)

    struct Out {
        TPtr pre_q;       // bounded, pre-quantization
        TPtr lattice_vec; // on the lattice (or pre_q when bypassed)
        TPtr up;          // model-dim skeleton embedding
    };
    Out forward(Tape& t, const TPtr& h) const;

    // inference path: one row, no tape
    void raw_forward(const float* h, int model_dim, float* lattice_vec, float* up) const;
    // just the up-projection (used by the decomposition identity check)
    void raw_up(const float* lattice_vec, float* up) const;
};

} // namespace patchflow
