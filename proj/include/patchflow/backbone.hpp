#pragma once

#include <string>
#include <vector>

#include "patchflow/config.hpp"
#include "patchflow/fsq.hpp"
#include "patchflow/params.hpp"
#include "patchflow/tensor.hpp"

namespace patchflow {

// ---- shared transformer pieces -------------------------------------------

struct Block {
    ParamPtr attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down;
};

struct Stack {
    std::vector<Block> blocks;
    ParamPtr final_norm;
    int n_heads = 1;
    bool use_rope = true;

    void init(ParamStore& s, const std::string& prefix, int layers, int dim, int ffn,
              int heads, bool rope, Rng& rng);
    void bind(ParamStore& s, const std::string& prefix, int layers, int heads, bool rope);
    TPtr forward(Tape& t, TPtr x, const std::vector<Seg>& segs,
                 const std::vector<int>& pos) const;
};

// KV cache for one causal stack; row-by-row incremental path sharing the
// same kernels as the batched tape path.
struct StackState {
    std::vector<std::vector<float>> k, v; // per layer, row-major [n, dim]
    int n = 0;
    void clear() {
        for (auto& x : k) x.clear();
        for (auto& x : v) x.clear();
        n = 0;
    }
};

struct RawStack {
    const Stack* stack = nullptr;
    int dim = 0;

    StackState new_state() const;
    // one causal step: consumes x[dim] at position pos, appends to state
    void step(const float* x, int pos, StackState& st, float* out) const;
    // bidirectional pass over n rows in place ([n, dim]); no state
    void run_bidir(float* rows, int n) const;
};

// ---- batched training input -----------------------------------------------

struct SeqBatch {
    int P = 0, D = 0;
    std::vector<std::vector<int>> tokens; // per utterance, byte ids (no BOS)
    std::vector<int> patch_counts;        // M_u
    std::vector<std::uint8_t> cfg_mask;   // per utterance: 1 = condition masked for CFG
    std::vector<float> latents;           // [sum(M_u)*P, D] teacher-forcing stream
    std::vector<float> frame_mask;        // [sum(M_u)*P] 1 = real frame
    std::vector<float> stop_labels;       // [sum(M_u)] 1 at each utterance's last patch

    int total_patches() const {
        int s = 0;
        for (int m : patch_counts) s += m;
        return s;
    }
};

struct BackboneOut {
    TPtr E;           // [sum M, dim] LocEnc embeddings
    TPtr h_audio;     // TSLM hiddens at audio slots
    TPtr pre_q, lattice_vec, up;
    TPtr h_residual;  // null when the variant removes RALM
    TPtr h_final;     // up + residual (or up)
    TPtr cond;        // what LocDiT conditions on (variant-dependent)
    TPtr stop_logits; // [sum M, 1]
};

// LocEnc + TSLM + FSQ + RALM + stop head
struct Backbone {
    ModelConfig cfg;
    Variant variant = Variant::none;
    FsqBottleneck fsq;
    // locenc
    ParamPtr le_lift_w, le_lift_b, le_pos;
    Stack le_stack;
    // tslm
    ParamPtr tok_emb, audio_bos;
    Stack tslm_stack;
    // ralm
    ParamPtr fuse_w, fuse_b, null_acoustic;
    Stack ralm_stack;
    // stop head
    ParamPtr st1_w, st1_b, st2_w, st2_b, st3_w, st3_b;

    bool has_ralm() const { return variant != Variant::no_ralm; }

    void init(ParamStore& s, const ModelConfig& c, Variant v, Rng& rng);
    void bind(ParamStore& s, const ModelConfig& c, Variant v);

    BackboneOut forward(Tape& t, const SeqBatch& b) const;

    // ---- raw inference pieces ----
    // LocEnc over one patch ([P, D] row-major) -> E[dim]
    void locenc_raw(const float* patch, float* out) const;
    // stop logit from an up-projected skeleton row
    float stop_raw(const float* up) const;
    // fused RALM audio-slot input from (up, prev E)
    void ralm_fuse_raw(const float* up, const float* e_prev, float* out) const;
};

} // namespace patchflow
