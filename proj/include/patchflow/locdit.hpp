#pragma once

#include <functional>
#include <vector>

#include "patchflow/backbone.hpp"
#include "patchflow/config.hpp"
#include "patchflow/params.hpp"
#include "patchflow/tensor.hpp"

namespace patchflow {

// rectified-flow interpolation: z_t = (1-t) z0 + t eps, target v = eps - z0
void make_flow_sample(const float* z0, const float* eps, float t, int n, float* z_t,
                      float* target_v);
// v_u + s * (v_c - v_u); s==1 and s==0 short-circuit to the exact branch
void guidance_combine(const float* v_c, const float* v_u, float s, int n, float* out);

// Patch-local flow decoder: bidirectional transformer over [z_prev ; z_t]
// tokens with (condition + time) entering through per-block modulation.
struct LocDit {
    ModelConfig cfg;
    ParamPtr lift_w, lift_b, pos;
    ParamPtr t1_w, t1_b, t2_w, t2_b; // time-embedding MLP
    ParamPtr null_embedding;         // CFG substitute for the condition
    ParamPtr start_patch;            // z_prev for the first patch
    Stack stack;                     // blocks without their own conditioning
    std::vector<ParamPtr> mod_w, mod_b; // per block, dim -> 6*dim
    ParamPtr fmod_w, fmod_b;            // final modulation, dim -> 2*dim
    ParamPtr out_w, out_b;              // dim -> D

    void init(ParamStore& s, const ModelConfig& c, Rng& rng);
    void bind(ParamStore& s, const ModelConfig& c);

    // tokens: [G*2P, D] rows (z_prev patch then z_t patch per group);
    // t_of_group: per-group flow time; cond: [G, model_dim].
    // returns predicted velocity over the z_t half: [G*P, D]
    TPtr forward(Tape& t, const TPtr& tokens, const std::vector<float>& t_of_group,
                 const TPtr& cond) const;

    // no-tape single-patch velocity
    void velocity(const float* z_prev, const float* z_t, float t, const float* cond,
                  float* v_out) const;
};

using VelocityFn = std::function<void(const float* z_t, float t, float* v_out)>;

// Euler integration from t=1 (noise) to t=0; z_out has P*D entries.
// The initial noise is drawn from rng; deterministic given its state.
void sample_patch_core(const VelocityFn& vel, int n, int steps, Rng& rng, float* z_out);

// full sampler with classifier-free guidance over the model's null embedding
void sample_patch(const LocDit& dit, const float* cond, const float* z_prev, int steps,
                  float s, Rng& rng, float* z_out);

} // namespace patchflow
