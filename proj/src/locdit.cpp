#include "patchflow/locdit.hpp"

#include <cmath>
#include <cstring>

#include "patchflow/kernels.hpp"

namespace patchflow {

void make_flow_sample(const float* z0, const float* eps, float t, int n, float* z_t,
                      float* target_v) {
    const float a = 1.0f - t;
    for (int i = 0; i < n; ++i) {
        z_t[i] = a * z0[i] + t * eps[i];
        target_v[i] = eps[i] - z0[i];
    }
}

void guidance_combine(const float* v_c, const float* v_u, float s, int n, float* out) {
    if (s == 1.0f) {
        std::memcpy(out, v_c, n * sizeof(float));
    } else if (s == 0.0f) {
        std::memcpy(out, v_u, n * sizeof(float));
    } else {
        for (int i = 0; i < n; ++i) out[i] = v_u[i] + s * (v_c[i] - v_u[i]);
    }
}

namespace {

void time_features(float t, int dim, float* out) {
    const int half = dim / 2;
    const float x = 1000.0f * t;
    for (int j = 0; j < half; ++j) {
        const float f = std::exp(-std::log(10000.0f) * static_cast<float>(j) / half);
        out[j] = std::sin(x * f);
        out[half + j] = std::cos(x * f);
    }
    if (dim & 1) out[dim - 1] = 0.f;
}

} // namespace

void LocDit::init(ParamStore& s, const ModelConfig& c, Rng& rng) {
    cfg = c;
    const int d = c.model_dim, D = c.latent_dim, P = c.patch_size;
    lift_w = s.create("locdit.lift.w", D, d, {ParamInit::normal, 0.02f}, rng, true);
    lift_b = s.create("locdit.lift.b", 1, d, {ParamInit::zeros}, rng);
    pos = s.create("locdit.pos", 2 * P, d, {ParamInit::normal, 0.02f}, rng, false, false);
    t1_w = s.create("locdit.time.l1.w", d, d, {ParamInit::normal, 0.02f}, rng, true);
    t1_b = s.create("locdit.time.l1.b", 1, d, {ParamInit::zeros}, rng);
    t2_w = s.create("locdit.time.l2.w", d, d, {ParamInit::normal, 0.02f}, rng, true);
    t2_b = s.create("locdit.time.l2.b", 1, d, {ParamInit::zeros}, rng);
    null_embedding = s.create("locdit.null_embedding", 1, d, {ParamInit::normal, 0.02f}, rng);
    start_patch = s.create("locdit.start_patch", P, D, {ParamInit::normal, 0.02f}, rng,
                           false, false);
    stack.init(s, "locdit.", c.locdit_layers, d, c.ffn(), c.heads(), false, rng);
    mod_w.resize(c.locdit_layers);
    mod_b.resize(c.locdit_layers);
    for (int i = 0; i < c.locdit_layers; ++i) {
        const std::string p = "locdit.blk" + std::to_string(i) + ".mod.";
        mod_w[i] = s.create(p + "w", d, 6 * d, {ParamInit::normal, 0.02f}, rng, true);
        mod_b[i] = s.create(p + "b", 1, 6 * d, {ParamInit::zeros}, rng);
    }
    fmod_w = s.create("locdit.final_mod.w", d, 2 * d, {ParamInit::normal, 0.02f}, rng, true);
    fmod_b = s.create("locdit.final_mod.b", 1, 2 * d, {ParamInit::zeros}, rng);
    out_w = s.create("locdit.out.w", d, D, {ParamInit::normal, 0.02f}, rng, true);
    out_b = s.create("locdit.out.b", 1, D, {ParamInit::zeros}, rng);
}

void LocDit::bind(ParamStore& s, const ModelConfig& c) {
    cfg = c;
    lift_w = s.get("locdit.lift.w");
    lift_b = s.get("locdit.lift.b");
    pos = s.get("locdit.pos");
    t1_w = s.get("locdit.time.l1.w");
    t1_b = s.get("locdit.time.l1.b");
    t2_w = s.get("locdit.time.l2.w");
    t2_b = s.get("locdit.time.l2.b");
    null_embedding = s.get("locdit.null_embedding");
    start_patch = s.get("locdit.start_patch");
    stack.bind(s, "locdit.", c.locdit_layers, c.heads(), false);
    mod_w.resize(c.locdit_layers);
    mod_b.resize(c.locdit_layers);
    for (int i = 0; i < c.locdit_layers; ++i) {
        const std::string p = "locdit.blk" + std::to_string(i) + ".mod.";
        mod_w[i] = s.get(p + "w");
        mod_b[i] = s.get(p + "b");
    }
    fmod_w = s.get("locdit.final_mod.w");
    fmod_b = s.get("locdit.final_mod.b");
    out_w = s.get("locdit.out.w");
    out_b = s.get("locdit.out.b");
}

TPtr LocDit::forward(Tape& t, const TPtr& tokens, const std::vector<float>& t_of_group,
                     const TPtr& cond) const {
    const int d = cfg.model_dim, P = cfg.patch_size, L = 2 * P;
    const int G = static_cast<int>(t_of_group.size());
    if (tokens->rows != G * L || cond->rows != G)
        throw std::runtime_error("locdit: group count mismatch");

    auto x = linear(t, tokens, t.leaf(lift_w), t.leaf(lift_b));
    x = tile_add(t, x, t.leaf(pos), L);

    std::vector<float> tf(static_cast<std::size_t>(G) * d);
    for (int g = 0; g < G; ++g) time_features(t_of_group[g], d, &tf[static_cast<std::size_t>(g) * d]);
    auto tfeat = t.constant(G, d, std::move(tf));
    auto temb = linear(t, silu(t, linear(t, tfeat, t.leaf(t1_w), t.leaf(t1_b))),
                       t.leaf(t2_w), t.leaf(t2_b));
    auto cm = silu(t, add(t, cond, temb));

    std::vector<Seg> segs(G);
    for (int g = 0; g < G; ++g) segs[g] = {g * L, L, false};

    for (std::size_t i = 0; i < stack.blocks.size(); ++i) {
        const Block& b = stack.blocks[i];
        auto mods = linear(t, cm, t.leaf(mod_w[i]), t.leaf(mod_b[i]));
        auto sh1 = slice_cols(t, mods, 0, d);
        auto sc1 = slice_cols(t, mods, d, d);
        auto g1 = slice_cols(t, mods, 2 * d, d);
        auto sh2 = slice_cols(t, mods, 3 * d, d);
        auto sc2 = slice_cols(t, mods, 4 * d, d);
        auto g2 = slice_cols(t, mods, 5 * d, d);
        auto a_in = group_mod(t, rmsnorm(t, x, t.leaf(b.attn_norm)), sc1, sh1, L);
        auto q = linear(t, a_in, t.leaf(b.wq), nullptr);
        auto k = linear(t, a_in, t.leaf(b.wk), nullptr);
        auto v = linear(t, a_in, t.leaf(b.wv), nullptr);
        auto ao = linear(t, attention(t, q, k, v, segs, stack.n_heads), t.leaf(b.wo), nullptr);
        x = add(t, x, group_gate(t, ao, g1, L));
        auto m_in = group_mod(t, rmsnorm(t, x, t.leaf(b.mlp_norm)), sc2, sh2, L);
        auto mo = linear(t, silu(t, linear(t, m_in, t.leaf(b.w_up), nullptr)),
                         t.leaf(b.w_down), nullptr);
        x = add(t, x, group_gate(t, mo, g2, L));
    }
    auto fm = linear(t, cm, t.leaf(fmod_w), t.leaf(fmod_b));
    auto shf = slice_cols(t, fm, 0, d);
    auto scf = slice_cols(t, fm, d, d);
    auto y = group_mod(t, rmsnorm(t, x, t.leaf(stack.final_norm)), scf, shf, L);
    auto v_all = linear(t, y, t.leaf(out_w), t.leaf(out_b));
    return group_tail(t, v_all, L, P);
}

void LocDit::velocity(const float* z_prev, const float* z_t, float t, const float* cond,
                      float* v_out) const {
    const int d = cfg.model_dim, D = cfg.latent_dim, P = cfg.patch_size, L = 2 * P;
    const int heads = stack.n_heads, hd = d / heads;
    std::vector<float> tokens(static_cast<std::size_t>(L) * D);
    std::memcpy(tokens.data(), z_prev, static_cast<std::size_t>(P) * D * sizeof(float));
    std::memcpy(tokens.data() + static_cast<std::size_t>(P) * D, z_t,
                static_cast<std::size_t>(P) * D * sizeof(float));

    std::vector<float> x(static_cast<std::size_t>(L) * d);
    kern::gemm_colB(tokens.data(), lift_w->wcm.data(), x.data(), L, D, d, lift_b->w.data());
    for (int r = 0; r < L; ++r) {
        const float* e = &pos->w[static_cast<std::int64_t>(r) * d];
        float* xr = &x[static_cast<std::int64_t>(r) * d];
        for (int c = 0; c < d; ++c) xr[c] += e[c];
    }

    std::vector<float> tf(d), ta(d), temb(d), cm(d);
    time_features(t, d, tf.data());
    kern::gemm_colB(tf.data(), t1_w->wcm.data(), ta.data(), 1, d, d, t1_b->w.data());
    kern::silu(ta.data(), ta.data(), d);
    kern::gemm_colB(ta.data(), t2_w->wcm.data(), temb.data(), 1, d, d, t2_b->w.data());
    for (int c = 0; c < d; ++c) cm[c] = cond[c] + temb[c];
    kern::silu(cm.data(), cm.data(), d);

    std::vector<float> h(x.size()), q(x.size()), k(x.size()), v(x.size()), a(x.size()),
        tmp(x.size());
    std::vector<float> probs(static_cast<std::size_t>(heads) * L);
    std::vector<float> mods(6 * static_cast<std::size_t>(d));
    for (std::size_t li = 0; li < stack.blocks.size(); ++li) {
        const Block& b = stack.blocks[li];
        kern::gemm_colB(cm.data(), mod_w[li]->wcm.data(), mods.data(), 1, d, 6 * d,
                        mod_b[li]->w.data());
        const float *sh1 = mods.data(), *sc1 = mods.data() + d, *g1 = mods.data() + 2 * d,
                    *sh2 = mods.data() + 3 * d, *sc2 = mods.data() + 4 * d,
                    *g2 = mods.data() + 5 * d;
        for (int r = 0; r < L; ++r) {
            float* hr = &h[static_cast<std::int64_t>(r) * d];
            kern::rmsnorm_row(&x[static_cast<std::int64_t>(r) * d], b.attn_norm->w.data(), hr,
                              d, 1e-6f);
            for (int c = 0; c < d; ++c) hr[c] = hr[c] * (1.f + sc1[c]) + sh1[c];
        }
        kern::gemm_colB(h.data(), b.wq->wcm.data(), q.data(), L, d, d, nullptr);
        kern::gemm_colB(h.data(), b.wk->wcm.data(), k.data(), L, d, d, nullptr);
        kern::gemm_colB(h.data(), b.wv->wcm.data(), v.data(), L, d, d, nullptr);
        for (int r = 0; r < L; ++r)
            kern::attn_row(&q[static_cast<std::int64_t>(r) * d], k.data(), v.data(), L, heads,
                           hd, probs.data(), &a[static_cast<std::int64_t>(r) * d]);
        kern::gemm_colB(a.data(), b.wo->wcm.data(), tmp.data(), L, d, d, nullptr);
        for (int r = 0; r < L; ++r) {
            float* xr = &x[static_cast<std::int64_t>(r) * d];
            const float* tr = &tmp[static_cast<std::int64_t>(r) * d];
            for (int c = 0; c < d; ++c) xr[c] += tr[c] * g1[c];
        }
        for (int r = 0; r < L; ++r) {
            float* hr = &h[static_cast<std::int64_t>(r) * d];
            kern::rmsnorm_row(&x[static_cast<std::int64_t>(r) * d], b.mlp_norm->w.data(), hr,
                              d, 1e-6f);
            for (int c = 0; c < d; ++c) hr[c] = hr[c] * (1.f + sc2[c]) + sh2[c];
        }
        const int ffn = b.w_up->cols;
        std::vector<float> u(static_cast<std::size_t>(L) * ffn);
        kern::gemm_colB(h.data(), b.w_up->wcm.data(), u.data(), L, d, ffn, nullptr);
        kern::silu(u.data(), u.data(), static_cast<std::int64_t>(u.size()));
        kern::gemm_colB(u.data(), b.w_down->wcm.data(), tmp.data(), L, ffn, d, nullptr);
        for (int r = 0; r < L; ++r) {
            float* xr = &x[static_cast<std::int64_t>(r) * d];
            const float* tr = &tmp[static_cast<std::int64_t>(r) * d];
            for (int c = 0; c < d; ++c) xr[c] += tr[c] * g2[c];
        }
    }
    kern::gemm_colB(cm.data(), fmod_w->wcm.data(), mods.data(), 1, d, 2 * d, fmod_b->w.data());
    const float *shf = mods.data(), *scf = mods.data() + d;
    for (int r = 0; r < L; ++r) {
        float* hr = &h[static_cast<std::int64_t>(r) * d];
        kern::rmsnorm_row(&x[static_cast<std::int64_t>(r) * d], stack.final_norm->w.data(), hr,
                          d, 1e-6f);
        for (int c = 0; c < d; ++c) hr[c] = hr[c] * (1.f + scf[c]) + shf[c];
    }
    // only the z_t half carries the prediction
    kern::gemm_colB(h.data() + static_cast<std::int64_t>(P) * d, out_w->wcm.data(), v_out, P,
                    d, D, out_b->w.data());
}

void sample_patch_core(const VelocityFn& vel, int n, int steps, Rng& rng, float* z_out) {
    for (int i = 0; i < n; ++i) z_out[i] = rng.normalf();
    std::vector<float> v(n);
    const float dt = 1.0f / static_cast<float>(steps);
    for (int j = 0; j < steps; ++j) {
        const float t = 1.0f - static_cast<float>(j) / static_cast<float>(steps);
        vel(z_out, t, v.data());
        for (int i = 0; i < n; ++i) z_out[i] -= dt * v[i];
    }
}

void sample_patch(const LocDit& dit, const float* cond, const float* z_prev, int steps,
                  float s, Rng& rng, float* z_out) {
    const int n = dit.cfg.patch_size * dit.cfg.latent_dim;
    const float* null_c = dit.null_embedding->w.data();
    VelocityFn vel;
    if (s == 1.0f) {
        vel = [&](const float* z, float t, float* v) { dit.velocity(z_prev, z, t, cond, v); };
    } else if (s == 0.0f) {
        vel = [&](const float* z, float t, float* v) { dit.velocity(z_prev, z, t, null_c, v); };
    } else {
        vel = [&, n](const float* z, float t, float* v) {
            std::vector<float> vc(n), vu(n);
            dit.velocity(z_prev, z, t, cond, vc.data());
            dit.velocity(z_prev, z, t, null_c, vu.data());
            guidance_combine(vc.data(), vu.data(), s, n, v);
        };
    }
    sample_patch_core(vel, n, steps, rng, z_out);
}

} // namespace patchflow
