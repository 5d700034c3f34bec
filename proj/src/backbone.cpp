#include "patchflow/backbone.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "patchflow/corpus.hpp"
#include "patchflow/kernels.hpp"

namespace patchflow {

// ---- Stack -----------------------------------------------------------------

void Stack::init(ParamStore& s, const std::string& prefix, int layers, int dim, int ffn,
                 int heads, bool rope, Rng& rng) {
    n_heads = heads;
    use_rope = rope;
    blocks.resize(layers);
    for (int i = 0; i < layers; ++i) {
        const std::string p = prefix + "blk" + std::to_string(i) + ".";
        Block& b = blocks[i];
        b.attn_norm = s.create(p + "attn_norm", 1, dim, {ParamInit::ones}, rng);
        b.wq = s.create(p + "wq", dim, dim, {ParamInit::normal, 0.02f}, rng, true);
        b.wk = s.create(p + "wk", dim, dim, {ParamInit::normal, 0.02f}, rng, true);
        b.wv = s.create(p + "wv", dim, dim, {ParamInit::normal, 0.02f}, rng, true);
        b.wo = s.create(p + "wo", dim, dim, {ParamInit::normal, 0.02f}, rng, true);
        b.mlp_norm = s.create(p + "mlp_norm", 1, dim, {ParamInit::ones}, rng);
        b.w_up = s.create(p + "w_up", dim, ffn, {ParamInit::normal, 0.02f}, rng, true);
        b.w_down = s.create(p + "w_down", ffn, dim, {ParamInit::normal, 0.02f}, rng, true);
    }
    final_norm = s.create(prefix + "final_norm", 1, dim, {ParamInit::ones}, rng);
}

void Stack::bind(ParamStore& s, const std::string& prefix, int layers, int heads, bool rope) {
    n_heads = heads;
    use_rope = rope;
    blocks.resize(layers);
    for (int i = 0; i < layers; ++i) {
        const std::string p = prefix + "blk" + std::to_string(i) + ".";
        Block& b = blocks[i];
        b.attn_norm = s.get(p + "attn_norm");
        b.wq = s.get(p + "wq");
        b.wk = s.get(p + "wk");
        b.wv = s.get(p + "wv");
        b.wo = s.get(p + "wo");
        b.mlp_norm = s.get(p + "mlp_norm");
        b.w_up = s.get(p + "w_up");
        b.w_down = s.get(p + "w_down");
    }
    final_norm = s.get(prefix + "final_norm");
}

TPtr Stack::forward(Tape& t, TPtr x, const std::vector<Seg>& segs,
                    const std::vector<int>& pos) const {
    for (const Block& b : blocks) {
        auto h = rmsnorm(t, x, t.leaf(b.attn_norm));
        auto q = linear(t, h, t.leaf(b.wq), nullptr);
        auto k = linear(t, h, t.leaf(b.wk), nullptr);
        auto v = linear(t, h, t.leaf(b.wv), nullptr);
        if (use_rope) {
            q = rope(t, q, pos, n_heads);
            k = rope(t, k, pos, n_heads);
        }
        auto a = attention(t, q, k, v, segs, n_heads);
        x = add(t, x, linear(t, a, t.leaf(b.wo), nullptr));
        auto h2 = rmsnorm(t, x, t.leaf(b.mlp_norm));
        auto u = silu(t, linear(t, h2, t.leaf(b.w_up), nullptr));
        x = add(t, x, linear(t, u, t.leaf(b.w_down), nullptr));
    }
    return rmsnorm(t, x, t.leaf(final_norm));
}

// ---- RawStack ----------------------------------------------------------------

StackState RawStack::new_state() const {
    StackState st;
    st.k.resize(stack->blocks.size());
    st.v.resize(stack->blocks.size());
    return st;
}

void RawStack::step(const float* x_in, int pos, StackState& st, float* out) const {
    const int d = dim;
    const int heads = stack->n_heads, hd = d / heads;
    std::vector<float> x(x_in, x_in + d), h(d), q(d), kr(d), vr(d), a(d), tmp(d);
    const int n_new = st.n + 1;
    std::vector<float> probs(static_cast<std::size_t>(heads) * n_new);
    for (std::size_t li = 0; li < stack->blocks.size(); ++li) {
        const Block& b = stack->blocks[li];
        kern::rmsnorm_row(x.data(), b.attn_norm->w.data(), h.data(), d, 1e-6f);
        kern::gemm_colB(h.data(), b.wq->wcm.data(), q.data(), 1, d, d, nullptr);
        kern::gemm_colB(h.data(), b.wk->wcm.data(), kr.data(), 1, d, d, nullptr);
        kern::gemm_colB(h.data(), b.wv->wcm.data(), vr.data(), 1, d, d, nullptr);
        if (stack->use_rope) {
            kern::rope_row(q.data(), pos, heads, hd);
            kern::rope_row(kr.data(), pos, heads, hd);
        }
        auto& K = st.k[li];
        auto& V = st.v[li];
        K.insert(K.end(), kr.begin(), kr.end());
        V.insert(V.end(), vr.begin(), vr.end());
        kern::attn_row(q.data(), K.data(), V.data(), n_new, heads, hd, probs.data(), a.data());
        kern::gemm_colB(a.data(), b.wo->wcm.data(), tmp.data(), 1, d, d, nullptr);
        for (int i = 0; i < d; ++i) x[i] += tmp[i];
        kern::rmsnorm_row(x.data(), b.mlp_norm->w.data(), h.data(), d, 1e-6f);
        std::vector<float> u(b.w_up->cols);
        kern::gemm_colB(h.data(), b.w_up->wcm.data(), u.data(), 1, d, b.w_up->cols, nullptr);
        kern::silu(u.data(), u.data(), static_cast<std::int64_t>(u.size()));
        kern::gemm_colB(u.data(), b.w_down->wcm.data(), tmp.data(), 1, b.w_up->cols, d, nullptr);
        for (int i = 0; i < d; ++i) x[i] += tmp[i];
    }
    st.n = n_new;
    kern::rmsnorm_row(x.data(), stack->final_norm->w.data(), out, d, 1e-6f);
}

void RawStack::run_bidir(float* rows, int n) const {
    const int d = dim;
    const int heads = stack->n_heads, hd = d / heads;
    std::vector<float> h(static_cast<std::size_t>(n) * d), q(h.size()), k(h.size()),
        v(h.size()), a(h.size()), tmp(h.size());
    std::vector<float> probs(static_cast<std::size_t>(heads) * n);
    for (std::size_t li = 0; li < stack->blocks.size(); ++li) {
        const Block& b = stack->blocks[li];
        for (int r = 0; r < n; ++r)
            kern::rmsnorm_row(rows + static_cast<std::int64_t>(r) * d, b.attn_norm->w.data(),
                              &h[static_cast<std::int64_t>(r) * d], d, 1e-6f);
        kern::gemm_colB(h.data(), b.wq->wcm.data(), q.data(), n, d, d, nullptr);
        kern::gemm_colB(h.data(), b.wk->wcm.data(), k.data(), n, d, d, nullptr);
        kern::gemm_colB(h.data(), b.wv->wcm.data(), v.data(), n, d, d, nullptr);
        for (int r = 0; r < n; ++r)
            kern::attn_row(&q[static_cast<std::int64_t>(r) * d], k.data(), v.data(), n, heads,
                           hd, probs.data(), &a[static_cast<std::int64_t>(r) * d]);
        kern::gemm_colB(a.data(), b.wo->wcm.data(), tmp.data(), n, d, d, nullptr);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * d; ++i) rows[i] += tmp[i];
        for (int r = 0; r < n; ++r)
            kern::rmsnorm_row(rows + static_cast<std::int64_t>(r) * d, b.mlp_norm->w.data(),
                              &h[static_cast<std::int64_t>(r) * d], d, 1e-6f);
        const int ffn = b.w_up->cols;
        std::vector<float> u(static_cast<std::size_t>(n) * ffn);
        kern::gemm_colB(h.data(), b.w_up->wcm.data(), u.data(), n, d, ffn, nullptr);
        kern::silu(u.data(), u.data(), static_cast<std::int64_t>(u.size()));
        kern::gemm_colB(u.data(), b.w_down->wcm.data(), tmp.data(), n, ffn, d, nullptr);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * d; ++i) rows[i] += tmp[i];
    }
    for (int r = 0; r < n; ++r)
        kern::rmsnorm_row(rows + static_cast<std::int64_t>(r) * d,
                          stack->final_norm->w.data(),
                          rows + static_cast<std::int64_t>(r) * d, d, 1e-6f);
}

// ---- Backbone ------------------------------------------------------------------

void Backbone::init(ParamStore& s, const ModelConfig& c, Variant v, Rng& rng) {
    cfg = c;
    variant = v;
    const int d = c.model_dim;
    fsq.init(s, c, rng);
    fsq.bypass = (v == Variant::no_fsq);
    le_lift_w = s.create("locenc.lift.w", c.latent_dim, d, {ParamInit::normal, 0.02f}, rng, true);
    le_lift_b = s.create("locenc.lift.b", 1, d, {ParamInit::zeros}, rng);
    le_pos = s.create("locenc.pos", c.patch_size, d, {ParamInit::normal, 0.02f}, rng,
                      false, false);
    le_stack.init(s, "locenc.", c.locenc_layers, d, c.ffn(), c.heads(), false, rng);
    tok_emb = s.create("tslm.tok_emb", c.vocab_size, d, {ParamInit::normal, 0.02f}, rng,
                       false, false);
    audio_bos = s.create("tslm.audio_bos", 1, d, {ParamInit::normal, 0.02f}, rng);
    tslm_stack.init(s, "tslm.", c.tslm_layers, d, c.ffn(), c.heads(), true, rng);
    if (has_ralm()) {
        fuse_w = s.create("ralm.fuse.w", 2 * d, d, {ParamInit::normal, 0.02f}, rng, true);
        fuse_b = s.create("ralm.fuse.b", 1, d, {ParamInit::zeros}, rng);
        null_acoustic = s.create("ralm.null_acoustic", 1, d, {ParamInit::normal, 0.02f}, rng);
        ralm_stack.init(s, "ralm.", c.ralm_layers, d, c.ffn(), c.heads(), true, rng);
    }
    const int sh = c.stop_mlp_dim();
    st1_w = s.create("stop.l1.w", d, sh, {ParamInit::normal, 0.02f}, rng, true);
    st1_b = s.create("stop.l1.b", 1, sh, {ParamInit::zeros}, rng);
    st2_w = s.create("stop.l2.w", sh, sh, {ParamInit::normal, 0.02f}, rng, true);
    st2_b = s.create("stop.l2.b", 1, sh, {ParamInit::zeros}, rng);
    st3_w = s.create("stop.l3.w", sh, 1, {ParamInit::normal, 0.02f}, rng, true);
    st3_b = s.create("stop.l3.b", 1, 1, {ParamInit::zeros}, rng);
}

void Backbone::bind(ParamStore& s, const ModelConfig& c, Variant v) {
    cfg = c;
    variant = v;
    fsq.bind(s);
    fsq.lat = lattice_for(c);
    fsq.bypass = (v == Variant::no_fsq);
    le_lift_w = s.get("locenc.lift.w");
    le_lift_b = s.get("locenc.lift.b");
    le_pos = s.get("locenc.pos");
    le_stack.bind(s, "locenc.", c.locenc_layers, c.heads(), false);
    tok_emb = s.get("tslm.tok_emb");
    audio_bos = s.get("tslm.audio_bos");
    tslm_stack.bind(s, "tslm.", c.tslm_layers, c.heads(), true);
    if (has_ralm()) {
        fuse_w = s.get("ralm.fuse.w");
        fuse_b = s.get("ralm.fuse.b");
        null_acoustic = s.get("ralm.null_acoustic");
        ralm_stack.bind(s, "ralm.", c.ralm_layers, c.heads(), true);
    }
    st1_w = s.get("stop.l1.w");
    st1_b = s.get("stop.l1.b");
    st2_w = s.get("stop.l2.w");
    st2_b = s.get("stop.l2.b");
    st3_w = s.get("stop.l3.w");
    st3_b = s.get("stop.l3.b");
}

BackboneOut Backbone::forward(Tape& t, const SeqBatch& b) const {
    const int d = cfg.model_dim, P = b.P;
    const int U = static_cast<int>(b.tokens.size());
    const int sumM = b.total_patches();
    BackboneOut out;

    // LocEnc over every patch of the batch
    {
        auto lat = t.constant(sumM * P, b.D, b.latents.data());
        auto x = linear(t, lat, t.leaf(le_lift_w), t.leaf(le_lift_b));
        x = tile_add(t, x, t.leaf(le_pos), P);
        std::vector<Seg> segs(sumM);
        for (int g = 0; g < sumM; ++g) segs[g] = {g * P, P, false};
        out.E = mean_pool_groups(t, le_stack.forward(t, x, segs, {}), P);
    }

    // TSLM sequence: per utterance [BOS, t_1..t_N, a_1..a_M]
    std::vector<int> seq_start(U), patch_base(U), text_rows(U);
    std::vector<TPtr> parts;
    std::vector<Seg> segs;
    std::vector<int> pos;
    auto bos_leaf = t.leaf(audio_bos);
    int S = 0, B = 0;
    for (int u = 0; u < U; ++u) {
        const int N = static_cast<int>(b.tokens[u].size());
        const int M = b.patch_counts[u];
        seq_start[u] = S;
        patch_base[u] = B;
        text_rows[u] = 1 + N;
        std::vector<int> ids;
        ids.reserve(1 + N);
        ids.push_back(TOK_BOS);
        for (int x : b.tokens[u]) ids.push_back(x);
        parts.push_back(embedding(t, t.leaf(tok_emb), ids));
        parts.push_back(bos_leaf);
        if (M > 1) parts.push_back(slice_rows(t, out.E, B, M - 1));
        const int L = 1 + N + M;
        segs.push_back({S, L, true});
        for (int i = 0; i < L; ++i) pos.push_back(i);
        S += L;
        B += M;
    }
    auto x = concat_rows(t, parts);
    auto h = tslm_stack.forward(t, x, segs, pos);

    std::vector<int> audio_rows(sumM);
    for (int u = 0; u < U; ++u)
        for (int j = 0; j < b.patch_counts[u]; ++j)
            audio_rows[patch_base[u] + j] = seq_start[u] + text_rows[u] + j;
    out.h_audio = gather_rows(t, h, audio_rows);

    auto skel = fsq.forward(t, out.h_audio);
    out.pre_q = skel.pre_q;
    out.lattice_vec = skel.lattice_vec;
    out.up = skel.up;

    // stop head on the up-projected skeleton
    {
        auto s1 = silu(t, linear(t, out.up, t.leaf(st1_w), t.leaf(st1_b)));
        auto s2 = silu(t, linear(t, s1, t.leaf(st2_w), t.leaf(st2_b)));
        out.stop_logits = linear(t, s2, t.leaf(st3_w), t.leaf(st3_b));
    }

    if (has_ralm()) {
        // fused audio-slot inputs: concat(up_j, E_{j-1}) -> affine to model dim
        std::vector<TPtr> fparts;
        for (int u = 0; u < U; ++u) {
            const int M = b.patch_counts[u];
            auto up_u = slice_rows(t, out.up, patch_base[u], M);
            TPtr eprev;
            if (variant == Variant::no_acoustic_input) {
                eprev = repeat_row(t, t.leaf(null_acoustic), M);
            } else if (M > 1) {
                eprev = concat_rows(t, {bos_leaf, slice_rows(t, out.E, patch_base[u], M - 1)});
            } else {
                eprev = bos_leaf;
            }
            fparts.push_back(concat_cols(t, up_u, eprev));
        }
        auto fused = linear(t, concat_rows(t, fparts), t.leaf(fuse_w), t.leaf(fuse_b));
        std::vector<TPtr> rparts;
        std::vector<Seg> rsegs;
        std::vector<int> rpos, res_rows(sumM);
        int RS = 0;
        for (int u = 0; u < U; ++u) {
            const int M = b.patch_counts[u];
            rparts.push_back(slice_rows(t, h, seq_start[u], text_rows[u]));
            rparts.push_back(slice_rows(t, fused, patch_base[u], M));
            const int L = text_rows[u] + M;
            rsegs.push_back({RS, L, true});
            for (int i = 0; i < L; ++i) rpos.push_back(i);
            for (int j = 0; j < M; ++j) res_rows[patch_base[u] + j] = RS + text_rows[u] + j;
            RS += L;
        }
        auto rh = ralm_stack.forward(t, concat_rows(t, rparts), rsegs, rpos);
        out.h_residual = gather_rows(t, rh, res_rows);
        out.h_final = add(t, out.up, out.h_residual);
    } else {
        out.h_residual = nullptr;
        out.h_final = out.up;
    }
    out.cond = (variant == Variant::skeleton_only) ? out.up : out.h_final;
    return out;
}

// ---- raw helpers -----------------------------------------------------------------

void Backbone::locenc_raw(const float* patch, float* out) const {
    const int d = cfg.model_dim, P = cfg.patch_size;
    std::vector<float> rows(static_cast<std::size_t>(P) * d);
    kern::gemm_colB(patch, le_lift_w->wcm.data(), rows.data(), P, cfg.latent_dim, d,
                    le_lift_b->w.data());
    for (int r = 0; r < P; ++r) {
        const float* e = &le_pos->w[static_cast<std::int64_t>(r) * d];
        float* x = &rows[static_cast<std::int64_t>(r) * d];
        for (int c = 0; c < d; ++c) x[c] += e[c];
    }
    RawStack rs{&le_stack, d};
    rs.run_bidir(rows.data(), P);
    const float invP = 1.0f / static_cast<float>(P);
    for (int c = 0; c < d; ++c) out[c] = 0.f;
    for (int r = 0; r < P; ++r) {
        const float* x = &rows[static_cast<std::int64_t>(r) * d];
        for (int c = 0; c < d; ++c) out[c] += x[c];
    }
    for (int c = 0; c < d; ++c) out[c] *= invP;
}

float Backbone::stop_raw(const float* up) const {
    const int d = cfg.model_dim, sh = cfg.stop_mlp_dim();
    std::vector<float> a(sh), b2(sh);
    kern::gemm_colB(up, st1_w->wcm.data(), a.data(), 1, d, sh, st1_b->w.data());
    kern::silu(a.data(), a.data(), sh);
    kern::gemm_colB(a.data(), st2_w->wcm.data(), b2.data(), 1, sh, sh, st2_b->w.data());
    kern::silu(b2.data(), b2.data(), sh);
    float logit;
    kern::gemm_colB(b2.data(), st3_w->wcm.data(), &logit, 1, sh, 1, st3_b->w.data());
    return logit;
}

void Backbone::ralm_fuse_raw(const float* up, const float* e_prev, float* out) const {
    const int d = cfg.model_dim;
    std::vector<float> in(2 * static_cast<std::size_t>(d));
    std::memcpy(in.data(), up, d * sizeof(float));
    std::memcpy(in.data() + d, e_prev, d * sizeof(float));
    kern::gemm_colB(in.data(), fuse_w->wcm.data(), out, 1, 2 * d, d, fuse_b->w.data());
}

} // namespace patchflow
