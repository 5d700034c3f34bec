#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "doctest.h"
#include "patchflow/kernels.hpp"
#include "patchflow/params.hpp"
#include "patchflow/tensor.hpp"

using namespace patchflow;

namespace {

// Central-difference gradient checker. Every input under test is a Param so
// Tape::sync_param_grads carries the analytic grads; the builder must be a
// pure function of the store contents.
struct GradCheck {
    ParamStore store;
    Rng rng = Rng::for_stream(42, 0);
    std::vector<ParamPtr> params;

    ParamPtr add(const std::string& n, int r, int c, bool shadow = false, float s = 0.5f) {
        auto p = store.create(n, r, c, ParamInit{ParamInit::normal, s}, rng, shadow);
        params.push_back(p);
        return p;
    }

    void run(const std::function<TPtr(Tape&)>& build, float eps = 1e-2f, double tol = 5e-3) {
        Tape t;
        TPtr loss = build(t);
        REQUIRE(loss->rows == 1);
        REQUIRE(loss->cols == 1);
        t.backward(loss);
        store.zero_grad();
        t.sync_param_grads();
        for (auto& p : params) {
            for (std::int64_t i = 0; i < p->size(); ++i) {
                const float w0 = p->w[i];
                p->w[i] = w0 + eps;
                p->refresh();
                Tape tp;
                const double lp = build(tp)->item();
                p->w[i] = w0 - eps;
                p->refresh();
                Tape tm;
                const double lm = build(tm)->item();
                p->w[i] = w0;
                p->refresh();
                const double num = (lp - lm) / (2.0 * double(eps));
                const double ana = p->g[i];
                const double err = std::abs(ana - num);
                const double lim = tol * (1.0 + std::max(std::abs(ana), std::abs(num)));
                if (err > lim) {
                    CAPTURE(p->name);
                    CAPTURE(i);
                    CAPTURE(ana);
                    CAPTURE(num);
                }
                CHECK(err <= lim);
            }
        }
    }
};

std::vector<float> randv(Rng& r, int n, float s = 1.f) {
    std::vector<float> v(n);
    for (auto& x : v) x = s * r.normalf();
    return v;
}

} // namespace

TEST_CASE("arithmetic ops: forward semantics and gradients") {
    GradCheck gc;
    auto a = gc.add("a", 3, 4);
    auto b = gc.add("b", 3, 4);
    Rng r = Rng::for_stream(1, 1);
    auto wts = randv(r, 12);
    gc.run([&](Tape& t) {
        TPtr x = add_scaled(t, mul(t, t.leaf(a), t.leaf(b)), scale(t, t.leaf(a), 0.7f), 1.5f);
        return sum_weighted(t, x, t.constant(3, 4, wts.data()));
    });

    Tape t;
    TPtr s = add(t, t.leaf(a), t.leaf(b));
    for (int i = 0; i < 12; ++i) CHECK(s->v[i] == a->w[i] + b->w[i]);
}

TEST_CASE("linear matches gemm and is differentiable in x, w, b") {
    GradCheck gc;
    auto x = gc.add("x", 3, 5);
    auto w = gc.add("w", 5, 4, /*shadow=*/true);
    auto b = gc.add("b", 1, 4);
    Rng r = Rng::for_stream(2, 1);
    auto wts = randv(r, 12);
    gc.run([&](Tape& t) {
        return sum_weighted(t, linear(t, t.leaf(x), t.leaf(w), t.leaf(b)),
                            t.constant(3, 4, wts.data()));
    });

    Tape t;
    TPtr y = linear(t, t.leaf(x), t.leaf(w), t.leaf(b));
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) {
            double ref = b->w[j];
            for (int k = 0; k < 5; ++k) ref += double(x->w[i * 5 + k]) * w->w[k * 4 + j];
            CHECK(y->v[i * 4 + j] == doctest::Approx(ref).epsilon(1e-5));
        }
}

TEST_CASE("embedding accumulates gradients on repeated ids") {
    GradCheck gc;
    auto tbl = gc.add("tbl", 6, 3);
    std::vector<int> ids = {1, 4, 1, 0};
    Rng r = Rng::for_stream(3, 1);
    auto wts = randv(r, 12);
    gc.run([&](Tape& t) {
        return sum_weighted(t, embedding(t, t.leaf(tbl), ids), t.constant(4, 3, wts.data()));
    });

    Tape t;
    TPtr e = embedding(t, t.leaf(tbl), ids);
    CHECK(e->rows == 4);
    for (int c = 0; c < 3; ++c) {
        CHECK(e->v[0 * 3 + c] == tbl->w[1 * 3 + c]);
        CHECK(e->v[2 * 3 + c] == tbl->w[1 * 3 + c]);
    }
}

TEST_CASE("row/col structural ops route values and gradients") {
    GradCheck gc;
    auto a = gc.add("a", 4, 3);
    auto b = gc.add("b", 2, 3);
    Rng r = Rng::for_stream(4, 1);

    // concat_rows + slice_rows + gather_rows
    {
        Tape t;
        TPtr cat = concat_rows(t, {t.leaf(a), t.leaf(b)});
        CHECK(cat->rows == 6);
        CHECK(std::memcmp(cat->v.data(), a->w.data(), 12 * 4) == 0);
        CHECK(std::memcmp(cat->v.data() + 12, b->w.data(), 6 * 4) == 0);
        TPtr sl = slice_rows(t, cat, 3, 2);
        CHECK(std::memcmp(sl->v.data(), &cat->v[9], 6 * 4) == 0);
        TPtr gt = gather_rows(t, cat, {5, 0});
        CHECK(std::memcmp(gt->v.data(), &cat->v[15], 3 * 4) == 0);
        CHECK(std::memcmp(gt->v.data() + 3, cat->v.data(), 3 * 4) == 0);
    }
    auto wts = randv(r, 6);
    gc.run([&](Tape& t) {
        TPtr cat = concat_rows(t, {t.leaf(a), t.leaf(b)});
        TPtr gt = gather_rows(t, cat, {5, 1});
        return sum_weighted(t, gt, t.constant(2, 3, wts.data()));
    });

    // concat_cols + slice_cols
    GradCheck gc2;
    auto c = gc2.add("c", 3, 2);
    auto d = gc2.add("d", 3, 4);
    auto wts2 = randv(r, 9);
    gc2.run([&](Tape& t) {
        TPtr cc = concat_cols(t, t.leaf(c), t.leaf(d));
        TPtr sc = slice_cols(t, cc, 1, 3);
        return sum_weighted(t, sc, t.constant(3, 3, wts2.data()));
    });
    {
        Tape t;
        TPtr cc = concat_cols(t, t.leaf(c), t.leaf(d));
        CHECK(cc->cols == 6);
        CHECK(cc->v[0 * 6 + 0] == c->w[0]);
        CHECK(cc->v[0 * 6 + 2] == d->w[0]);
        CHECK(cc->v[2 * 6 + 5] == d->w[2 * 4 + 3]);
    }
}

TEST_CASE("tile_add, repeat_row, row_mix, group_tail") {
    GradCheck gc;
    auto x = gc.add("x", 6, 3); // two groups of three rows
    auto e = gc.add("e", 3, 3);
    auto sub = gc.add("sub", 1, 3);
    std::vector<std::uint8_t> mask = {0, 1, 0, 1, 1, 0};
    Rng r = Rng::for_stream(5, 1);
    auto w18 = randv(r, 18);
    auto w4x3 = randv(r, 12);
    gc.run([&](Tape& t) {
        TPtr y = tile_add(t, t.leaf(x), t.leaf(e), 3);
        TPtr m = row_mix(t, y, t.leaf(sub), mask);
        TPtr tail = group_tail(t, m, 3, 2); // last 2 rows of each 3-row group
        TPtr rep = repeat_row(t, t.leaf(sub), 4);
        return add(t, sum_weighted(t, tail, t.constant(4, 3, w4x3.data())),
                   sum_weighted(t, rep, t.constant(4, 3, w4x3.data())));
    });

    Tape t;
    TPtr y = tile_add(t, t.leaf(x), t.leaf(e), 3);
    CHECK(y->v[4 * 3 + 2] == x->w[4 * 3 + 2] + e->w[1 * 3 + 2]);
    TPtr m = row_mix(t, y, t.leaf(sub), mask);
    CHECK(std::memcmp(&m->v[0], &y->v[0], 3 * 4) == 0);          // unmasked row
    CHECK(std::memcmp(&m->v[3], sub->w.data(), 3 * 4) == 0);     // masked row
    TPtr tail = group_tail(t, m, 3, 2);
    CHECK(tail->rows == 4);
    CHECK(std::memcmp(tail->v.data(), &m->v[3], 6 * 4) == 0);    // rows 1,2
    CHECK(std::memcmp(tail->v.data() + 6, &m->v[12], 6 * 4) == 0); // rows 4,5
}

TEST_CASE("pointwise nonlinearities differentiate") {
    GradCheck gc;
    auto x = gc.add("x", 2, 5);
    Rng r = Rng::for_stream(6, 1);
    auto wts = randv(r, 10);
    gc.run([&](Tape& t) {
        TPtr y = silu(t, t.leaf(x));
        y = add(t, y, tanh_op(t, t.leaf(x)));
        y = add(t, y, sigmoid_op(t, t.leaf(x)));
        return sum_weighted(t, y, t.constant(2, 5, wts.data()));
    });
}

TEST_CASE("rmsnorm matches the kernel and differentiates") {
    GradCheck gc;
    auto x = gc.add("x", 3, 6);
    auto w = gc.add("w", 1, 6);
    Rng r = Rng::for_stream(7, 1);
    auto wts = randv(r, 18);
    gc.run([&](Tape& t) {
        return sum_weighted(t, rmsnorm(t, t.leaf(x), t.leaf(w)), t.constant(3, 6, wts.data()));
    }, 1e-2f, 8e-3);

    Tape t;
    TPtr y = rmsnorm(t, t.leaf(x), t.leaf(w));
    std::vector<float> row(6);
    kern::rmsnorm_row(&x->w[6], w->w.data(), row.data(), 6, 1e-6f);
    CHECK(std::memcmp(&y->v[6], row.data(), 6 * 4) == 0);
}

TEST_CASE("rope forward equals the row kernel and differentiates") {
    GradCheck gc;
    auto x = gc.add("x", 3, 8);
    std::vector<int> pos = {0, 5, 2};
    Rng r = Rng::for_stream(8, 1);
    auto wts = randv(r, 24);
    gc.run([&](Tape& t) {
        return sum_weighted(t, rope(t, t.leaf(x), pos, 2), t.constant(3, 8, wts.data()));
    });

    Tape t;
    TPtr y = rope(t, t.leaf(x), pos, 2);
    for (int i = 0; i < 3; ++i) {
        std::vector<float> row(x->w.begin() + i * 8, x->w.begin() + (i + 1) * 8);
        kern::rope_row(row.data(), pos[i], 2, 4);
        CHECK(std::memcmp(&y->v[i * 8], row.data(), 8 * 4) == 0);
    }
}

TEST_CASE("attention: causal masking is exact and gradients check out") {
    const int n = 5, heads = 2, dim = 8;
    Rng r = Rng::for_stream(9, 1);
    auto qv = randv(r, n * dim), kv = randv(r, n * dim), vv = randv(r, n * dim);
    std::vector<Seg> causal = {{0, n, true}};

    auto fwd = [&](const std::vector<float>& kq) {
        Tape t;
        TPtr o = attention(t, t.constant(n, dim, kq.data()), t.constant(n, dim, kv.data()),
                           t.constant(n, dim, vv.data()), causal, heads);
        return o->v;
    };
    auto base = fwd(qv);
    auto pert = qv;
    pert[3 * dim + 1] += 10.f; // row 3 query changes
    auto out2 = fwd(pert);
    CHECK(std::memcmp(base.data(), out2.data(), 3 * dim * 4) == 0); // rows 0..2 untouched
    CHECK(std::memcmp(&base[3 * dim], &out2[3 * dim], dim * 4) != 0);

    // a later key/value must not leak backward in a causal segment
    auto kv2 = kv;
    kv2[4 * dim] += 3.f;
    {
        Tape t;
        TPtr o = attention(t, t.constant(n, dim, qv.data()), t.constant(n, dim, kv2.data()),
                           t.constant(n, dim, vv.data()), causal, heads);
        CHECK(std::memcmp(base.data(), o->v.data(), 4 * dim * 4) == 0);
    }

    // two segments never interact
    std::vector<Seg> segs = {{0, 2, false}, {2, 3, false}};
    auto fwd_segs = [&](const std::vector<float>& vvv) {
        Tape t;
        TPtr o = attention(t, t.constant(n, dim, qv.data()), t.constant(n, dim, kv.data()),
                           t.constant(n, dim, vvv.data()), segs, heads);
        return o->v;
    };
    auto b2 = fwd_segs(vv);
    auto vv2 = vv;
    vv2[4 * dim + 3] += 2.f; // second segment value
    auto p2 = fwd_segs(vv2);
    CHECK(std::memcmp(b2.data(), p2.data(), 2 * dim * 4) == 0);

    GradCheck gc;
    auto q = gc.add("q", 4, 4);
    auto k = gc.add("k", 4, 4);
    auto v = gc.add("v", 4, 4);
    std::vector<Seg> cs = {{0, 4, true}};
    auto wts = randv(r, 16);
    gc.run([&](Tape& t) {
        TPtr o = attention(t, t.leaf(q), t.leaf(k), t.leaf(v), cs, 1);
        return sum_weighted(t, o, t.constant(4, 4, wts.data()));
    }, 1e-2f, 1e-2);
}

TEST_CASE("fsq_quantize snaps forward and passes gradients straight through") {
    GradCheck gc;
    auto x = gc.add("x", 2, 6);
    Rng r = Rng::for_stream(10, 1);
    auto wts = randv(r, 12);
    Tape t;
    TPtr y = fsq_quantize(t, t.leaf(x), 0.25f, 4);
    std::vector<float> ref(12);
    kern::fsq_apply(x->w.data(), ref.data(), 12, 0.25f, 4);
    CHECK(std::memcmp(y->v.data(), ref.data(), 12 * 4) == 0);

    TPtr loss = sum_weighted(t, y, t.constant(2, 6, wts.data()));
    t.backward(loss);
    gc.store.zero_grad();
    t.sync_param_grads();
    for (int i = 0; i < 12; ++i) CHECK(x->g[i] == wts[i]); // exact passthrough
}

TEST_CASE("mean_pool_groups, group_mod, group_gate") {
    GradCheck gc;
    auto x = gc.add("x", 6, 3);
    auto scl = gc.add("scl", 2, 3);
    auto shf = gc.add("shf", 2, 3);
    Rng r = Rng::for_stream(11, 1);
    auto w6 = randv(r, 6);
    auto w18 = randv(r, 18);
    gc.run([&](Tape& t) {
        TPtr m = mean_pool_groups(t, t.leaf(x), 3);
        TPtr gm = group_mod(t, t.leaf(x), t.leaf(scl), t.leaf(shf), 3);
        TPtr gg = group_gate(t, gm, t.leaf(scl), 3);
        return add(t, sum_weighted(t, m, t.constant(2, 3, w6.data())),
                   sum_weighted(t, gg, t.constant(6, 3, w18.data())));
    });

    Tape t;
    TPtr m = mean_pool_groups(t, t.leaf(x), 3);
    for (int c = 0; c < 3; ++c) {
        const float ref = (x->w[0 + c] + x->w[3 + c] + x->w[6 + c]) * (1.0f / 3.0f);
        CHECK(m->v[c] == doctest::Approx(ref).epsilon(1e-6));
    }
    TPtr gm = group_mod(t, t.leaf(x), t.leaf(scl), t.leaf(shf), 3);
    CHECK(gm->v[4 * 3 + 1] ==
          doctest::Approx(x->w[4 * 3 + 1] * (1.f + scl->w[1 * 3 + 1]) + shf->w[1 * 3 + 1])
              .epsilon(1e-6));
    TPtr gg = group_gate(t, t.leaf(x), t.leaf(scl), 3);
    CHECK(gg->v[5 * 3 + 2] == doctest::Approx(x->w[5 * 3 + 2] * scl->w[1 * 3 + 2]).epsilon(1e-6));
}

TEST_CASE("mse_masked: value, gradient, and dead masked entries") {
    GradCheck gc;
    auto pred = gc.add("pred", 4, 3);
    Rng r = Rng::for_stream(12, 1);
    auto target = randv(r, 12);
    std::vector<float> mask = {1.f, 1.f, 0.f, 1.f}; // [4,1]
    gc.run([&](Tape& t) {
        return mse_masked(t, t.leaf(pred), t.constant(4, 3, target.data()),
                          t.constant(4, 1, mask.data()));
    });

    Tape t;
    TPtr l = mse_masked(t, t.leaf(pred), t.constant(4, 3, target.data()),
                        t.constant(4, 1, mask.data()));
    double ref = 0;
    for (int i = 0; i < 4; ++i)
        for (int c = 0; c < 3; ++c) {
            const double d = double(pred->w[i * 3 + c]) - target[i * 3 + c];
            ref += d * d * mask[i];
        }
    ref /= 9.0; // sum(mask) * cols = 3 rows * 3 cols
    CHECK(l->item() == doctest::Approx(ref).epsilon(1e-5));

    t.backward(l);
    gc.store.zero_grad();
    t.sync_param_grads();
    for (int c = 0; c < 3; ++c) CHECK(pred->g[2 * 3 + c] == 0.f);
    CHECK(pred->g[0] != 0.f);
}

TEST_CASE("bce_logits_mean matches the log-loss formula") {
    GradCheck gc;
    auto logits = gc.add("lg", 5, 1);
    std::vector<float> labels = {1.f, 0.f, 1.f, 0.f, 1.f};
    gc.run([&](Tape& t) {
        return bce_logits_mean(t, t.leaf(logits), t.constant(5, 1, labels.data()));
    });

    Tape t;
    TPtr l = bce_logits_mean(t, t.leaf(logits), t.constant(5, 1, labels.data()));
    double ref = 0;
    for (int i = 0; i < 5; ++i) {
        const double p = 1.0 / (1.0 + std::exp(-double(logits->w[i])));
        ref += labels[i] ? -std::log(p) : -std::log(1.0 - p);
    }
    CHECK(l->item() == doctest::Approx(ref / 5.0).epsilon(1e-4));
}

TEST_CASE("gaussian reparameterization and KL differentiate") {
    GradCheck gc;
    auto mean = gc.add("mean", 3, 4);
    auto logvar = gc.add("logvar", 3, 4, false, 0.3f);
    Rng r = Rng::for_stream(13, 1);
    auto eps = randv(r, 12);
    auto wts = randv(r, 12);
    gc.run([&](Tape& t) {
        TPtr z = gauss_reparam(t, t.leaf(mean), t.leaf(logvar), t.constant(3, 4, eps.data()));
        TPtr kl = kl_std_normal(t, t.leaf(mean), t.leaf(logvar));
        return add(t, sum_weighted(t, z, t.constant(3, 4, wts.data())), kl);
    });

    Tape t;
    TPtr z = gauss_reparam(t, t.leaf(mean), t.leaf(logvar), t.constant(3, 4, eps.data()));
    CHECK(z->v[5] == doctest::Approx(mean->w[5] +
                                     std::exp(0.5 * logvar->w[5]) * eps[5]).epsilon(1e-5));
    TPtr kl = kl_std_normal(t, t.leaf(mean), t.leaf(logvar));
    double ref = 0;
    for (int i = 0; i < 12; ++i)
        ref += -0.5 * (1.0 + logvar->w[i] - double(mean->w[i]) * mean->w[i] -
                       std::exp(double(logvar->w[i])));
    CHECK(kl->item() == doctest::Approx(ref / 3.0).epsilon(1e-4)); // per-row mean
}

TEST_CASE("conv1d_causal: naive oracle, causality, gradients") {
    const int T = 11, K = 4, Cin = 2, Cout = 3, stride = 2;
    const int To = (T + stride - 1) / stride;
    Rng r = Rng::for_stream(14, 1);
    auto xv = randv(r, T * Cin), wv = randv(r, K * Cin * Cout), bv = randv(r, Cout);

    auto fwd = [&](const std::vector<float>& xx) {
        Tape t;
        TPtr o = conv1d_causal(t, t.constant(T, Cin, xx.data()),
                               t.constant(K * Cin, Cout, wv.data()),
                               t.constant(1, Cout, bv.data()), K, Cin, Cout, stride);
        return o->v;
    };
    auto out = fwd(xv);
    REQUIRE((int)out.size() == To * Cout);
    for (int to = 0; to < To; ++to)
        for (int co = 0; co < Cout; ++co) {
            double ref = bv[co];
            for (int kk = 0; kk < K; ++kk) {
                const int i = to * stride + kk - (K - 1);
                if (i < 0 || i >= T) continue;
                for (int ci = 0; ci < Cin; ++ci)
                    ref += double(xv[i * Cin + ci]) * wv[(kk * Cin + ci) * Cout + co];
            }
            CHECK(out[to * Cout + co] == doctest::Approx(ref).epsilon(1e-4));
        }

    // output n depends only on inputs <= n*stride
    auto xp = xv;
    xp[7 * Cin] += 5.f; // first affected output: ceil((7+1)/2)-1... check directly
    auto out2 = fwd(xp);
    for (int to = 0; to < To; ++to) {
        const bool sees = to * stride >= 7;
        const bool same = std::memcmp(&out[to * Cout], &out2[to * Cout], Cout * 4) == 0;
        CHECK(same == !sees);
    }

    GradCheck gc;
    auto x = gc.add("x", 7, 2);
    auto w = gc.add("w", 3 * 2, 2, /*shadow=*/true);
    auto b = gc.add("b", 1, 2);
    auto wts = randv(r, 4 * 2);
    gc.run([&](Tape& t) {
        TPtr o = conv1d_causal(t, t.leaf(x), t.leaf(w), t.leaf(b), 3, 2, 2, 2);
        return sum_weighted(t, o, t.constant(4, 2, wts.data()));
    });
}

TEST_CASE("tconv1d_causal: naive oracle and gradients") {
    const int T = 5, K = 4, Cin = 2, Cout = 3, stride = 2;
    Rng r = Rng::for_stream(15, 1);
    auto xv = randv(r, T * Cin), wv = randv(r, Cin * K * Cout), bv = randv(r, Cout);
    Tape t;
    TPtr o = tconv1d_causal(t, t.constant(T, Cin, xv.data()),
                            t.constant(Cin, K * Cout, wv.data()),
                            t.constant(1, Cout, bv.data()), K, Cin, Cout, stride);
    REQUIRE(o->rows == T * stride);
    for (int ty = 0; ty < T * stride; ++ty)
        for (int co = 0; co < Cout; ++co) {
            double ref = bv[co];
            for (int tt = 0; tt < T; ++tt) {
                const int kk = ty - tt * stride;
                if (kk < 0 || kk >= K) continue;
                for (int ci = 0; ci < Cin; ++ci)
                    ref += double(xv[tt * Cin + ci]) * wv[ci * K * Cout + kk * Cout + co];
            }
            CHECK(o->v[ty * Cout + co] == doctest::Approx(ref).epsilon(1e-4));
        }

    GradCheck gc;
    auto x = gc.add("x", 4, 2);
    auto w = gc.add("w", 2, 3 * 2, /*shadow=*/true);
    auto b = gc.add("b", 1, 2);
    auto wts = randv(r, 8 * 2);
    gc.run([&](Tape& t2) {
        TPtr y = tconv1d_causal(t2, t2.leaf(x), t2.leaf(w), t2.leaf(b), 3, 2, 2, 2);
        return sum_weighted(t2, y, t2.constant(8, 2, wts.data()));
    });
}

TEST_CASE("backward composes through a small two-layer network") {
    GradCheck gc;
    auto x = gc.add("x", 2, 4);
    auto w1 = gc.add("w1", 4, 6, true);
    auto b1 = gc.add("b1", 1, 6);
    auto w2 = gc.add("w2", 6, 3, true);
    auto nw = gc.add("nw", 1, 6);
    Rng r = Rng::for_stream(16, 1);
    auto tgt = randv(r, 6);
    std::vector<float> mask = {1.f, 1.f};
    gc.run([&](Tape& t) {
        TPtr h = silu(t, linear(t, t.leaf(x), t.leaf(w1), t.leaf(b1)));
        h = rmsnorm(t, h, t.leaf(nw));
        TPtr y = linear(t, h, t.leaf(w2), nullptr);
        return mse_masked(t, y, t.constant(2, 3, tgt.data()), t.constant(2, 1, mask.data()));
    }, 1e-2f, 1e-2);
}
