#include "patchflow/tensor.hpp"

#include <cassert>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "patchflow/kernels.hpp"
#include "patchflow/params.hpp"

namespace patchflow {

Tape::~Tape() {
    // the backward closures capture their own node (and their inputs) by
    // shared_ptr; drop them so the graph doesn't keep itself alive
    for (auto& n : order_) n->back = nullptr;
}

TPtr Tape::make(int rows, int cols, bool needs_grad) {
    auto n = std::make_shared<Tensor>();
    n->rows = rows;
    n->cols = cols;
    n->v.resize(n->size());
    n->needs_grad = needs_grad;
    order_.push_back(n);
    return n;
}

TPtr Tape::leaf(const std::shared_ptr<Param>& p) {
    auto it = leaf_cache_.find(p.get());
    if (it != leaf_cache_.end()) return it->second;
    auto n = make(p->rows, p->cols, true);
    n->v = p->w;
    n->param = p.get();
    leaf_cache_[p.get()] = n;
    return n;
}

TPtr Tape::constant(int rows, int cols, const float* data) {
    auto n = make(rows, cols, false);
    std::memcpy(n->v.data(), data, n->size() * sizeof(float));
    return n;
}

TPtr Tape::constant(int rows, int cols, std::vector<float>&& data) {
    assert(static_cast<std::int64_t>(data.size()) ==
           static_cast<std::int64_t>(rows) * cols);
    auto n = make(rows, cols, false);
    n->v = std::move(data);
    return n;
}

TPtr Tape::zeros(int rows, int cols, bool needs_grad) {
    return make(rows, cols, needs_grad); // make() value-initializes
}

void Tape::backward(const TPtr& loss) {
    if (loss->rows != 1 || loss->cols != 1)
        throw std::runtime_error("backward: loss must be a scalar");
    loss->g.assign(1, 1.f);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        Tensor* n = it->get();
        if (!n->back || !n->needs_grad || n->g.empty()) continue;
        n->back();
    }
}

void Tape::sync_param_grads() {
    for (auto& [p, n] : leaf_cache_) {
        if (n->g.empty()) continue;
        Param* prm = const_cast<Param*>(p);
        for (std::int64_t i = 0; i < n->size(); ++i) prm->g[i] += n->g[i];
    }
}

// ---- elementwise -------------------------------------------------------

static void check_same_shape(const TPtr& a, const TPtr& b, const char* op) {
    if (a->rows != b->rows || a->cols != b->cols)
        throw std::runtime_error(std::string(op) + ": shape mismatch");
}

TPtr add(Tape& t, const TPtr& a, const TPtr& b) { return add_scaled(t, a, b, 1.f); }

TPtr add_scaled(Tape& t, const TPtr& a, const TPtr& b, float alpha) {
    check_same_shape(a, b, "add");
    auto out = t.make(a->rows, a->cols, a->needs_grad || b->needs_grad);
    const std::int64_t n = out->size();
    for (std::int64_t i = 0; i < n; ++i) out->v[i] = a->v[i] + alpha * b->v[i];
    if (out->needs_grad)
        out->back = [out, a, b, alpha, n] {
            if (a->needs_grad) {
                a->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) a->g[i] += out->g[i];
            }
            if (b->needs_grad) {
                b->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) b->g[i] += alpha * out->g[i];
            }
        };
    return out;
}

TPtr mul(Tape& t, const TPtr& a, const TPtr& b) {
    check_same_shape(a, b, "mul");
    auto out = t.make(a->rows, a->cols, a->needs_grad || b->needs_grad);
    const std::int64_t n = out->size();
    for (std::int64_t i = 0; i < n; ++i) out->v[i] = a->v[i] * b->v[i];
    if (out->needs_grad)
        out->back = [out, a, b, n] {
            if (a->needs_grad) {
                a->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) a->g[i] += out->g[i] * b->v[i];
            }
            if (b->needs_grad) {
                b->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) b->g[i] += out->g[i] * a->v[i];
            }
        };
    return out;
}

TPtr scale(Tape& t, const TPtr& a, float c) {
    auto out = t.make(a->rows, a->cols, a->needs_grad);
    const std::int64_t n = out->size();
    for (std::int64_t i = 0; i < n; ++i) out->v[i] = c * a->v[i];
    if (out->needs_grad)
        out->back = [out, a, c, n] {
            a->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) a->g[i] += c * out->g[i];
        };
    return out;
}

// ---- linear ------------------------------------------------------------

TPtr linear(Tape& t, const TPtr& x, const TPtr& w, const TPtr& b) {
    const int M = x->rows, K = x->cols, N = w->cols;
    if (w->rows != K) throw std::runtime_error("linear: inner dim mismatch");
    if (b && (b->rows != 1 || b->cols != N))
        throw std::runtime_error("linear: bias shape mismatch");
    auto out = t.make(M, N, x->needs_grad || w->needs_grad || (b && b->needs_grad));
    const float* wcm = nullptr;
    std::vector<float> tmp;
    if (w->param && w->param->shadow) {
        wcm = w->param->wcm.data();
    } else {
        tmp.resize(w->size());
        for (int i = 0; i < K; ++i)
            for (int j = 0; j < N; ++j)
                tmp[static_cast<std::int64_t>(j) * K + i] = w->v[static_cast<std::int64_t>(i) * N + j];
        wcm = tmp.data();
    }
    kern::gemm_colB(x->v.data(), wcm, out->v.data(), M, K, N, b ? b->v.data() : nullptr);
    if (out->needs_grad)
        out->back = [out, x, w, b, M, K, N] {
            if (x->needs_grad) {
                x->ensure_grad();
                kern::gemm_rowBT(out->g.data(), w->v.data(), x->g.data(), M, N, K, true);
            }
            if (w->needs_grad) {
                w->ensure_grad();
                kern::accum_outer(x->v.data(), out->g.data(), w->g.data(), M, K, N);
            }
            if (b && b->needs_grad) {
                b->ensure_grad();
                kern::accum_colsum(out->g.data(), b->g.data(), M, N);
            }
        };
    return out;
}

// ---- reshuffles ----------------------------------------------------------

TPtr embedding(Tape& t, const TPtr& table, const std::vector<int>& ids) {
    const int R = static_cast<int>(ids.size()), C = table->cols;
    auto out = t.make(R, C, table->needs_grad);
    for (int i = 0; i < R; ++i) {
        if (ids[i] < 0 || ids[i] >= table->rows)
            throw std::runtime_error("embedding: id out of range");
        std::memcpy(&out->v[static_cast<std::int64_t>(i) * C],
                    &table->v[static_cast<std::int64_t>(ids[i]) * C], C * sizeof(float));
    }
    if (out->needs_grad)
        out->back = [out, table, ids, R, C] {
            table->ensure_grad();
            for (int i = 0; i < R; ++i) {
                float* gt = &table->g[static_cast<std::int64_t>(ids[i]) * C];
                const float* go = &out->g[static_cast<std::int64_t>(i) * C];
                for (int c = 0; c < C; ++c) gt[c] += go[c];
            }
        };
    return out;
}

TPtr concat_rows(Tape& t, const std::vector<TPtr>& parts) {
    if (parts.empty()) throw std::runtime_error("concat_rows: empty");
    const int C = parts[0]->cols;
    int R = 0;
    bool ng = false;
    for (auto& p : parts) {
        if (p->cols != C) throw std::runtime_error("concat_rows: col mismatch");
        R += p->rows;
        ng = ng || p->needs_grad;
    }
    auto out = t.make(R, C, ng);
    int r = 0;
    for (auto& p : parts) {
        std::memcpy(&out->v[static_cast<std::int64_t>(r) * C], p->v.data(),
                    p->size() * sizeof(float));
        r += p->rows;
    }
    if (ng)
        out->back = [out, parts, C] {
            int r = 0;
            for (auto& p : parts) {
                if (p->needs_grad) {
                    p->ensure_grad();
                    const float* go = &out->g[static_cast<std::int64_t>(r) * C];
                    for (std::int64_t i = 0; i < p->size(); ++i) p->g[i] += go[i];
                }
                r += p->rows;
            }
        };
    return out;
}

TPtr slice_rows(Tape& t, const TPtr& x, int r0, int n) {
    if (r0 < 0 || r0 + n > x->rows) throw std::runtime_error("slice_rows: out of range");
    const int C = x->cols;
    auto out = t.make(n, C, x->needs_grad);
    std::memcpy(out->v.data(), &x->v[static_cast<std::int64_t>(r0) * C],
                out->size() * sizeof(float));
    if (out->needs_grad)
        out->back = [out, x, r0, C] {
            x->ensure_grad();
            float* gx = &x->g[static_cast<std::int64_t>(r0) * C];
            for (std::int64_t i = 0; i < out->size(); ++i) gx[i] += out->g[i];
        };
    return out;
}

TPtr gather_rows(Tape& t, const TPtr& x, const std::vector<int>& idx) {
    const int R = static_cast<int>(idx.size()), C = x->cols;
    auto out = t.make(R, C, x->needs_grad);
    for (int i = 0; i < R; ++i) {
        if (idx[i] < 0 || idx[i] >= x->rows)
            throw std::runtime_error("gather_rows: index out of range");
        std::memcpy(&out->v[static_cast<std::int64_t>(i) * C],
                    &x->v[static_cast<std::int64_t>(idx[i]) * C], C * sizeof(float));
    }
    if (out->needs_grad)
        out->back = [out, x, idx, R, C] {
            x->ensure_grad();
            for (int i = 0; i < R; ++i) {
                float* gx = &x->g[static_cast<std::int64_t>(idx[i]) * C];
                const float* go = &out->g[static_cast<std::int64_t>(i) * C];
                for (int c = 0; c < C; ++c) gx[c] += go[c];
            }
        };
    return out;
}

TPtr concat_cols(Tape& t, const TPtr& a, const TPtr& b) {
    if (a->rows != b->rows) throw std::runtime_error("concat_cols: row mismatch");
    const int R = a->rows, Ca = a->cols, Cb = b->cols;
    auto out = t.make(R, Ca + Cb, a->needs_grad || b->needs_grad);
    for (int r = 0; r < R; ++r) {
        std::memcpy(&out->v[static_cast<std::int64_t>(r) * (Ca + Cb)],
                    &a->v[static_cast<std::int64_t>(r) * Ca], Ca * sizeof(float));
        std::memcpy(&out->v[static_cast<std::int64_t>(r) * (Ca + Cb) + Ca],
                    &b->v[static_cast<std::int64_t>(r) * Cb], Cb * sizeof(float));
    }
    if (out->needs_grad)
        out->back = [out, a, b, R, Ca, Cb] {
            for (int r = 0; r < R; ++r) {
                const float* go = &out->g[static_cast<std::int64_t>(r) * (Ca + Cb)];
                if (a->needs_grad) {
                    a->ensure_grad();
                    float* ga = &a->g[static_cast<std::int64_t>(r) * Ca];
                    for (int c = 0; c < Ca; ++c) ga[c] += go[c];
                }
                if (b->needs_grad) {
                    b->ensure_grad();
                    float* gb = &b->g[static_cast<std::int64_t>(r) * Cb];
                    for (int c = 0; c < Cb; ++c) gb[c] += go[Ca + c];
                }
            }
        };
    return out;
}

TPtr slice_cols(Tape& t, const TPtr& x, int c0, int n) {
    if (c0 < 0 || c0 + n > x->cols) throw std::runtime_error("slice_cols: out of range");
    const int R = x->rows, C = x->cols;
    auto out = t.make(R, n, x->needs_grad);
    for (int r = 0; r < R; ++r)
        std::memcpy(&out->v[static_cast<std::int64_t>(r) * n],
                    &x->v[static_cast<std::int64_t>(r) * C + c0], n * sizeof(float));
    if (out->needs_grad)
        out->back = [out, x, c0, R, C, n] {
            x->ensure_grad();
            for (int r = 0; r < R; ++r) {
                float* gx = &x->g[static_cast<std::int64_t>(r) * C + c0];
                const float* go = &out->g[static_cast<std::int64_t>(r) * n];
                for (int c = 0; c < n; ++c) gx[c] += go[c];
            }
        };
    return out;
}

TPtr tile_add(Tape& t, const TPtr& x, const TPtr& e, int L) {
    if (x->rows % L != 0 || e->rows != L || e->cols != x->cols)
        throw std::runtime_error("tile_add: shape mismatch");
    const int R = x->rows, C = x->cols;
    auto out = t.make(R, C, x->needs_grad || e->needs_grad);
    for (int r = 0; r < R; ++r) {
        const float* er = &e->v[static_cast<std::int64_t>(r % L) * C];
        const float* xr = &x->v[static_cast<std::int64_t>(r) * C];
        float* o = &out->v[static_cast<std::int64_t>(r) * C];
        for (int c = 0; c < C; ++c) o[c] = xr[c] + er[c];
    }
    if (out->needs_grad)
        out->back = [out, x, e, L, R, C] {
            if (x->needs_grad) {
                x->ensure_grad();
                for (std::int64_t i = 0; i < out->size(); ++i) x->g[i] += out->g[i];
            }
            if (e->needs_grad) {
                e->ensure_grad();
                for (int r = 0; r < R; ++r) {
                    float* ge = &e->g[static_cast<std::int64_t>(r % L) * C];
                    const float* go = &out->g[static_cast<std::int64_t>(r) * C];
                    for (int c = 0; c < C; ++c) ge[c] += go[c];
                }
            }
        };
    return out;
}

TPtr row_mix(Tape& t, const TPtr& x, const TPtr& sub, const std::vector<std::uint8_t>& mask) {
    if (static_cast<int>(mask.size()) != x->rows || sub->rows != 1 || sub->cols != x->cols)
        throw std::runtime_error("row_mix: shape mismatch");
    const int R = x->rows, C = x->cols;
    auto out = t.make(R, C, x->needs_grad || sub->needs_grad);
    for (int r = 0; r < R; ++r) {
        const float* src = mask[r] ? sub->v.data() : &x->v[static_cast<std::int64_t>(r) * C];
        std::memcpy(&out->v[static_cast<std::int64_t>(r) * C], src, C * sizeof(float));
    }
    if (out->needs_grad)
        out->back = [out, x, sub, mask, R, C] {
            for (int r = 0; r < R; ++r) {
                const float* go = &out->g[static_cast<std::int64_t>(r) * C];
                if (mask[r]) {
                    if (!sub->needs_grad) continue;
                    sub->ensure_grad();
                    for (int c = 0; c < C; ++c) sub->g[c] += go[c];
                } else {
                    if (!x->needs_grad) continue;
                    x->ensure_grad();
                    float* gx = &x->g[static_cast<std::int64_t>(r) * C];
                    for (int c = 0; c < C; ++c) gx[c] += go[c];
                }
            }
        };
    return out;
}

TPtr repeat_row(Tape& t, const TPtr& row, int n) {
    if (row->rows != 1) throw std::runtime_error("repeat_row: expected [1,C]");
    const int C = row->cols;
    auto out = t.make(n, C, row->needs_grad);
    for (int r = 0; r < n; ++r)
        std::memcpy(&out->v[static_cast<std::int64_t>(r) * C], row->v.data(), C * sizeof(float));
    if (out->needs_grad)
        out->back = [out, row, n, C] {
            row->ensure_grad();
            for (int r = 0; r < n; ++r) {
                const float* go = &out->g[static_cast<std::int64_t>(r) * C];
                for (int c = 0; c < C; ++c) row->g[c] += go[c];
            }
        };
    return out;
}

// ---- normalization / activations ----------------------------------------

TPtr rmsnorm(Tape& t, const TPtr& x, const TPtr& w) {
    if (w->rows != 1 || w->cols != x->cols) throw std::runtime_error("rmsnorm: weight shape");
    const int R = x->rows, C = x->cols;
    auto out = t.make(R, C, x->needs_grad || w->needs_grad);
    auto inv = std::make_shared<std::vector<float>>(R);
    for (int r = 0; r < R; ++r)
        (*inv)[r] = kern::rmsnorm_row(&x->v[static_cast<std::int64_t>(r) * C], w->v.data(),
                                      &out->v[static_cast<std::int64_t>(r) * C], C, 1e-6f);
    if (out->needs_grad)
        out->back = [out, x, w, inv, R, C] {
            if (x->needs_grad) x->ensure_grad();
            if (w->needs_grad) w->ensure_grad();
            for (int r = 0; r < R; ++r) {
                const float iv = (*inv)[r];
                const float* xr = &x->v[static_cast<std::int64_t>(r) * C];
                const float* go = &out->g[static_cast<std::int64_t>(r) * C];
                if (x->needs_grad) {
                    double s = 0.0;
                    for (int c = 0; c < C; ++c)
                        s += static_cast<double>(go[c]) * xr[c] * w->v[c];
                    const float k = static_cast<float>(s) * iv * iv * iv / C;
                    float* gx = &x->g[static_cast<std::int64_t>(r) * C];
                    for (int c = 0; c < C; ++c)
                        gx[c] += go[c] * iv * w->v[c] - k * xr[c];
                }
                if (w->needs_grad)
                    for (int c = 0; c < C; ++c) w->g[c] += go[c] * xr[c] * iv;
            }
        };
    return out;
}

TPtr silu(Tape& t, const TPtr& x) {
    auto out = t.make(x->rows, x->cols, x->needs_grad);
    kern::silu(x->v.data(), out->v.data(), x->size());
    if (out->needs_grad)
        out->back = [out, x] {
            x->ensure_grad();
            kern::silu_grad(x->v.data(), out->g.data(), x->g.data(), x->size());
        };
    return out;
}

TPtr tanh_op(Tape& t, const TPtr& x) {
    auto out = t.make(x->rows, x->cols, x->needs_grad);
    kern::tanh_v(x->v.data(), out->v.data(), x->size());
    if (out->needs_grad)
        out->back = [out, x] {
            x->ensure_grad();
            for (std::int64_t i = 0; i < x->size(); ++i)
                x->g[i] += out->g[i] * (1.f - out->v[i] * out->v[i]);
        };
    return out;
}

TPtr sigmoid_op(Tape& t, const TPtr& x) {
    auto out = t.make(x->rows, x->cols, x->needs_grad);
    kern::sigmoid_v(x->v.data(), out->v.data(), x->size());
    if (out->needs_grad)
        out->back = [out, x] {
            x->ensure_grad();
            for (std::int64_t i = 0; i < x->size(); ++i)
                x->g[i] += out->g[i] * out->v[i] * (1.f - out->v[i]);
        };
    return out;
}

// ---- attention ------------------------------------------------------------

TPtr rope(Tape& t, const TPtr& x, const std::vector<int>& pos, int n_heads) {
    if (static_cast<int>(pos.size()) != x->rows) throw std::runtime_error("rope: pos size");
    const int C = x->cols, hd = C / n_heads;
    if (hd * n_heads != C || hd % 2 != 0) throw std::runtime_error("rope: bad head dim");
    auto out = t.make(x->rows, C, x->needs_grad);
    out->v = x->v;
    for (int r = 0; r < x->rows; ++r)
        kern::rope_row(&out->v[static_cast<std::int64_t>(r) * C], pos[r], n_heads, hd);
    if (out->needs_grad)
        out->back = [out, x, pos, n_heads, hd, C] {
            x->ensure_grad();
            std::vector<float> tmp(C);
            for (int r = 0; r < x->rows; ++r) {
                std::memcpy(tmp.data(), &out->g[static_cast<std::int64_t>(r) * C], C * sizeof(float));
                kern::rope_row_inv(tmp.data(), pos[r], n_heads, hd);
                float* gx = &x->g[static_cast<std::int64_t>(r) * C];
                for (int c = 0; c < C; ++c) gx[c] += tmp[c];
            }
        };
    return out;
}

TPtr attention(Tape& t, const TPtr& q, const TPtr& k, const TPtr& v,
               const std::vector<Seg>& segs, int n_heads) {
    check_same_shape(q, k, "attention");
    check_same_shape(q, v, "attention");
    const int C = q->cols, hd = C / n_heads;
    if (hd * n_heads != C) throw std::runtime_error("attention: head split");
    auto out = t.make(q->rows, C, q->needs_grad || k->needs_grad || v->needs_grad);
    // ragged per-row prob storage: row r in segment uses n_keys(r) keys
    auto probs = std::make_shared<std::vector<float>>();
    auto offs = std::make_shared<std::vector<std::int64_t>>(q->rows, -1);
    std::int64_t total = 0;
    for (const auto& s : segs)
        for (int i = 0; i < s.len; ++i) {
            (*offs)[s.start + i] = total;
            total += static_cast<std::int64_t>(n_heads) * (s.causal ? i + 1 : s.len);
        }
    probs->resize(total);
    for (const auto& s : segs) {
        const float* K = &k->v[static_cast<std::int64_t>(s.start) * C];
        const float* V = &v->v[static_cast<std::int64_t>(s.start) * C];
        for (int i = 0; i < s.len; ++i) {
            const int r = s.start + i;
            const int nk = s.causal ? i + 1 : s.len;
            kern::attn_row(&q->v[static_cast<std::int64_t>(r) * C], K, V, nk, n_heads, hd,
                           probs->data() + (*offs)[r], &out->v[static_cast<std::int64_t>(r) * C]);
        }
    }
    if (out->needs_grad)
        out->back = [out, q, k, v, segs, probs, offs, n_heads, hd, C] {
            if (q->needs_grad) q->ensure_grad();
            if (k->needs_grad) k->ensure_grad();
            if (v->needs_grad) v->ensure_grad();
            const float scl = 1.0f / std::sqrt(static_cast<float>(hd));
            std::vector<float> dp;
            for (const auto& s : segs) {
                for (int i = 0; i < s.len; ++i) {
                    const int r = s.start + i;
                    const int nk = s.causal ? i + 1 : s.len;
                    dp.resize(nk);
                    for (int h = 0; h < n_heads; ++h) {
                        const float* p = probs->data() + (*offs)[r] +
                                         static_cast<std::int64_t>(h) * nk;
                        const float* go = &out->g[static_cast<std::int64_t>(r) * C + h * hd];
                        // dV and dp
                        for (int j = 0; j < nk; ++j) {
                            const std::int64_t vr = static_cast<std::int64_t>(s.start + j) * C + h * hd;
                            dp[j] = kern::det_dot(go, &v->v[vr], hd);
                            if (v->needs_grad) {
                                float* gv = &v->g[vr];
                                for (int d = 0; d < hd; ++d) gv[d] += p[j] * go[d];
                            }
                        }
                        // softmax backward
                        double sdot = 0.0;
                        for (int j = 0; j < nk; ++j) sdot += static_cast<double>(p[j]) * dp[j];
                        const float* qh = &q->v[static_cast<std::int64_t>(r) * C + h * hd];
                        float* gq = q->needs_grad ? &q->g[static_cast<std::int64_t>(r) * C + h * hd] : nullptr;
                        for (int j = 0; j < nk; ++j) {
                            const float ds = p[j] * (dp[j] - static_cast<float>(sdot)) * scl;
                            const std::int64_t kr = static_cast<std::int64_t>(s.start + j) * C + h * hd;
                            if (gq) {
                                const float* kh = &k->v[kr];
                                for (int d = 0; d < hd; ++d) gq[d] += ds * kh[d];
                            }
                            if (k->needs_grad) {
                                float* gk = &k->g[kr];
                                for (int d = 0; d < hd; ++d) gk[d] += ds * qh[d];
                            }
                        }
                    }
                }
            }
        };
    return out;
}

// ---- quantizer / grouping -------------------------------------------------

TPtr fsq_quantize(Tape& t, const TPtr& x, float delta, int L) {
    auto out = t.make(x->rows, x->cols, x->needs_grad);
    kern::fsq_apply(x->v.data(), out->v.data(), x->size(), delta, L);
    if (out->needs_grad)
        out->back = [out, x] {
            x->ensure_grad();
            for (std::int64_t i = 0; i < x->size(); ++i) x->g[i] += out->g[i];
        };
    return out;
}

TPtr mean_pool_groups(Tape& t, const TPtr& x, int L) {
    if (x->rows % L != 0) throw std::runtime_error("mean_pool_groups: rows % L");
    const int G = x->rows / L, C = x->cols;
    auto out = t.make(G, C, x->needs_grad);
    const float invL = 1.0f / L;
    for (int g = 0; g < G; ++g) {
        float* o = &out->v[static_cast<std::int64_t>(g) * C];
        for (int c = 0; c < C; ++c) o[c] = 0.f;
        for (int i = 0; i < L; ++i) {
            const float* xr = &x->v[static_cast<std::int64_t>(g * L + i) * C];
            for (int c = 0; c < C; ++c) o[c] += xr[c];
        }
        for (int c = 0; c < C; ++c) o[c] *= invL;
    }
    if (out->needs_grad)
        out->back = [out, x, G, L, C, invL] {
            x->ensure_grad();
            for (int g = 0; g < G; ++g) {
                const float* go = &out->g[static_cast<std::int64_t>(g) * C];
                for (int i = 0; i < L; ++i) {
                    float* gx = &x->g[static_cast<std::int64_t>(g * L + i) * C];
                    for (int c = 0; c < C; ++c) gx[c] += go[c] * invL;
                }
            }
        };
    return out;
}

TPtr group_mod(Tape& t, const TPtr& x, const TPtr& scl, const TPtr& shift, int L) {
    if (x->rows % L != 0 || scl->rows != x->rows / L || shift->rows != scl->rows ||
        scl->cols != x->cols || shift->cols != x->cols)
        throw std::runtime_error("group_mod: shape mismatch");
    const int R = x->rows, C = x->cols;
    auto out = t.make(R, C, x->needs_grad || scl->needs_grad || shift->needs_grad);
    for (int r = 0; r < R; ++r) {
        const int g = r / L;
        const float* xr = &x->v[static_cast<std::int64_t>(r) * C];
        const float* sc = &scl->v[static_cast<std::int64_t>(g) * C];
        const float* sh = &shift->v[static_cast<std::int64_t>(g) * C];
        float* o = &out->v[static_cast<std::int64_t>(r) * C];
        for (int c = 0; c < C; ++c) o[c] = xr[c] * (1.f + sc[c]) + sh[c];
    }
    if (out->needs_grad)
        out->back = [out, x, scl, shift, L, R, C] {
            if (x->needs_grad) x->ensure_grad();
            if (scl->needs_grad) scl->ensure_grad();
            if (shift->needs_grad) shift->ensure_grad();
            for (int r = 0; r < R; ++r) {
                const int g = r / L;
                const float* go = &out->g[static_cast<std::int64_t>(r) * C];
                const float* xr = &x->v[static_cast<std::int64_t>(r) * C];
                const float* sc = &scl->v[static_cast<std::int64_t>(g) * C];
                if (x->needs_grad) {
                    float* gx = &x->g[static_cast<std::int64_t>(r) * C];
                    for (int c = 0; c < C; ++c) gx[c] += go[c] * (1.f + sc[c]);
                }
                if (scl->needs_grad) {
                    float* gs = &scl->g[static_cast<std::int64_t>(g) * C];
                    for (int c = 0; c < C; ++c) gs[c] += go[c] * xr[c];
                }
                if (shift->needs_grad) {
                    float* gh = &shift->g[static_cast<std::int64_t>(g) * C];
                    for (int c = 0; c < C; ++c) gh[c] += go[c];
                }
            }
        };
    return out;
}

TPtr group_gate(Tape& t, const TPtr& x, const TPtr& gate, int L) {
    if (x->rows % L != 0 || gate->rows != x->rows / L || gate->cols != x->cols)
        throw std::runtime_error("group_gate: shape mismatch");
    const int R = x->rows, C = x->cols;
    auto out = t.make(R, C, x->needs_grad || gate->needs_grad);
    for (int r = 0; r < R; ++r) {
        const float* ga = &gate->v[static_cast<std::int64_t>(r / L) * C];
        const float* xr = &x->v[static_cast<std::int64_t>(r) * C];
        float* o = &out->v[static_cast<std::int64_t>(r) * C];
        for (int c = 0; c < C; ++c) o[c] = xr[c] * ga[c];
    }
    if (out->needs_grad)
        out->back = [out, x, gate, L, R, C] {
            if (x->needs_grad) x->ensure_grad();
            if (gate->needs_grad) gate->ensure_grad();
            for (int r = 0; r < R; ++r) {
                const int g = r / L;
                const float* go = &out->g[static_cast<std::int64_t>(r) * C];
                if (x->needs_grad) {
                    const float* ga = &gate->v[static_cast<std::int64_t>(g) * C];
                    float* gx = &x->g[static_cast<std::int64_t>(r) * C];
                    for (int c = 0; c < C; ++c) gx[c] += go[c] * ga[c];
                }
                if (gate->needs_grad) {
                    const float* xr = &x->v[static_cast<std::int64_t>(r) * C];
                    float* gg = &gate->g[static_cast<std::int64_t>(g) * C];
                    for (int c = 0; c < C; ++c) gg[c] += go[c] * xr[c];
                }
            }
        };
    return out;
}

TPtr group_tail(Tape& t, const TPtr& x, int L, int P) {
    if (x->rows % L != 0 || P > L) throw std::runtime_error("group_tail: shape mismatch");
    const int G = x->rows / L, C = x->cols;
    std::vector<int> idx;
    idx.reserve(static_cast<std::size_t>(G) * P);
    for (int g = 0; g < G; ++g)
        for (int i = L - P; i < L; ++i) idx.push_back(g * L + i);
    return gather_rows(t, x, idx);
}

// ---- losses ---------------------------------------------------------------

TPtr mse_masked(Tape& t, const TPtr& pred, const TPtr& target, const TPtr& mask) {
    check_same_shape(pred, target, "mse_masked");
    if (mask->rows != pred->rows || mask->cols != 1)
        throw std::runtime_error("mse_masked: mask must be [rows,1]");
    const int R = pred->rows, C = pred->cols;
    double msum = 0.0;
    for (int r = 0; r < R; ++r) msum += mask->v[r];
    const double denom = msum * C;
    if (denom <= 0.0) throw std::runtime_error("mse_masked: empty mask");
    auto out = t.make(1, 1, pred->needs_grad);
    double acc = 0.0;
    for (int r = 0; r < R; ++r) {
        if (mask->v[r] == 0.f) continue;
        const float* p = &pred->v[static_cast<std::int64_t>(r) * C];
        const float* y = &target->v[static_cast<std::int64_t>(r) * C];
        double rowacc = 0.0;
        for (int c = 0; c < C; ++c) {
            const double d = static_cast<double>(p[c]) - y[c];
            rowacc += d * d;
        }
        acc += mask->v[r] * rowacc;
    }
    out->v[0] = static_cast<float>(acc / denom);
    if (out->needs_grad)
        out->back = [out, pred, target, mask, R, C, denom] {
            pred->ensure_grad();
            const float gs = out->g[0];
            for (int r = 0; r < R; ++r) {
                if (mask->v[r] == 0.f) continue;
                const float w = static_cast<float>(2.0 * mask->v[r] / denom) * gs;
                float* gp = &pred->g[static_cast<std::int64_t>(r) * C];
                const float* p = &pred->v[static_cast<std::int64_t>(r) * C];
                const float* y = &target->v[static_cast<std::int64_t>(r) * C];
                for (int c = 0; c < C; ++c) gp[c] += w * (p[c] - y[c]);
            }
        };
    return out;
}

TPtr bce_logits_mean(Tape& t, const TPtr& logits, const TPtr& labels) {
    check_same_shape(logits, labels, "bce");
    const std::int64_t n = logits->size();
    auto out = t.make(1, 1, logits->needs_grad);
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double z = logits->v[i], y = labels->v[i];
        acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    out->v[0] = static_cast<float>(acc / n);
    if (out->needs_grad)
        out->back = [out, logits, labels, n] {
            logits->ensure_grad();
            const float gs = out->g[0] / static_cast<float>(n);
            for (std::int64_t i = 0; i < n; ++i) {
                const float s = 1.0f / (1.0f + std::exp(-logits->v[i]));
                logits->g[i] += gs * (s - labels->v[i]);
            }
        };
    return out;
}

TPtr kl_std_normal(Tape& t, const TPtr& mean, const TPtr& logvar) {
    check_same_shape(mean, logvar, "kl");
    const int R = mean->rows;
    const std::int64_t n = mean->size();
    auto out = t.make(1, 1, mean->needs_grad || logvar->needs_grad);
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double mu = mean->v[i], lv = logvar->v[i];
        acc += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
    }
    out->v[0] = static_cast<float>(acc / R);
    if (out->needs_grad)
        out->back = [out, mean, logvar, R, n] {
            const float gs = out->g[0] / static_cast<float>(R);
            if (mean->needs_grad) {
                mean->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) mean->g[i] += gs * mean->v[i];
            }
            if (logvar->needs_grad) {
                logvar->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    logvar->g[i] += gs * 0.5f * (std::exp(logvar->v[i]) - 1.0f);
            }
        };
    return out;
}

TPtr gauss_reparam(Tape& t, const TPtr& mean, const TPtr& logvar, const TPtr& eps) {
    check_same_shape(mean, logvar, "reparam");
    check_same_shape(mean, eps, "reparam");
    const std::int64_t n = mean->size();
    auto out = t.make(mean->rows, mean->cols, mean->needs_grad || logvar->needs_grad);
    for (std::int64_t i = 0; i < n; ++i)
        out->v[i] = mean->v[i] + std::exp(0.5f * logvar->v[i]) * eps->v[i];
    if (out->needs_grad)
        out->back = [out, mean, logvar, eps, n] {
            if (mean->needs_grad) {
                mean->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) mean->g[i] += out->g[i];
            }
            if (logvar->needs_grad) {
                logvar->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    logvar->g[i] += out->g[i] * 0.5f * std::exp(0.5f * logvar->v[i]) * eps->v[i];
            }
        };
    return out;
}

TPtr sum_weighted(Tape& t, const TPtr& x, const TPtr& w) {
    check_same_shape(x, w, "sum_weighted");
    const std::int64_t n = x->size();
    auto out = t.make(1, 1, x->needs_grad);
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) acc += static_cast<double>(x->v[i]) * w->v[i];
    out->v[0] = static_cast<float>(acc);
    if (out->needs_grad)
        out->back = [out, x, w, n] {
            x->ensure_grad();
            const float gs = out->g[0];
            for (std::int64_t i = 0; i < n; ++i) x->g[i] += gs * w->v[i];
        };
    return out;
}

// ---- causal convolutions ----------------------------------------------------

TPtr conv1d_causal(Tape& t, const TPtr& x, const TPtr& w, const TPtr& b,
                   int K, int Cin, int Cout, int stride) {
    if (x->cols != Cin || w->rows != K * Cin || w->cols != Cout)
        throw std::runtime_error("conv1d: shape mismatch");
    // left pad of K-1: output n sees inputs (n*stride - K, n*stride]
    const int T = x->rows, To = (x->rows + stride - 1) / stride, pad = K - 1;
    auto cols = std::make_shared<std::vector<float>>(
        static_cast<std::int64_t>(To) * K * Cin, 0.f);
    for (int to = 0; to < To; ++to) {
        float* row = cols->data() + static_cast<std::int64_t>(to) * K * Cin;
        for (int kk = 0; kk < K; ++kk) {
            const int i = to * stride + kk - pad;
            if (i < 0) continue;
            std::memcpy(row + static_cast<std::int64_t>(kk) * Cin,
                        &x->v[static_cast<std::int64_t>(i) * Cin], Cin * sizeof(float));
        }
    }
    auto out = t.make(To, Cout, x->needs_grad || w->needs_grad || (b && b->needs_grad));
    const float* wcm = nullptr;
    std::vector<float> tmp;
    if (w->param && w->param->shadow) {
        wcm = w->param->wcm.data();
    } else {
        tmp.resize(w->size());
        for (int i = 0; i < K * Cin; ++i)
            for (int j = 0; j < Cout; ++j)
                tmp[static_cast<std::int64_t>(j) * K * Cin + i] =
                    w->v[static_cast<std::int64_t>(i) * Cout + j];
        wcm = tmp.data();
    }
    kern::gemm_colB(cols->data(), wcm, out->v.data(), To, K * Cin, Cout,
                    b ? b->v.data() : nullptr);
    if (out->needs_grad)
        out->back = [out, x, w, b, cols, T, To, K, Cin, Cout, stride, pad] {
            if (x->needs_grad) {
                x->ensure_grad();
                std::vector<float> dcols(static_cast<std::int64_t>(To) * K * Cin, 0.f);
                kern::gemm_rowBT(out->g.data(), w->v.data(), dcols.data(), To, Cout,
                                 K * Cin, false);
                for (int to = 0; to < To; ++to) {
                    const float* row = dcols.data() + static_cast<std::int64_t>(to) * K * Cin;
                    for (int kk = 0; kk < K; ++kk) {
                        const int i = to * stride + kk - pad;
                        if (i < 0) continue;
                        float* gx = &x->g[static_cast<std::int64_t>(i) * Cin];
                        const float* rc = row + static_cast<std::int64_t>(kk) * Cin;
                        for (int c = 0; c < Cin; ++c) gx[c] += rc[c];
                    }
                }
            }
            if (w->needs_grad) {
                w->ensure_grad();
                kern::accum_outer(cols->data(), out->g.data(), w->g.data(), To, K * Cin, Cout);
            }
            if (b && b->needs_grad) {
                b->ensure_grad();
                kern::accum_colsum(out->g.data(), b->g.data(), To, Cout);
            }
        };
    return out;
}

TPtr tconv1d_causal(Tape& t, const TPtr& x, const TPtr& w, const TPtr& b,
                    int K, int Cin, int Cout, int stride) {
    if (x->cols != Cin || w->rows != Cin || w->cols != K * Cout)
        throw std::runtime_error("tconv1d: shape mismatch");
    const int T = x->rows, Ty = T * stride;
    // R[t, kk*Cout+co] = x[t,:] . w[:, kk*Cout+co]
    std::vector<float> R(static_cast<std::int64_t>(T) * K * Cout);
    {
        const float* wcm = nullptr;
        std::vector<float> tmp;
        if (w->param && w->param->shadow) {
            wcm = w->param->wcm.data();
        } else {
            tmp.resize(w->size());
            for (int i = 0; i < Cin; ++i)
                for (int j = 0; j < K * Cout; ++j)
                    tmp[static_cast<std::int64_t>(j) * Cin + i] =
                        w->v[static_cast<std::int64_t>(i) * K * Cout + j];
            wcm = tmp.data();
        }
        kern::gemm_colB(x->v.data(), wcm, R.data(), T, Cin, K * Cout, nullptr);
    }
    auto out = t.make(Ty, Cout, x->needs_grad || w->needs_grad || (b && b->needs_grad));
    for (int ty = 0; ty < Ty; ++ty) {
        float* o = &out->v[static_cast<std::int64_t>(ty) * Cout];
        for (int c = 0; c < Cout; ++c) o[c] = b ? b->v[c] : 0.f;
    }
    for (int tt = 0; tt < T; ++tt)
        for (int kk = 0; kk < K; ++kk) {
            const int ty = tt * stride + kk;
            if (ty >= Ty) break;
            float* o = &out->v[static_cast<std::int64_t>(ty) * Cout];
            const float* r = &R[static_cast<std::int64_t>(tt) * K * Cout + kk * Cout];
            for (int c = 0; c < Cout; ++c) o[c] += r[c];
        }
    if (out->needs_grad)
        out->back = [out, x, w, b, T, Ty, K, Cin, Cout, stride] {
            std::vector<float> dR(static_cast<std::int64_t>(T) * K * Cout, 0.f);
            for (int tt = 0; tt < T; ++tt)
                for (int kk = 0; kk < K; ++kk) {
                    const int ty = tt * stride + kk;
                    if (ty >= Ty) break;
                    const float* go = &out->g[static_cast<std::int64_t>(ty) * Cout];
                    float* dr = &dR[static_cast<std::int64_t>(tt) * K * Cout + kk * Cout];
                    for (int c = 0; c < Cout; ++c) dr[c] = go[c];
                }
            if (x->needs_grad) {
                x->ensure_grad();
                kern::gemm_rowBT(dR.data(), w->v.data(), x->g.data(), T, K * Cout, Cin, true);
            }
            if (w->needs_grad) {
                w->ensure_grad();
                kern::accum_outer(x->v.data(), dR.data(), w->g.data(), T, Cin, K * Cout);
            }
            if (b && b->needs_grad) {
                b->ensure_grad();
                kern::accum_colsum(out->g.data(), b->g.data(), Ty, Cout);
            }
        };
    return out;
}

} // namespace patchflow
