#include "patchflow/params.hpp"

#include <cmath>
#include <stdexcept>

namespace patchflow {

void Param::refresh() {
    if (!shadow) return;
    wcm.resize(w.size());
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            wcm[static_cast<std::int64_t>(j) * rows + i] =
                w[static_cast<std::int64_t>(i) * cols + j];
}

ParamPtr ParamStore::create(const std::string& name, int rows, int cols,
                            ParamInit init, Rng& rng, bool shadow, bool decay) {
    if (map_.count(name))
        throw std::runtime_error("param already exists: " + name);
    auto p = std::make_shared<Param>();
    p->name = name;
    p->rows = rows;
    p->cols = cols;
    p->shadow = shadow;
    p->decay = decay;
    const std::int64_t n = p->size();
    p->w.resize(n);
    switch (init.kind) {
    case ParamInit::zeros:
        std::fill(p->w.begin(), p->w.end(), 0.f);
        break;
    case ParamInit::ones:
        std::fill(p->w.begin(), p->w.end(), 1.f);
        break;
    case ParamInit::normal:
        for (auto& x : p->w) x = init.std * rng.normalf();
        break;
    }
    p->g.assign(n, 0.f);
    p->m.assign(n, 0.f);
    p->v.assign(n, 0.f);
    p->refresh();
    map_[name] = p;
    return p;
}

ParamPtr ParamStore::get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::runtime_error("no such param: " + name);
    return it->second;
}

void ParamStore::zero_grad() {
    for (auto& [_, p] : map_) std::fill(p->g.begin(), p->g.end(), 0.f);
}

void ParamStore::refresh_all() {
    for (auto& [_, p] : map_) p->refresh();
}

std::int64_t ParamStore::total_size() const {
    std::int64_t n = 0;
    for (auto& [_, p] : map_) n += p->size();
    return n;
}

double ParamStore::grad_norm(const std::string& prefix) const {
    double s = 0.0;
    for (auto& [name, p] : map_) {
        if (name.rfind(prefix, 0) != 0) continue;
        for (float x : p->g) s += static_cast<double>(x) * x;
    }
    return std::sqrt(s);
}

void AdamW::step(ParamStore& store, double lr) {
    ++t;
    // global-norm clip, params visited in sorted-name order
    double norm = store.grad_norm();
    double cscale = 1.0;
    if (clip_norm > 0.0 && norm > clip_norm) cscale = clip_norm / norm;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& [_, p] : store.all()) {
        const std::int64_t n = p->size();
        const bool wd = p->decay && p->rows > 1 && p->cols > 1;
        for (std::int64_t i = 0; i < n; ++i) {
            const double gi = cscale * p->g[i];
            const double mi = beta1 * p->m[i] + (1.0 - beta1) * gi;
            const double vi = beta2 * p->v[i] + (1.0 - beta2) * gi * gi;
            p->m[i] = static_cast<float>(mi);
            p->v[i] = static_cast<float>(vi);
            double upd = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
            if (wd) upd += weight_decay * p->w[i];
            p->w[i] = static_cast<float>(p->w[i] - lr * upd);
        }
        p->refresh();
    }
}

} // namespace patchflow
