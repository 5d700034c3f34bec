#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "patchflow/rng.hpp"

namespace patchflow {

// A named trainable array. Weights used on the right-hand side of matmuls
// keep a column-major shadow copy so the forward kernels can walk both
// operands contiguously; refresh() rebuilds it after an optimizer step.
struct Param {
    std::string name;
    int rows = 0, cols = 0;
    std::vector<float> w;
    std::vector<float> g;
    std::vector<float> m, v; // AdamW moments
    std::vector<float> wcm;  // column-major shadow (empty unless shadowed)
    bool shadow = false;
    bool decay = true; // weight decay applies (matrices yes, vectors/embeddings no)

    std::int64_t size() const { return static_cast<std::int64_t>(rows) * cols; }
    void refresh();
};

using ParamPtr = std::shared_ptr<Param>;

struct ParamInit {
    enum Kind { zeros, ones, normal } kind = normal;
    float std = 0.02f;
};

class ParamStore {
public:
    // name must be new; shadow => keep col-major copy for matmul kernels
    ParamPtr create(const std::string& name, int rows, int cols, ParamInit init,
                    Rng& rng, bool shadow = false, bool decay = true);
    ParamPtr get(const std::string& name) const;
    bool has(const std::string& name) const { return map_.count(name) != 0; }

    const std::map<std::string, ParamPtr>& all() const { return map_; }
    void zero_grad();
    void refresh_all();
    std::int64_t total_size() const;
    // L2 norm over grads of params whose name starts with prefix ("" = all)
    double grad_norm(const std::string& prefix = "") const;

private:
    std::map<std::string, ParamPtr> map_; // sorted by name => stable iteration
};

// AdamW with decoupled weight decay and global-norm gradient clipping.
struct AdamW {
    double beta1 = 0.9, beta2 = 0.95, eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    std::int64_t t = 0;

    void step(ParamStore& store, double lr);
};

} // namespace patchflow
