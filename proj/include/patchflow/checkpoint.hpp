#pragma once
// checkpoint file: "PFCKPT01" | u64 step | u64 adam_t | config text |
// sorted params (name, shape, weights, adam moments). save->load->save is
// byte-identical; loads refuse shape or name mismatches.
#include <cstdint>
#include <string>
#include <vector>

#include "patchflow/params.hpp"

namespace patchflow {

struct CheckpointMeta {
    std::uint64_t step = 0;
    std::uint64_t adam_t = 0;
    std::string config_text;
};

void save_checkpoint(const std::string& path, const ParamStore& store,
                     std::uint64_t step, std::uint64_t adam_t,
                     const std::string& config_text);

// store must already hold identically-shaped params (built from config)
CheckpointMeta load_checkpoint(const std::string& path, ParamStore& store);

// peek without touching params (for config compatibility checks)
CheckpointMeta read_checkpoint_meta(const std::string& path);

// line-by-line diff of two serialized configs, "key: ours=X checkpoint=Y"
std::vector<std::string> config_diff(const std::string& ours, const std::string& theirs);

// highest-step ckpt_*.pfckpt in dir; empty string if none
std::string latest_checkpoint(const std::string& dir);
std::string checkpoint_name(std::uint64_t step);

} // namespace patchflow
