#pragma once

#include <string>

#include "splatgen/nn.hpp"

namespace splatgen {

// Checkpoint file: {magic "CKPT", u32 version, u64 spec_hash, u64 count},
// then per entry {u32 name_len, name, u32 ndim, i64 dims..., f32 data}.
// Entries are written in ParamStore insertion order; round-trips are
// byte-exact. Writes go to a temp file renamed into place.
void save_checkpoint(const std::string& path, const nn::ParamStore<float>& params, uint64_t spec_hash);

struct LoadedCheckpoint {
    nn::ParamStore<float> params;
    uint64_t spec_hash = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Throws Error(checkpoint) when the stored hash disagrees with the spec.
LoadedCheckpoint load_checkpoint_checked(const std::string& path, uint64_t expected_spec_hash);

}  // namespace splatgen
