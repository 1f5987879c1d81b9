#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cxrgen/tensor.hpp"

namespace cxrgen {

// FNV-1a over a byte range; doubles as the config fingerprint and the
// trailing file-integrity checksum.
std::uint64_t fnv1a64(const void* data, std::size_t n,
                      std::uint64_t seed = 14695981039346656037ull);

// A named-tensor snapshot of a model plus the bookkeeping needed to verify a
// later load: which configuration produced it and how many optimizer steps it
// absorbed.  Tensor handles share storage with the live model they were
// collected from, so a save reflects the values at call time.
struct Checkpoint {
    std::uint64_t config_hash = 0;
    std::int64_t step = 0;
    std::vector<std::pair<std::string, Tensor>> tensors;  // serialization order

    const Tensor* find(const std::string& name) const;
};

// Atomic write (temporary file + rename).  Layout, little-endian: magic
// "CKP0", format version, config hash, step, tensor count, then one record
// per tensor (name, shape, float64 payload), and a final checksum over every
// preceding byte.
void save_checkpoint(const std::string& path, const Checkpoint& ck);

// FormatError on unreadable files, bad magic/version, truncation, trailing
// garbage, or a checksum mismatch.
Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint values into live destination tensors, matching by name.
// Every destination name must exist in the checkpoint with an identical
// shape; a miss raises LoadError naming the tensor (and both shapes for a
// shape conflict).  Extra tensors in the checkpoint are ignored, which is
// what lets a causal pre-training snapshot flow into the multi-directional
// encoder: the block parameters carry the same names in both modes.  A
// config-hash mismatch is NOT an error; it is reported through the returned
// warning string (empty when the hashes agree).
std::string load_into(const Checkpoint& ck, std::uint64_t expected_config_hash,
                      std::vector<std::pair<std::string, Tensor>>& dst);

}  // namespace cxrgen
