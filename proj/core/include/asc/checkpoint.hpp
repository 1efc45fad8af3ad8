#pragma once

// Checkpoint layout (all little-endian):
//   "ASCM" | u32 version (=1) | u64 config length | config JSON (UTF-8)
//   | float32 tensors in TransformerWeights canonical order | u32 CRC32 of the tensor bytes
// Weights are narrowed to float32 on save and widened back to float64 on load.

#include <cstdint>
#include <filesystem>

#include "asc/io.hpp"
#include "asc/model.hpp"

namespace asc {

inline constexpr char kCheckpointMagic[4] = {'A', 'S', 'C', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    TransformerWeights weights;
};

Bytes encode_checkpoint(const ModelConfig& cfg, const TransformerWeights& w);
// Throws LoadError on bad magic, version, truncation, trailing bytes or CRC mismatch.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const TransformerWeights& w);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Rounds every weight through float32, i.e. what a save/load cycle yields.
TransformerWeights round_to_f32(TransformerWeights w);

}  // namespace asc
