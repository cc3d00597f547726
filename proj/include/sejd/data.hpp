#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sejd/flow.hpp"
#include "sejd/numerics.hpp"

namespace sejd {

struct Dataset {
  std::string generator;
  std::uint64_t seed = 0;
  std::size_t seq_len = 0;
  std::size_t patch_dim = 0;
  std::vector<Matrix> samples;
};

inline constexpr std::size_t kImageSide = 8;
inline constexpr std::size_t kPatchSide = 2;

// 8x8 linear intensity ramps (random direction and offset) plus N(0, 0.05^2)
// pixel noise, patchified 2x2 row-major (L = 16, D = 4) and standardized to
// zero mean / unit variance over the whole dataset.
Dataset gen_gradient_patches(std::uint64_t seed, std::size_t n);

// Looks up a generator by id ("gradient-patches").
Dataset make_dataset(const std::string& generator, std::uint64_t seed, std::size_t n);

// Deterministic held-out split: every sample with index % 10 == 9.
std::pair<std::vector<Matrix>, std::vector<Matrix>> split_holdout(const Dataset& data);

// Image (H x W) <-> sequence of row-major patches (H*W/p^2 x p^2).
Matrix patchify(const Matrix& image, std::size_t patch = kPatchSide);
Matrix unpatchify(const Matrix& seq, std::size_t height = kImageSide,
                  std::size_t width = kImageSide, std::size_t patch = kPatchSide);

// ---------------------------------------------------------------------------
// Checkpoint format (all integers little-endian):
//   "SEJD" | u32 version | u32 K, L, D, C, B | f32 alpha | u8 flip
//   | u32 record_count | u32 crc32 of the preceding header bytes and all records
//   record_count x { u32 name_len | name | u32 rank | u32 dims[rank] | f32 payload }
// Records appear in the canonical parameter order, layer by layer.

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const FlowModel<float>& model);
FlowModel<float> parse_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const FlowModel<float>& model, const std::filesystem::path& path);
FlowModel<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace sejd
