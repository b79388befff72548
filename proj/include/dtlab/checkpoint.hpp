#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dtlab/dtmodel.hpp"

namespace dtlab::ckpt {

// File layout (all integers little-endian, bit-packing LSB-first):
//   magic "DTCK" | u16 version
//   u32 config_len | config block:
//     i32 x9: context_len, embed_dim, layers, heads, state_dim, act_dim,
//             max_timestep, train_steps, batch_size
//     f32 x4: dropout, lr, weight_decay, grad_clip
//     f32 x state_dim: norm mean | f32 x state_dim: norm std
//     f32 train_max_return
//     u16 label_len | strategy label bytes
//   u32 tensor_count, then per tensor:
//     u16 name_len | name bytes
//     u8 tag (0 f32, 1 quant, 2 sparse_f32, 3 sparse_quant)
//     u8 bits (0 unless quantized) | u8 ndim | u32 x ndim dims
//     payload:
//       f32:          4N value bytes
//       quant:        f32 min, f32 step, ceil(N*b/8) code bytes
//       sparse_f32:   ceil(N/8) bitmap (bit=1 kept), 4*kept value bytes
//       sparse_quant: ceil(N/8) bitmap, f32 min, f32 step,
//                     ceil(kept*b/8) code bytes

enum class Encoding : std::uint8_t {
  kF32 = 0,
  kQuant = 1,
  kSparseF32 = 2,
  kSparseQuant = 3,
};

const char* encoding_name(Encoding e);

struct TensorSizeEntry {
  std::string name;
  Encoding encoding = Encoding::kF32;
  std::uint64_t payload_bytes = 0;
};

struct SizeReport {
  std::vector<TensorSizeEntry> tensors;
  std::uint64_t total_bytes = 0;     // whole file, headers included
  std::uint64_t baseline_bytes = 0;  // fp32 file of a fresh same-config build
  double reduction_pct() const {
    return 100.0 * (1.0 - static_cast<double>(total_bytes) /
                              static_cast<double>(baseline_bytes));
  }
};

// Serialized image of the model; fills the report when given.
std::vector<std::uint8_t> serialize(const model::DTModel& m,
                                    SizeReport* report = nullptr);

// Per-tensor encoding choice is the smallest lossless candidate, so the
// loaded model reproduces inference-time values bitwise.
SizeReport save(const model::DTModel& m, const std::filesystem::path& path);
model::DTModel load(const std::filesystem::path& path);

SizeReport size_report(const model::DTModel& m);
std::uint64_t baseline_file_bytes(const model::DTConfig& cfg);

}  // namespace dtlab::ckpt
