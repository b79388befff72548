#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dtlab/dtmodel.hpp"

namespace dtlab::compress {

// Uniform affine grid over [min_val, min_val + (2^bits - 1) * step], codes
// bit-packed LSB-first. step == 0 only for constant tensors.
struct QuantizedTensor {
  std::vector<int> shape;
  int bits = 8;
  float min_val = 0.0f;
  float step = 0.0f;
  std::vector<std::uint8_t> codes;  // ceil(numel * bits / 8) bytes
};

// Bit packing helpers shared with the checkpoint encoder.
void pack_bits(std::span<const std::uint32_t> values, int bits,
               std::vector<std::uint8_t>& out);
std::vector<std::uint32_t> unpack_bits(std::span<const std::uint8_t> bytes,
                                       std::size_t count, int bits);

QuantizedTensor quantize_tensor(std::span<const float> values,
                                std::vector<int> shape, int bits);
std::vector<float> dequantize(const QuantizedTensor& q);

// Masks produced by the pruning passes: per-tensor kept flags plus the kept
// feed-forward hidden units per block for the structured pass.
struct PruneMask {
  std::map<std::string, std::vector<std::uint8_t>> kept;
  std::vector<std::vector<int>> kept_hidden;  // one list per block, ascending
};

struct CompressionPlan {
  enum class Strategy { kFp32, kQuant, kPrune, kQuantThenPrune, kPruneThenQuant,
                        kPruneFineTuneQuant };
  Strategy strategy = Strategy::kFp32;
  int bits = 8;
  float prune_unstructured_frac = 0.3f;
  float prune_structured_frac = 0.1f;
  float ft_fraction = 0.2f;

  bool needs_dataset() const { return strategy == Strategy::kPruneFineTuneQuant; }
  std::string label() const;
  // Grammar: fp32 | q<b> | p | q<b>+p | p+q<b> | p+ft+q<b>, b in 1..8.
  static CompressionPlan parse(const std::string& text);
};

// Replaces every compression-eligible Linear weight and bias with its
// fake-quantized grid values; masked entries stay exactly zero and the grid
// is fitted over the full tensor including those zeros.
void quantize_model(model::DTModel& m, int bits);

// Zeroes the floor(p_u * N) smallest-magnitude weight entries per eligible
// layer (ties to the lowest flat index) and records kept masks.
PruneMask prune_unstructured(model::DTModel& m, float p_u);

// Removes the floor(p_s * hidden) lowest-L2 feed-forward hidden units per
// block: rows of ffn_in, their bias entries, and the matching ffn_out
// columns. Dimensions shrink physically.
PruneMask prune_structured(model::DTModel& m, float p_s);

// ft_fraction * cfg.train_steps optimizer steps with masks frozen. The model
// must carry a prune mask.
model::TrainResult fine_tune(model::DTModel& m, const data::Dataset& dataset,
                             float ft_fraction, std::uint64_t seed = 0);

// Applies the plan's stages in declared order and stamps the model with the
// plan label. The dataset is required only for fine-tuning plans.
void run_pipeline(model::DTModel& m, const CompressionPlan& plan,
                  const data::Dataset* dataset = nullptr);

// Mask-zero fraction over all eligible weight tensors.
double sparsity(const model::DTModel& m);

}  // namespace dtlab::compress
