#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dtlab/rng.hpp"
#include "dtlab/tensor.hpp"

namespace dtlab::nn {

enum class LayerKind { kLinear, kLayerNorm, kEmbedding };

// A named parameter group. Only Linear layers are eligible for the
// compression passes; LayerNorm and Embedding parameters stay full precision.
struct LayerParams {
  LayerKind kind = LayerKind::kLinear;
  std::string name;
  VarPtr weight;  // Linear: [out,in]; LayerNorm: gain [d]; Embedding: [rows,d]
  VarPtr bias;    // Linear/LayerNorm: [out]; Embedding: none
  bool compressible = false;
};

// Weights drawn from N(0, init_std), biases zero, LayerNorm gain one.
LayerParams make_linear(std::string name, int in_dim, int out_dim, Rng& rng,
                        float init_std = 0.02f);
LayerParams make_layer_norm(std::string name, int dim);
LayerParams make_embedding(std::string name, int rows, int dim, Rng& rng,
                           float init_std = 0.02f);

// y = x . W^T + b over the last dimension of x.
VarPtr linear(const VarPtr& x, const LayerParams& layer);

// Per-position normalization over the last dimension, then affine.
VarPtr layer_norm(const VarPtr& x, const LayerParams& layer, float eps = 1e-5f);

// Row gather from an embedding table; out_shape must end in the table width.
VarPtr embedding_rows(const LayerParams& layer, std::span<const int> indices,
                      std::vector<int> out_shape);

// Multi-head scaled dot-product attention over [B,T,d] with a causal mask.
// key_valid (optional, B*T entries, 1 = usable) removes padded positions from
// every key set; queries at padded positions produce unused garbage.
VarPtr causal_attention(const VarPtr& q, const VarPtr& k, const VarPtr& v,
                        int heads,
                        std::span<const std::uint8_t> key_valid = {});

// Inverted dropout; identity when inactive. Draws one uniform per element.
VarPtr dropout(const VarPtr& x, float p, Rng& rng, bool active);

struct AdamConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;  // decoupled
};

struct ParamRef {
  VarPtr var;
  std::string name;
  const std::uint8_t* mask = nullptr;  // 1 = kept; zeroed entries stay zero
  bool decay = true;                   // weight decay applies
};

struct AdamState {
  std::vector<std::vector<float>> m, v;
  std::int64_t step = 0;
};

void init_adam_state(AdamState& state, std::span<const ParamRef> params);

// Global L2 clip over all gradients; norm accumulated in 64-bit.
void clip_grad_norm(std::span<const ParamRef> params, float max_norm);

// Adam with decoupled weight decay. Masked entries have their gradient
// zeroed before the moment update and their value forced to zero after it.
// Throws on non-finite gradients, naming the parameter.
void adam_step(std::span<const ParamRef> params, AdamState& state,
               const AdamConfig& cfg);

}  // namespace dtlab::nn
