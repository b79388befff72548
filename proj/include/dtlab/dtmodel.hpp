#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dtlab/env.hpp"
#include "dtlab/layers.hpp"
#include "dtlab/trajectory.hpp"

namespace dtlab::model {

struct DTConfig {
  int context_len = 20;  // K triplets visible per prediction
  int embed_dim = 128;
  int layers = 3;
  int heads = 1;
  float dropout = 0.1f;
  int state_dim = data::kStateDim;
  int act_dim = data::kActionDim;
  int max_timestep = 200;
  int train_steps = 10000;
  int batch_size = 64;
  float lr = 1e-4f;
  float weight_decay = 1e-4f;
  float grad_clip = 0.25f;

  int ffn_dim() const { return 4 * embed_dim; }
  void validate() const;
};

// Per-tensor compression metadata. bits > 0 means the tensor holds
// fake-quantized grid values described by (qmin, qstep); a non-empty mask
// marks kept entries (zeroed entries stay exactly zero).
struct TensorCompression {
  int bits = 0;
  float qmin = 0.0f;
  float qstep = 0.0f;
  std::vector<std::uint8_t> mask;
};

using CompressionState = std::map<std::string, TensorCompression>;

struct Block {
  nn::LayerParams ln1, attn_qkv, attn_proj, ln2, ffn_in, ffn_out;
};

struct DTModel {
  DTConfig cfg;
  data::NormStats norm;
  float train_max_return = 0.0f;
  std::string strategy = "fp32";

  nn::LayerParams embed_rtg, embed_state, embed_action;
  nn::LayerParams embed_timestep;  // learned, shared by the 3 tokens of a step
  nn::LayerParams embed_ln;
  std::vector<Block> blocks;
  nn::LayerParams final_ln, action_head;

  CompressionState comp;

  // Fixed traversal order; checkpoint layout and init draws both follow it.
  std::vector<nn::LayerParams*> layer_list();
  std::vector<const nn::LayerParams*> layer_list() const;
  std::vector<nn::LayerParams*> eligible_layers();  // compressible Linear only
  std::vector<nn::ParamRef> params();
  std::int64_t param_count() const;
  DTModel clone() const;
};

DTModel build_model(const DTConfig& cfg, std::uint64_t seed);

// One training window batch. states are normalized; slot_mask marks real
// (unpadded) slots; padded slots are zero-filled with timestep 0.
struct Batch {
  int batch = 0;
  int window = 0;
  std::vector<float> rtg;                // B*K
  std::vector<float> states;             // B*K*state_dim
  std::vector<float> actions;            // B*K*act_dim (input tokens)
  std::vector<int> timesteps;            // B*K
  std::vector<std::uint8_t> slot_mask;   // B*K
  std::vector<float> target_actions;     // B*K*act_dim
};

// Uniformly samples a trajectory, then a start index; the window runs forward
// from the start, truncates at the trajectory end, and left-pads to K.
Batch sample_batch(const data::Dataset& dataset, const data::NormStats& norm,
                   int window, int batch_size, Rng& rng);

// Predicted actions [B,K,act_dim], read from the state-token positions.
nn::VarPtr forward(const DTModel& model, const Batch& batch,
                   bool training = false, Rng* dropout_rng = nullptr);

struct TrainResult {
  std::vector<float> loss_curve;  // one MSE value per optimizer step
};

// Runs `steps` optimizer steps against an already-normalized model
// (norm stats must be set). Used by both train() and fine-tuning.
TrainResult train_steps(DTModel& model, const data::Dataset& dataset, int steps,
                        std::uint64_t seed);

// Fits normalization stats, records the dataset's best return, then runs
// cfg.train_steps optimizer steps. Deterministic given (dataset, cfg, seed).
TrainResult train(DTModel& model, const data::Dataset& dataset,
                  std::uint64_t seed);

struct RolloutResult {
  data::Trajectory trajectory;
  std::vector<float> rtg_trace;  // H+1 values starting at target_return
};

// Conditioned autoregressive rollout: the return-to-go channel starts at
// target_return and decrements by realized rewards, clamped at zero; the
// context keeps the last K triplets.
RolloutResult rollout(const DTModel& model, const env::EnvConfig& env_cfg,
                      std::uint64_t env_seed, float target_return);

}  // namespace dtlab::model
