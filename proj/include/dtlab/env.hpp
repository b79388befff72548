#pragma once

#include <cstdint>
#include <numbers>
#include <span>
#include <utility>

#include "dtlab/rng.hpp"
#include "dtlab/trajectory.hpp"

namespace dtlab::env {

// Gait-tracking surrogate dynamics. A sinusoidal reference gait per joint
// drives a first-order body-velocity response: the closer the applied action
// is to the reference, the faster the body moves forward.
struct EnvConfig {
  int joints = data::kActionDim;
  int horizon = 200;
  float dt = 0.05f;
  float v_max = 2.0f;
  float response = 0.2f;  // first-order velocity filter coefficient
  float gait_freq = 2.0f * std::numbers::pi_v<float>;  // rad/s
  float amplitude = 0.8f;
  std::array<float, data::kActionDim> phase_offsets = {
      0.0f, std::numbers::pi_v<float>, 0.0f, std::numbers::pi_v<float>,
      std::numbers::pi_v<float>, 0.0f, std::numbers::pi_v<float>, 0.0f};
  float sigma_v = 0.02f;
  float sigma_w = 0.05f;
  float bounce_gain = 0.5f;  // vertical velocity per action-mean change
  float wobble_gain = 0.3f;  // roll rate per unit tracking error
  // Per-episode randomization, drawn once at reset.
  float v_max_scale_min = 0.9f;
  float v_max_scale_max = 1.1f;
  float phase_shift_min = 0.0f;
  float phase_shift_max = 0.0f;

  float action_limit() const { return 1.5f * amplitude; }
  void validate() const;
};

struct EnvState {
  int step_index = 0;
  std::array<float, 3> vel{};
  std::array<float, 3> prev_vel{};
  data::Action prev_action{};
  float v_max_scale = 1.0f;
  float phase_shift = 0.0f;
  Rng rng{0};
};

// Joint targets of the reference gait at step t.
data::Action reference_gait(const EnvConfig& cfg, int t, float phase_shift);

// Zero velocities and actions; episode randomization drawn from the seed
// (v_max scale first, then phase shift).
std::pair<EnvState, data::State> reset(const EnvConfig& cfg, std::uint64_t seed);

struct StepResult {
  data::State obs;
  data::ImuReading imu;
};

// Advances one control step. Noise draw order per step: vx, vy, vz, wx, wy,
// wz. Throws once the horizon is reached. Actions outside the action box are
// clipped.
StepResult step(EnvState& env, const EnvConfig& cfg, const data::Action& action);

// Reference gait plus N(0, sigma_e) per joint, clipped to the action box.
data::Action expert_action(const EnvConfig& cfg, int t, float phase_shift,
                           float sigma_e, Rng& rng);

inline constexpr std::array<float, 4> kDefaultNoiseSchedule = {0.0f, 0.1f, 0.3f,
                                                               0.6f};

// n_envs expert episodes with the expert noise level cycling through the
// schedule; each trajectory is reward-augmented. Episode i uses env stream
// mix_seed(seed, 2i) and expert stream mix_seed(seed, 2i+1).
data::Dataset collect_demonstrations(int n_envs, const EnvConfig& cfg,
                                     std::span<const float> noise_schedule,
                                     std::uint64_t seed);

}  // namespace dtlab::env
