#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace dtlab::data {

inline constexpr int kActionDim = 8;
inline constexpr int kImuDim = 9;
inline constexpr int kStateDim = kActionDim + kImuDim;  // 17

using Action = std::array<float, kActionDim>;

// Simulated 9-axis inertial readout: body-frame linear velocity, angular
// velocity, and linear acceleration.
struct ImuReading {
  std::array<float, 3> lin_vel{};
  std::array<float, 3> ang_vel{};
  std::array<float, 3> lin_acc{};
};

// Observation fed to the policy: the previously applied joint targets plus
// the IMU readout. Flat layout: [prev_action(8), lin_vel(3), ang_vel(3),
// lin_acc(3)].
struct State {
  Action prev_action{};
  ImuReading imu{};

  std::array<float, kStateDim> flatten() const;
};

struct Trajectory {
  std::vector<State> states;
  std::vector<Action> actions;
  std::vector<float> rewards;     // all >= 0
  float total_return = 0.0f;      // left-to-right float32 sum of rewards

  std::size_t length() const { return states.size(); }
};

using Dataset = std::vector<Trajectory>;

// Per-dimension z-score statistics over flattened states.
struct NormStats {
  std::array<float, kStateDim> mean{};
  std::array<float, kStateDim> std{};  // floored at 1e-6
};

// Reward for one transition:
//   raw = 2*v_xy - v_z - 0.05*w_xy + 0.5*w_z - 0.01*|a - a_prev|_2
// with v_xy, w_xy the planar magnitudes and v_z, w_z signed components.
// Negative raw values clamp to zero. Non-finite IMU input throws.
float compute_reward(const ImuReading& imu, const Action& prev_action,
                     const Action& action);

// Assigns rewards to a collected (state, action) sequence and totals them.
Trajectory augment_trajectory(std::vector<State> states,
                              std::vector<Action> actions);

// rtg[t] = rewards[t] + rtg[t+1], accumulated right to left in float32 so the
// telescoping identity holds exactly.
std::vector<float> returns_to_go(std::span<const float> rewards);

// JSON-lines persistence; one trajectory object per line, floats emitted with
// round-trip-exact formatting. load(save(d)) reproduces d value-for-value.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

NormStats fit_norm_stats(const Dataset& dataset);
std::array<float, kStateDim> apply_norm(const State& state, const NormStats& stats);

}  // namespace dtlab::data
