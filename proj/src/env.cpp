#include "dtlab/env.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dtlab::env {

void EnvConfig::validate() const {
  if (joints != data::kActionDim)
    throw std::invalid_argument("EnvConfig: joints must equal " +
                                std::to_string(data::kActionDim));
  if (horizon < 1) throw std::invalid_argument("EnvConfig: horizon must be >= 1");
  for (float g : {dt, v_max, response, gait_freq, amplitude, sigma_v, sigma_w,
                  bounce_gain, wobble_gain, v_max_scale_min, v_max_scale_max,
                  phase_shift_min, phase_shift_max})
    if (!std::isfinite(g)) throw std::invalid_argument("EnvConfig: non-finite gain");
}

data::Action reference_gait(const EnvConfig& cfg, int t, float phase_shift) {
  data::Action ref;
  const float theta = cfg.gait_freq * static_cast<float>(t) * cfg.dt + phase_shift;
  for (std::size_t j = 0; j < ref.size(); ++j)
    ref[j] = cfg.amplitude * std::sin(theta + cfg.phase_offsets[j]);
  return ref;
}

std::pair<EnvState, data::State> reset(const EnvConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  EnvState env;
  env.rng = Rng(seed);
  env.v_max_scale = static_cast<float>(
      env.rng.range(cfg.v_max_scale_min, cfg.v_max_scale_max));
  env.phase_shift = static_cast<float>(
      env.rng.range(cfg.phase_shift_min, cfg.phase_shift_max));
  data::State obs;  // zero prev_action, zero IMU
  return {env, obs};
}

StepResult step(EnvState& env, const EnvConfig& cfg, const data::Action& action) {
  if (env.step_index >= cfg.horizon)
    throw std::runtime_error("step: episode finished at horizon " +
                             std::to_string(cfg.horizon));
  const float limit = cfg.action_limit();
  data::Action a = action;
  for (float& v : a) v = std::clamp(v, -limit, limit);

  const data::Action ref = reference_gait(cfg, env.step_index, env.phase_shift);
  float err = 0.0f;
  float mean_a = 0.0f, mean_prev = 0.0f;
  for (std::size_t j = 0; j < a.size(); ++j) {
    err += std::abs(a[j] - ref[j]);
    mean_a += a[j];
    mean_prev += env.prev_action[j];
  }
  err /= static_cast<float>(cfg.joints);
  mean_a /= static_cast<float>(cfg.joints);
  mean_prev /= static_cast<float>(cfg.joints);
  const float quality = std::max(0.0f, 1.0f - err / cfg.amplitude);

  env.prev_vel = env.vel;
  env.vel[0] = (1.0f - cfg.response) * env.vel[0] +
               cfg.response * cfg.v_max * env.v_max_scale * quality +
               env.rng.normal(cfg.sigma_v);
  env.vel[1] = env.rng.normal(cfg.sigma_v);
  env.vel[2] = cfg.bounce_gain * std::abs(mean_a - mean_prev) +
               env.rng.normal(cfg.sigma_v);

  data::ImuReading imu;
  imu.lin_vel = env.vel;
  imu.ang_vel[0] = cfg.wobble_gain * err + env.rng.normal(cfg.sigma_w);
  imu.ang_vel[1] = env.rng.normal(cfg.sigma_w);
  imu.ang_vel[2] = env.rng.normal(cfg.sigma_w);
  for (std::size_t i = 0; i < 3; ++i)
    imu.lin_acc[i] = (env.vel[i] - env.prev_vel[i]) / cfg.dt;

  env.prev_action = a;
  env.step_index += 1;

  StepResult result;
  result.obs.prev_action = a;
  result.obs.imu = imu;
  result.imu = imu;
  return result;
}

data::Action expert_action(const EnvConfig& cfg, int t, float phase_shift,
                           float sigma_e, Rng& rng) {
  if (sigma_e < 0.0f)
    throw std::invalid_argument("expert_action: negative noise level");
  data::Action a = reference_gait(cfg, t, phase_shift);
  const float limit = cfg.action_limit();
  for (float& v : a) v = std::clamp(v + rng.normal(sigma_e), -limit, limit);
  return a;
}

data::Dataset collect_demonstrations(int n_envs, const EnvConfig& cfg,
                                     std::span<const float> noise_schedule,
                                     std::uint64_t seed) {
  if (n_envs < 1)
    throw std::invalid_argument("collect_demonstrations: n_envs must be >= 1");
  if (noise_schedule.empty())
    throw std::invalid_argument("collect_demonstrations: empty noise schedule");
  data::Dataset dataset;
  dataset.reserve(static_cast<std::size_t>(n_envs));
  for (int i = 0; i < n_envs; ++i) {
    const float sigma_e =
        noise_schedule[static_cast<std::size_t>(i) % noise_schedule.size()];
    auto [env, obs] = reset(cfg, mix_seed(seed, 2 * static_cast<std::uint64_t>(i)));
    Rng expert_rng(mix_seed(seed, 2 * static_cast<std::uint64_t>(i) + 1));
    std::vector<data::State> states;
    std::vector<data::Action> actions;
    states.reserve(static_cast<std::size_t>(cfg.horizon));
    actions.reserve(static_cast<std::size_t>(cfg.horizon));
    for (int t = 0; t < cfg.horizon; ++t) {
      const data::Action a =
          expert_action(cfg, t, env.phase_shift, sigma_e, expert_rng);
      states.push_back(obs);
      actions.push_back(a);
      obs = step(env, cfg, a).obs;
    }
    dataset.push_back(data::augment_trajectory(std::move(states), std::move(actions)));
  }
  return dataset;
}

}  // namespace dtlab::env
