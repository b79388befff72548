#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dtlab/env.hpp"

using namespace dtlab;

namespace {

env::EnvConfig quiet_config() {
  env::EnvConfig cfg;
  cfg.sigma_v = 0.0f;
  cfg.sigma_w = 0.0f;
  cfg.v_max_scale_min = 1.0f;
  cfg.v_max_scale_max = 1.0f;
  return cfg;
}

float rollout_return(const env::EnvConfig& cfg, std::uint64_t seed, float sigma_e,
                     std::uint64_t expert_seed) {
  auto [state, obs] = env::reset(cfg, seed);
  Rng expert_rng(expert_seed);
  std::vector<data::State> states;
  std::vector<data::Action> actions;
  for (int t = 0; t < cfg.horizon; ++t) {
    auto a = env::expert_action(cfg, t, state.phase_shift, sigma_e, expert_rng);
    states.push_back(obs);
    actions.push_back(a);
    obs = env::step(state, cfg, a).obs;
  }
  return data::augment_trajectory(std::move(states), std::move(actions))
      .total_return;
}

}  // namespace

TEST_CASE("reset: determinism and randomization draws") {
  env::EnvConfig cfg;
  auto [e1, s1] = env::reset(cfg, 123);
  auto [e2, s2] = env::reset(cfg, 123);
  CHECK(s1.flatten() == s2.flatten());
  CHECK(e1.v_max_scale == e2.v_max_scale);
  CHECK(e1.phase_shift == e2.phase_shift);

  auto [e0, s0] = env::reset(cfg, 0);
  CHECK(e0.step_index == 0);
  CHECK(s0.imu.lin_vel == std::array<float, 3>{0.0f, 0.0f, 0.0f});
  CHECK(s0.prev_action == data::Action{});

  env::EnvConfig randomized;
  randomized.phase_shift_max = 2.0f * std::numbers::pi_v<float>;
  auto [ea, sa] = env::reset(randomized, 1);
  auto [eb, sb] = env::reset(randomized, 2);
  CHECK(ea.phase_shift != eb.phase_shift);
  CHECK(ea.v_max_scale != eb.v_max_scale);
}

TEST_CASE("step: closed-form velocity recursion under perfect tracking") {
  auto cfg = quiet_config();
  auto [state, obs] = env::reset(cfg, 5);
  // Perfect tracking: vx_k = v_max * (1 - (1-alpha)^k), computed in 64-bit.
  for (int k = 1; k <= cfg.horizon; ++k) {
    auto a = env::reference_gait(cfg, state.step_index, state.phase_shift);
    obs = env::step(state, cfg, a).obs;
    const double expect =
        static_cast<double>(cfg.v_max) *
        (1.0 - std::pow(1.0 - static_cast<double>(cfg.response), k));
    CHECK(obs.imu.lin_vel[0] ==
          doctest::Approx(static_cast<float>(expect)).epsilon(2e-5));
    CHECK(obs.imu.ang_vel[0] == 0.0f);  // zero tracking error, zero noise
  }
  CHECK_THROWS_WITH_AS(env::step(state, cfg, data::Action{}),
                       doctest::Contains("finished"), std::runtime_error);
}

TEST_CASE("step: zero-action rollout matches scalar recomputation") {
  auto cfg = quiet_config();
  auto [state, obs] = env::reset(cfg, 9);
  double vx = 0.0;
  for (int t = 0; t < 50; ++t) {
    obs = env::step(state, cfg, data::Action{}).obs;
    // Scalar oracle: e_t = mean_j |ref_j|, g = max(0, 1 - e/A), first-order vx.
    double err = 0.0;
    for (int j = 0; j < cfg.joints; ++j) {
      const double theta = static_cast<double>(cfg.gait_freq) * t *
                               static_cast<double>(cfg.dt) +
                           static_cast<double>(state.phase_shift) +
                           static_cast<double>(
                               cfg.phase_offsets[static_cast<std::size_t>(j)]);
      err += std::abs(static_cast<double>(cfg.amplitude) * std::sin(theta));
    }
    err /= cfg.joints;
    const double g = std::max(0.0, 1.0 - err / cfg.amplitude);
    vx = (1.0 - cfg.response) * vx + cfg.response * cfg.v_max * g;
    CHECK(obs.imu.lin_vel[0] == doctest::Approx(vx).epsilon(1e-4));
    CHECK(obs.imu.ang_vel[0] ==
          doctest::Approx(cfg.wobble_gain * err).epsilon(1e-4));
  }
}

TEST_CASE("step: determinism and action clipping") {
  env::EnvConfig cfg;  // default noise on
  data::Action wild;
  wild.fill(50.0f);
  auto run = [&] {
    auto [state, obs] = env::reset(cfg, 77);
    std::vector<float> trace;
    for (int t = 0; t < 10; ++t) {
      auto r = env::step(state, cfg, wild);
      trace.insert(trace.end(), r.imu.lin_vel.begin(), r.imu.lin_vel.end());
      trace.insert(trace.end(), r.imu.ang_vel.begin(), r.imu.ang_vel.end());
      trace.insert(trace.end(), r.imu.lin_acc.begin(), r.imu.lin_acc.end());
      for (float v : r.obs.prev_action) trace.push_back(v);
    }
    return trace;
  };
  const auto t1 = run();
  const auto t2 = run();
  CHECK(std::memcmp(t1.data(), t2.data(), t1.size() * sizeof(float)) == 0);
  // Clipped to the action box.
  auto [state, obs] = env::reset(cfg, 77);
  auto r = env::step(state, cfg, wild);
  for (float v : r.obs.prev_action) CHECK(v == cfg.action_limit());
}

TEST_CASE("expert: exact reference at zero noise") {
  env::EnvConfig cfg;
  cfg.phase_shift_max = 2.0f * std::numbers::pi_v<float>;
  auto [state, obs] = env::reset(cfg, 3);
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const auto a = env::expert_action(cfg, t, state.phase_shift, 0.0f, rng);
    const auto ref = env::reference_gait(cfg, t, state.phase_shift);
    CHECK(a == ref);
  }
  CHECK_THROWS_AS(env::expert_action(cfg, 0, 0.0f, -1.0f, rng),
                  std::invalid_argument);
}

TEST_CASE("expert: beats every constant action on total return") {
  auto cfg = quiet_config();
  cfg.horizon = 120;
  const float expert_total = rollout_return(cfg, 21, 0.0f, 500);
  for (float c = -1.2f; c <= 1.21f; c += 0.3f) {
    auto [state, obs] = env::reset(cfg, 21);
    std::vector<data::State> states;
    std::vector<data::Action> actions;
    data::Action constant;
    constant.fill(c);
    for (int t = 0; t < cfg.horizon; ++t) {
      states.push_back(obs);
      actions.push_back(constant);
      obs = env::step(state, cfg, constant).obs;
    }
    const float const_total =
        data::augment_trajectory(std::move(states), std::move(actions))
            .total_return;
    CHECK(expert_total > const_total);
  }
}

TEST_CASE("expert: mean gait quality degrades with noise level") {
  env::EnvConfig cfg;  // default noise and randomization
  double clean = 0.0, noisy = 0.0;
  const int n = 100;
  for (int i = 0; i < n; ++i) {
    clean += rollout_return(cfg, 1000 + static_cast<std::uint64_t>(i), 0.0f,
                            5000 + static_cast<std::uint64_t>(i));
    noisy += rollout_return(cfg, 1000 + static_cast<std::uint64_t>(i), 0.6f,
                            5000 + static_cast<std::uint64_t>(i));
  }
  CHECK(noisy / n < clean / n);
}

TEST_CASE("reward ordering: mean return non-increasing in expert noise") {
  env::EnvConfig cfg;
  const std::array<float, 4> levels = {0.0f, 0.1f, 0.3f, 0.6f};
  std::array<double, 4> means{};
  const int n = 100;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    for (int i = 0; i < n; ++i)
      means[l] += rollout_return(cfg, 40000 + static_cast<std::uint64_t>(i),
                                 levels[l], 90000 + static_cast<std::uint64_t>(i));
    means[l] /= n;
  }
  CHECK(means[0] >= means[1]);
  CHECK(means[1] >= means[2]);
  CHECK(means[2] >= means[3]);
}

TEST_CASE("velocity bound holds across seeds and policies") {
  env::EnvConfig cfg;
  const float bound = cfg.v_max * 1.1f + 5.0f * cfg.sigma_v;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto [state, obs] = env::reset(cfg, seed);
    Rng expert_rng(seed + 999);
    Rng chooser(seed);
    for (int t = 0; t < cfg.horizon; ++t) {
      data::Action a;
      if (seed % 2 == 0) {
        a = env::expert_action(cfg, t, state.phase_shift, 0.0f, expert_rng);
      } else {
        for (auto& v : a) v = 2.4f * chooser.uniform() - 1.2f;
      }
      obs = env::step(state, cfg, a).obs;
      CHECK(std::abs(obs.imu.lin_vel[0]) <= bound);
    }
  }
}

TEST_CASE("collect: schedule, sizes, noiseless optimality, byte determinism") {
  env::EnvConfig cfg;
  cfg.horizon = 30;
  auto ds = env::collect_demonstrations(4, cfg, env::kDefaultNoiseSchedule, 11);
  REQUIRE(ds.size() == 4);
  for (const auto& traj : ds) CHECK(traj.length() == 30);

  // Episode 0 carries noise level 0: actions equal the reference bitwise.
  {
    auto [state, obs] = env::reset(cfg, mix_seed(11, 0));
    for (int t = 0; t < cfg.horizon; ++t) {
      const auto ref = env::reference_gait(cfg, t, state.phase_shift);
      CHECK(ds[0].actions[static_cast<std::size_t>(t)] == ref);
    }
    // Episode 1 carries sigma_e = 0.1: some action must differ.
    bool differs = false;
    for (int t = 0; t < cfg.horizon && !differs; ++t)
      differs = ds[1].actions[static_cast<std::size_t>(t)] !=
                env::reference_gait(cfg, t, state.phase_shift);
    CHECK(differs);
  }

  // Noiseless configuration: the clean expert owns the dataset maximum.
  auto quiet = quiet_config();
  quiet.horizon = 60;
  auto qds = env::collect_demonstrations(40, quiet, env::kDefaultNoiseSchedule, 3);
  float best_clean = 0.0f, best_all = 0.0f;
  for (std::size_t i = 0; i < qds.size(); ++i) {
    best_all = std::max(best_all, qds[i].total_return);
    if (i % 4 == 0) best_clean = std::max(best_clean, qds[i].total_return);
  }
  CHECK(best_clean == best_all);

  // Same seed, same bytes on disk.
  namespace fs = std::filesystem;
  const auto p1 = fs::temp_directory_path() / "dtlab_env_a.jsonl";
  const auto p2 = fs::temp_directory_path() / "dtlab_env_b.jsonl";
  data::save_dataset(ds, p1);
  data::save_dataset(env::collect_demonstrations(4, cfg, env::kDefaultNoiseSchedule, 11),
                     p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());
  CHECK(!s1.str().empty());
  fs::remove(p1);
  fs::remove(p2);

  CHECK_THROWS_AS(env::collect_demonstrations(0, cfg, env::kDefaultNoiseSchedule, 1),
                  std::invalid_argument);
}
