#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dtlab/rng.hpp"
#include "dtlab/trajectory.hpp"

using namespace dtlab;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
  auto p = fs::temp_directory_path() / name;
  std::error_code ec;
  fs::remove(p, ec);
  return p;
}

data::Trajectory random_trajectory(Rng& rng, std::size_t len) {
  std::vector<data::State> states(len);
  std::vector<data::Action> actions(len);
  for (std::size_t t = 0; t < len; ++t) {
    for (auto& v : states[t].prev_action) v = rng.normal(0.5f);
    for (auto& v : states[t].imu.lin_vel) v = rng.normal(1.0f);
    for (auto& v : states[t].imu.ang_vel) v = rng.normal(0.5f);
    for (auto& v : states[t].imu.lin_acc) v = rng.normal(2.0f);
    for (auto& v : actions[t]) v = rng.normal(0.5f);
  }
  return data::augment_trajectory(std::move(states), std::move(actions));
}

}  // namespace

TEST_CASE("compute_reward: direct substitutions") {
  data::ImuReading imu;
  data::Action zero{};

  imu.lin_vel = {1.0f, 0.0f, 0.0f};
  CHECK(data::compute_reward(imu, zero, zero) == 2.0f);

  data::ImuReading down;
  down.lin_vel = {0.0f, 0.0f, 1.0f};  // raw -1.0, clamped
  CHECK(data::compute_reward(down, zero, zero) == 0.0f);

  data::ImuReading fwd_yaw;
  fwd_yaw.lin_vel = {1.0f, 0.0f, 0.0f};
  fwd_yaw.ang_vel = {0.0f, 0.0f, 1.0f};
  data::Action small{};
  small.fill(0.1f);
  CHECK(data::compute_reward(fwd_yaw, zero, small) ==
        doctest::Approx(2.4971716f).epsilon(1e-6));

  data::ImuReading bad;
  bad.lin_acc[1] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(data::compute_reward(bad, zero, zero), std::invalid_argument);
}

TEST_CASE("compute_reward: translation invariance in absolute joint position") {
  // Dyadic values keep the shifted differences bitwise identical.
  Rng rng(4);
  data::ImuReading imu;
  imu.lin_vel = {0.5f, 0.25f, -0.125f};
  imu.ang_vel = {0.0625f, -0.5f, 0.25f};
  for (int trial = 0; trial < 50; ++trial) {
    data::Action prev, act, prev_shift, act_shift;
    const float shift = 0.5f * static_cast<float>(rng.index(5));
    for (std::size_t j = 0; j < prev.size(); ++j) {
      prev[j] = static_cast<float>(static_cast<int>(rng.index(128)) - 64) / 64.0f;
      act[j] = static_cast<float>(static_cast<int>(rng.index(128)) - 64) / 64.0f;
      prev_shift[j] = prev[j] + shift;
      act_shift[j] = act[j] + shift;
    }
    CHECK(data::compute_reward(imu, prev, act) ==
          data::compute_reward(imu, prev_shift, act_shift));
  }
}

TEST_CASE("augment_trajectory: zero episodes, single step, length mismatch") {
  std::vector<data::State> states(3);
  std::vector<data::Action> actions(3);
  auto traj = data::augment_trajectory(states, actions);
  CHECK(traj.rewards == std::vector<float>{0.0f, 0.0f, 0.0f});
  CHECK(traj.total_return == 0.0f);

  std::vector<data::State> one(1);
  one[0].imu.lin_vel = {1.0f, 0.0f, 0.0f};
  auto single = data::augment_trajectory(one, std::vector<data::Action>(1));
  CHECK(single.total_return == 2.0f);

  CHECK_THROWS_AS(
      data::augment_trajectory(std::vector<data::State>(2),
                               std::vector<data::Action>(3)),
      std::invalid_argument);
}

TEST_CASE("augment_trajectory: clamp invariant on random trajectories") {
  Rng rng(31);
  for (int i = 0; i < 20; ++i) {
    auto traj = random_trajectory(rng, 40);
    for (float r : traj.rewards) CHECK(r >= 0.0f);
  }
}

TEST_CASE("returns_to_go: examples, telescoping, monotonicity") {
  const std::vector<float> r = {1.0f, 2.0f, 3.0f};
  CHECK(data::returns_to_go(r) == std::vector<float>{6.0f, 5.0f, 3.0f});
  CHECK(data::returns_to_go(std::vector<float>{}).empty());
  CHECK(data::returns_to_go(std::vector<float>{5.0f}) == std::vector<float>{5.0f});

  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    auto traj = random_trajectory(rng, 64);
    const auto rtg = data::returns_to_go(traj.rewards);
    for (std::size_t t = 0; t + 1 < rtg.size(); ++t) {
      // Exact recurrence: rtg[t] is defined as rewards[t] + rtg[t+1].
      CHECK(rtg[t] == traj.rewards[t] + rtg[t + 1]);
      CHECK(rtg[t] >= rtg[t + 1]);
    }
    // Left-to-right total vs right-to-left suffix agree to float rounding.
    CHECK(rtg[0] == doctest::Approx(traj.total_return).epsilon(1e-5));
  }
}

TEST_CASE("dataset: save/load round trip is value-exact") {
  Rng rng(7);
  data::Dataset ds;
  for (int i = 0; i < 3; ++i) ds.push_back(random_trajectory(rng, 10));
  const auto path = temp_file("dtlab_traj_roundtrip.jsonl");
  data::save_dataset(ds, path);
  const auto loaded = data::load_dataset(path);
  REQUIRE(loaded.size() == ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(loaded[i].total_return == ds[i].total_return);
    CHECK(loaded[i].rewards == ds[i].rewards);
    REQUIRE(loaded[i].states.size() == ds[i].states.size());
    for (std::size_t t = 0; t < ds[i].states.size(); ++t) {
      CHECK(loaded[i].states[t].flatten() == ds[i].states[t].flatten());
      CHECK(loaded[i].actions[t] == ds[i].actions[t]);
    }
  }
  fs::remove(path);
}

TEST_CASE("dataset: empty file, schema violations, version checks") {
  const auto path = temp_file("dtlab_traj_schema.jsonl");
  { std::ofstream out(path); }
  CHECK(data::load_dataset(path).empty());

  {
    std::ofstream out(path);
    out << R"({"version":1,"states":[],"rewards":[],"total_return":0})" << "\n";
  }
  CHECK_THROWS_WITH_AS(data::load_dataset(path),
                       doctest::Contains("line 1"), std::runtime_error);
  CHECK_THROWS_WITH_AS(data::load_dataset(path),
                       doctest::Contains("actions"), std::runtime_error);

  {
    std::ofstream out(path);
    out << R"({"version":1,"states":[],"actions":[],"rewards":[],"total_return":0})"
        << "\n";
    out << "{not json\n";
  }
  CHECK_THROWS_WITH_AS(data::load_dataset(path),
                       doctest::Contains("line 2"), std::runtime_error);

  {
    std::ofstream out(path);
    out << R"({"version":9,"states":[],"actions":[],"rewards":[],"total_return":0})"
        << "\n";
  }
  CHECK_THROWS_WITH_AS(data::load_dataset(path),
                       doctest::Contains("version"), std::runtime_error);

  {
    std::ofstream out(path);
    out << R"({"version":1,"states":[[0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0]],)"
        << R"("actions":[[0,0,0,0,0,0,0,0]],"rewards":[-1],"total_return":-1})"
        << "\n";
  }
  CHECK_THROWS_WITH_AS(data::load_dataset(path),
                       doctest::Contains("negative reward"), std::runtime_error);
  fs::remove(path);
}

TEST_CASE("norm stats: floor, two-point example, zero at the mean") {
  data::Dataset constant;
  {
    std::vector<data::State> states(4);
    for (auto& s : states) s.prev_action.fill(0.25f);
    constant.push_back(
        data::augment_trajectory(states, std::vector<data::Action>(4)));
  }
  const auto stats = data::fit_norm_stats(constant);
  for (int j = 0; j < data::kStateDim; ++j)
    CHECK(stats.std[static_cast<std::size_t>(j)] == 1e-6f);
  const auto normalized = data::apply_norm(constant[0].states[0], stats);
  for (float v : normalized) CHECK(v == 0.0f);

  // Two states: all-zero and all-two -> mean 1, std 1, normalized -1/+1.
  data::Dataset two;
  {
    std::vector<data::State> states(2);
    states[1].prev_action.fill(2.0f);
    states[1].imu.lin_vel.fill(2.0f);
    states[1].imu.ang_vel.fill(2.0f);
    states[1].imu.lin_acc.fill(2.0f);
    two.push_back(data::augment_trajectory(states, std::vector<data::Action>(2)));
  }
  const auto stats2 = data::fit_norm_stats(two);
  const auto lo = data::apply_norm(two[0].states[0], stats2);
  const auto hi = data::apply_norm(two[0].states[1], stats2);
  for (int j = 0; j < data::kStateDim; ++j) {
    CHECK(stats2.mean[static_cast<std::size_t>(j)] == doctest::Approx(1.0f));
    CHECK(lo[static_cast<std::size_t>(j)] == doctest::Approx(-1.0f));
    CHECK(hi[static_cast<std::size_t>(j)] == doctest::Approx(1.0f));
  }

  CHECK_THROWS_AS(data::fit_norm_stats({}), std::invalid_argument);
}
