#include "dtlab/trajectory.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "dtlab/format.hpp"

namespace dtlab::data {

std::array<float, kStateDim> State::flatten() const {
  std::array<float, kStateDim> out{};
  std::size_t i = 0;
  for (float v : prev_action) out[i++] = v;
  for (float v : imu.lin_vel) out[i++] = v;
  for (float v : imu.ang_vel) out[i++] = v;
  for (float v : imu.lin_acc) out[i++] = v;
  return out;
}

float compute_reward(const ImuReading& imu, const Action& prev_action,
                     const Action& action) {
  for (const auto& comp : {imu.lin_vel, imu.ang_vel, imu.lin_acc})
    for (float v : comp)
      if (!std::isfinite(v))
        throw std::invalid_argument("compute_reward: non-finite IMU component");
  const float v_xy = std::sqrt(imu.lin_vel[0] * imu.lin_vel[0] +
                               imu.lin_vel[1] * imu.lin_vel[1]);
  const float v_z = imu.lin_vel[2];
  const float w_xy = std::sqrt(imu.ang_vel[0] * imu.ang_vel[0] +
                               imu.ang_vel[1] * imu.ang_vel[1]);
  const float w_z = imu.ang_vel[2];
  float da_sq = 0.0f;
  for (int j = 0; j < kActionDim; ++j) {
    const float diff = action[static_cast<std::size_t>(j)] -
                       prev_action[static_cast<std::size_t>(j)];
    da_sq += diff * diff;
  }
  const float delta_a = std::sqrt(da_sq);
  const float raw =
      2.0f * v_xy - 1.0f * v_z - 0.05f * w_xy + 0.5f * w_z - 0.01f * delta_a;
  return raw > 0.0f ? raw : 0.0f;
}

Trajectory augment_trajectory(std::vector<State> states,
                              std::vector<Action> actions) {
  if (states.size() != actions.size() || states.empty())
    throw std::invalid_argument(
        "augment_trajectory: need equal, non-zero state/action counts, got " +
        std::to_string(states.size()) + " vs " + std::to_string(actions.size()));
  Trajectory traj;
  traj.states = std::move(states);
  traj.actions = std::move(actions);
  traj.rewards.reserve(traj.states.size());
  float total = 0.0f;
  for (std::size_t t = 0; t < traj.states.size(); ++t) {
    const float r = compute_reward(traj.states[t].imu, traj.states[t].prev_action,
                                   traj.actions[t]);
    traj.rewards.push_back(r);
    total += r;
  }
  traj.total_return = total;
  return traj;
}

std::vector<float> returns_to_go(std::span<const float> rewards) {
  std::vector<float> rtg(rewards.size());
  float acc = 0.0f;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + acc;
    rtg[i] = acc;
  }
  return rtg;
}

namespace {

void append_row(std::string& out, std::span<const float> row) {
  out += '[';
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) out += ',';
    append_number(out, row[i]);
  }
  out += ']';
}

[[noreturn]] void line_error(std::size_t line_no, const std::string& what) {
  throw std::runtime_error("dataset line " + std::to_string(line_no) + ": " + what);
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw std::runtime_error("save_dataset: cannot open '" + path.string() + "'");
  std::string line;
  for (const auto& traj : dataset) {
    line.clear();
    line += "{\"version\":1,\"states\":[";
    for (std::size_t t = 0; t < traj.states.size(); ++t) {
      if (t) line += ',';
      append_row(line, traj.states[t].flatten());
    }
    line += "],\"actions\":[";
    for (std::size_t t = 0; t < traj.actions.size(); ++t) {
      if (t) line += ',';
      append_row(line, traj.actions[t]);
    }
    line += "],\"rewards\":";
    append_row(line, traj.rewards);
    line += ",\"total_return\":";
    append_number(line, traj.total_return);
    line += "}\n";
    out << line;
  }
  if (!out) throw std::runtime_error("save_dataset: write failed for '" + path.string() + "'");
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::runtime_error("load_dataset: cannot open '" + path.string() + "'");
  Dataset dataset;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json obj = nlohmann::json::parse(line, nullptr, false);
    if (obj.is_discarded()) line_error(line_no, "malformed JSON");
    for (const char* key : {"version", "states", "actions", "rewards", "total_return"})
      if (!obj.contains(key)) line_error(line_no, std::string("missing \"") + key + "\"");
    if (obj["version"].get<int>() != 1)
      line_error(line_no, "unsupported version " + obj["version"].dump());

    Trajectory traj;
    const auto& js = obj["states"];
    const auto& ja = obj["actions"];
    const auto& jr = obj["rewards"];
    if (!js.is_array() || !ja.is_array() || !jr.is_array())
      line_error(line_no, "states/actions/rewards must be arrays");
    if (js.size() != ja.size() || js.size() != jr.size())
      line_error(line_no, "length mismatch across states/actions/rewards");
    traj.states.reserve(js.size());
    traj.actions.reserve(ja.size());
    traj.rewards.reserve(jr.size());
    for (const auto& row : js) {
      if (!row.is_array() || row.size() != kStateDim)
        line_error(line_no, "state row must have " + std::to_string(kStateDim) +
                                " entries");
      State s;
      std::size_t i = 0;
      for (int j = 0; j < kActionDim; ++j)
        s.prev_action[static_cast<std::size_t>(j)] = row[i++].get<float>();
      for (int j = 0; j < 3; ++j) s.imu.lin_vel[static_cast<std::size_t>(j)] = row[i++].get<float>();
      for (int j = 0; j < 3; ++j) s.imu.ang_vel[static_cast<std::size_t>(j)] = row[i++].get<float>();
      for (int j = 0; j < 3; ++j) s.imu.lin_acc[static_cast<std::size_t>(j)] = row[i++].get<float>();
      traj.states.push_back(s);
    }
    for (const auto& row : ja) {
      if (!row.is_array() || row.size() != kActionDim)
        line_error(line_no, "action row must have " + std::to_string(kActionDim) +
                                " entries");
      Action a;
      for (std::size_t j = 0; j < kActionDim; ++j) a[j] = row[j].get<float>();
      traj.actions.push_back(a);
    }
    for (const auto& r : jr) {
      const float rv = r.get<float>();
      if (rv < 0.0f) line_error(line_no, "negative reward " + number_str(rv));
      traj.rewards.push_back(rv);
    }
    traj.total_return = obj["total_return"].get<float>();
    dataset.push_back(std::move(traj));
  }
  return dataset;
}

NormStats fit_norm_stats(const Dataset& dataset) {
  std::size_t count = 0;
  std::array<double, kStateDim> sum{};
  std::array<double, kStateDim> sum_sq{};
  for (const auto& traj : dataset) {
    for (const auto& state : traj.states) {
      const auto flat = state.flatten();
      for (int j = 0; j < kStateDim; ++j) {
        sum[static_cast<std::size_t>(j)] += flat[static_cast<std::size_t>(j)];
        sum_sq[static_cast<std::size_t>(j)] +=
            static_cast<double>(flat[static_cast<std::size_t>(j)]) *
            flat[static_cast<std::size_t>(j)];
      }
      ++count;
    }
  }
  if (count == 0)
    throw std::invalid_argument("fit_norm_stats: empty dataset");
  NormStats stats;
  for (int j = 0; j < kStateDim; ++j) {
    const auto i = static_cast<std::size_t>(j);
    const double mean = sum[i] / static_cast<double>(count);
    double var = sum_sq[i] / static_cast<double>(count) - mean * mean;
    if (var < 0.0) var = 0.0;  // rounding guard
    stats.mean[i] = static_cast<float>(mean);
    stats.std[i] = std::max(static_cast<float>(std::sqrt(var)), 1e-6f);
  }
  return stats;
}

std::array<float, kStateDim> apply_norm(const State& state, const NormStats& stats) {
  auto flat = state.flatten();
  for (int j = 0; j < kStateDim; ++j) {
    const auto i = static_cast<std::size_t>(j);
    flat[i] = (flat[i] - stats.mean[i]) / stats.std[i];
  }
  return flat;
}

}  // namespace dtlab::data
