#include "dtlab/evalharness.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "dtlab/format.hpp"
#include "dtlab/tensor.hpp"

namespace dtlab::eval {

namespace {
double quantile_sorted(const std::vector<float>& sorted, double p) {
  const auto n = sorted.size();
  if (n == 1) return sorted[0];
  const double pos = p * static_cast<double>(n - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= n) return sorted[n - 1];
  return static_cast<double>(sorted[lo]) +
         frac * (static_cast<double>(sorted[lo + 1]) - static_cast<double>(sorted[lo]));
}
}  // namespace

RewardStats stats(std::vector<float> rewards) {
  if (rewards.empty()) throw std::invalid_argument("stats: empty reward list");
  RewardStats s;
  s.n = static_cast<int>(rewards.size());
  double sum = 0.0;
  for (float r : rewards) sum += r;
  s.mean = sum / static_cast<double>(rewards.size());
  std::vector<float> sorted = rewards;
  std::sort(sorted.begin(), sorted.end());
  s.median = quantile_sorted(sorted, 0.5);
  s.q1 = quantile_sorted(sorted, 0.25);
  s.q3 = quantile_sorted(sorted, 0.75);
  s.iqr = s.q3 - s.q1;
  const double lo = s.q1 - 1.5 * s.iqr;
  const double hi = s.q3 + 1.5 * s.iqr;
  for (float r : rewards)
    if (r < lo || r > hi) s.outliers.push_back(r);
  s.raw = std::move(rewards);
  return s;
}

RewardStats evaluate(const model::DTModel& m, const env::EnvConfig& env_cfg,
                     int n_episodes, std::uint64_t base_seed,
                     float target_return, int threads) {
  if (n_episodes < 1)
    throw std::invalid_argument("evaluate: n_episodes must be >= 1");
  std::vector<float> returns(static_cast<std::size_t>(n_episodes));
  if (threads <= 0)
    threads = static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min(threads, n_episodes));

  std::atomic<int> next{0};
  std::atomic<bool> failed{false};
  std::string error_msg;
  std::mutex error_mu;
  auto worker = [&] {
    nn::NoGradGuard no_grad;
    while (true) {
      const int i = next.fetch_add(1);
      if (i >= n_episodes || failed.load()) break;
      try {
        auto result = model::rollout(m, env_cfg,
                                     base_seed + static_cast<std::uint64_t>(i),
                                     target_return);
        returns[static_cast<std::size_t>(i)] = result.trajectory.total_return;
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!failed.exchange(true))
          error_msg = "episode " + std::to_string(i) + ": " + e.what();
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failed.load()) throw std::runtime_error("evaluate: " + error_msg);
  return stats(std::move(returns));
}

std::string summary_json(std::span<const StrategyReport> entries) {
  std::string out = "[\n";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    out += "  {\"strategy\":\"" + e.label + "\"";
    out += ",\"n\":" + std::to_string(e.stats.n);
    out += ",\"mean\":";
    append_number(out, e.stats.mean);
    out += ",\"median\":";
    append_number(out, e.stats.median);
    out += ",\"q1\":";
    append_number(out, e.stats.q1);
    out += ",\"q3\":";
    append_number(out, e.stats.q3);
    out += ",\"iqr\":";
    append_number(out, e.stats.iqr);
    out += ",\"outlier_count\":" + std::to_string(e.stats.outliers.size());
    out += ",\"file_bytes\":" + std::to_string(e.file_bytes);
    out += ",\"reduction_pct\":";
    append_number(out, e.reduction_pct);
    out += "}";
    if (i + 1 < entries.size()) out += ',';
    out += '\n';
  }
  out += "]\n";
  return out;
}

void emit_report(std::span<const StrategyReport> entries,
                 const std::filesystem::path& csv_path,
                 const std::filesystem::path& json_path) {
  if (entries.empty()) throw std::invalid_argument("emit_report: no entries");
  {
    std::ofstream csv(csv_path, std::ios::binary);
    if (!csv)
      throw std::runtime_error("emit_report: cannot open '" + csv_path.string() + "'");
    std::string buf = "strategy,seed,total_reward\n";
    for (const auto& e : entries) {
      for (std::size_t i = 0; i < e.stats.raw.size(); ++i) {
        buf += e.label;
        buf += ',';
        buf += std::to_string(e.base_seed + i);
        buf += ',';
        append_number(buf, e.stats.raw[i]);
        buf += '\n';
      }
    }
    csv << buf;
    if (!csv) throw std::runtime_error("emit_report: CSV write failed");
  }
  {
    std::ofstream js(json_path, std::ios::binary);
    if (!js)
      throw std::runtime_error("emit_report: cannot open '" + json_path.string() + "'");
    js << summary_json(entries);
    if (!js) throw std::runtime_error("emit_report: JSON write failed");
  }
}

}  // namespace dtlab::eval
