#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dtlab/dtmodel.hpp"

namespace dtlab::eval {

// Box-plot statistics over episode returns. Quantiles use linear
// interpolation on order statistics (position p * (n - 1)); outliers sit
// outside [q1 - 1.5*iqr, q3 + 1.5*iqr].
struct RewardStats {
  int n = 0;
  double mean = 0.0;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double iqr = 0.0;
  std::vector<float> outliers;
  std::vector<float> raw;  // input order preserved
};

RewardStats stats(std::vector<float> rewards);

// Rollouts on env seeds base_seed .. base_seed+n-1, collecting total returns
// in seed order. Episodes are independent and may run on several threads; the
// result is identical either way. threads == 0 picks the hardware count.
RewardStats evaluate(const model::DTModel& m, const env::EnvConfig& env_cfg,
                     int n_episodes, std::uint64_t base_seed,
                     float target_return, int threads = 0);

struct StrategyReport {
  std::string label;
  RewardStats stats;
  std::uint64_t file_bytes = 0;
  double reduction_pct = 0.0;
  std::uint64_t base_seed = 0;
};

// CSV: header strategy,seed,total_reward plus one row per episode.
// JSON: array of per-strategy summaries with a stable field order.
void emit_report(std::span<const StrategyReport> entries,
                 const std::filesystem::path& csv_path,
                 const std::filesystem::path& json_path);

std::string summary_json(std::span<const StrategyReport> entries);

}  // namespace dtlab::eval
