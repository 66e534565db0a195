#pragma once

// Self-contained property and oracle checks over the library, shared by the
// acceptance binary and the command-line tool.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "seqcr/report.hpp"

namespace seqcr {

struct CheckOutcome {
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

/// shortest_path against brute-force enumeration on random matrices with
/// each side drawn from 1..max_dim.
CheckOutcome check_dp_oracle(std::size_t matrices = 1000, std::size_t max_dim = 6,
                             std::uint64_t seed = 1);

/// Monotonicity, transpose symmetry and zero iff a zero-cost path exists.
CheckOutcome check_dp_properties(std::size_t instances = 500, std::uint64_t seed = 2);

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  bool passed = false;
};

/// Every catalog op at `seeds` random inputs, then CE, CCR and WVCR through
/// a small recognizer.
std::vector<GradCheckEntry> gradcheck_suite(std::size_t seeds = 10, double tolerance = 1e-4);
CheckOutcome check_gradients(std::size_t seeds = 10, double tolerance = 1e-4);

/// One-hot forward, sampling frequencies within 3 binomial standard
/// deviations per class, straight-through gradient equal to the softmax path.
CheckOutcome check_st_gumbel(std::size_t draws = 10000, std::uint64_t seed = 4);

/// Monte-Carlo self-critical gradient against exhaustive enumeration on a
/// two-character alphabet with two decoding steps, plus the zero-advantage
/// case.
CheckOutcome check_scst_unbiased(std::size_t samples = 50000, std::uint64_t seed = 5);

/// Geometric contraction of the teacher-student distance and the zero
/// retention copy.
CheckOutcome check_ema(std::size_t steps = 100, std::uint64_t seed = 6);

/// The closed-form KL example and bit-zero gradients on gated-off rows.
CheckOutcome check_ccr_closed_form(std::uint64_t seed = 7);

/// Two identical runs of `config` on `data` write byte-identical metrics,
/// and every split of `data` round-trips byte-identically through disk.
CheckOutcome check_determinism(const TrainConfig& config, const DatasetBundle& data,
                               const std::filesystem::path& workdir);

struct AblationPlan {
  TrainConfig base;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<std::string> ablations = {"sup", "ccr", "+wvcr", "full"};
  /// Directory for per-run outputs; `<ablation>_seed<k>` subdirectories.
  std::filesystem::path out_dir;
  /// Per-run wall clock budget in seconds.
  double budget_seconds = 1800.0;
};

struct AblationResult {
  std::vector<RunRecord> runs;
  std::vector<GridRow> grid;
  double max_run_seconds = 0.0;
};

/// Trains every (ablation, seed) pair on `data`; each run writes metrics,
/// config and checkpoint under the plan's output directory.
AblationResult run_ablation(const AblationPlan& plan, const DatasetBundle& data,
                            const std::function<void(const std::string&)>& log = {});

/// sup < ccr < +wvcr <= full on the median three-split mean, ccr at least
/// 0.05 above sup on distorted, full strictly best on occluded, every run
/// within budget.
CheckOutcome judge_ablation(const AblationResult& result, double budget_seconds);

}  // namespace seqcr
