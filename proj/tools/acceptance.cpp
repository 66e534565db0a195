#include <CLI11.hpp>

#include <iostream>
#include <set>

#include "seqcr/verification.hpp"

namespace {

using namespace seqcr;

// Small two-epoch run over a cut-down default bundle: one supervised epoch,
// one with every unlabeled loss.
CheckOutcome determinism(const TrainConfig& base, const std::filesystem::path& workdir) {
  DataConfig dc = base.data;
  dc.labeled = 128;
  dc.unlabeled = 256;
  dc.test_per_split = 64;
  const DatasetBundle b = make_datasets(dc);
  TrainConfig c = base;
  c.apply_ablation("full");
  c.epochs = 2;
  c.warmup_epochs = 1;
  c.eval_limit = 0;
  return check_determinism(c, b, workdir / "determinism");
}

CheckOutcome ablation(const TrainConfig& base, const std::filesystem::path& workdir) {
  const DatasetBundle data = make_datasets(base.data);
  AblationPlan plan;
  plan.base = base;
  plan.out_dir = workdir / "ablation";
  const AblationResult r = run_ablation(plan, data, [](const std::string& m) {
    std::cerr << "  " << m << std::endl;
  });
  const CheckOutcome o = judge_ablation(r, plan.budget_seconds);
  std::vector<RunRecord> runs = r.runs;
  write_report(runs, workdir / "ablation" / "report");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria: one PASS/FAIL line each"};
  std::vector<int> only;
  std::string workdir = "acceptance_work";
  std::string config;
  app.add_option("--criterion", only, "Run only these criteria (1-9)")->check(CLI::Range(1, 9));
  app.add_option("--workdir", workdir, "Scratch directory for training runs");
  app.add_option("--config", config, "Training config for criteria 8 and 9")
      ->check(CLI::ExistingFile);
  CLI11_PARSE(app, argc, argv);

  const std::set<int> wanted = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9}
                                            : std::set<int>(only.begin(), only.end());
  TrainConfig base;
  if (!config.empty()) base = TrainConfig::load(config);

  const std::vector<std::pair<const char*, std::function<CheckOutcome()>>> criteria = {
      {"shortest path equals brute force", [] { return check_dp_oracle(); }},
      {"shortest path properties", [] { return check_dp_properties(); }},
      {"finite-difference gradient checks", [] { return check_gradients(); }},
      {"straight-through Gumbel", [] { return check_st_gumbel(); }},
      {"self-critical gradient unbiased", [] { return check_scst_unbiased(); }},
      {"EMA geometric identity", [] { return check_ema(); }},
      {"CCR closed form and gate", [] { return check_ccr_closed_form(); }},
      {"directional ablation", [&] { return ablation(base, workdir); }},
      {"determinism", [&] { return determinism(base, workdir); }},
  };
  bool all = true;
  for (int k = 1; k <= 9; ++k) {
    if (!wanted.contains(k)) continue;
    CheckOutcome o;
    try {
      o = criteria[k - 1].second();
    } catch (const std::exception& e) {
      o.passed = false;
      o.detail = std::string("error: ") + e.what();
    }
    std::cout << "criterion " << k << " (" << criteria[k - 1].first
              << "): " << (o.passed ? "PASS" : "FAIL") << " | " << o.detail << std::endl;
    all = all && o.passed;
  }
  return all ? 0 : 1;
}
