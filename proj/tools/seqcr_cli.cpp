#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>

#include "seqcr/report.hpp"
#include "seqcr/semantics.hpp"
#include "seqcr/verification.hpp"

namespace {

using namespace seqcr;

enum class Verbosity { Quiet, Info, Debug };

// SEQCR_LOG = quiet | info | debug
Verbosity verbosity() {
  const char* v = std::getenv("SEQCR_LOG");
  if (!v) return Verbosity::Info;
  const std::string s(v);
  if (s == "quiet") return Verbosity::Quiet;
  if (s == "debug") return Verbosity::Debug;
  return Verbosity::Info;
}

void info(const std::string& msg) {
  if (verbosity() != Verbosity::Quiet) std::cerr << msg << '\n';
}

void print_outcome(const std::string& name, const CheckOutcome& o) {
  std::cout << name << ": " << (o.passed ? "PASS" : "FAIL") << " | " << o.detail << '\n';
}

void require_matching(const TrainConfig& c, const DatasetBundle& b) {
  if (b.labeled_train.height != c.model.image_height || b.labeled_train.width != c.model.image_width) {
    throw std::invalid_argument("dataset images are " + std::to_string(b.labeled_train.height) +
                                "x" + std::to_string(b.labeled_train.width) +
                                " but the model expects " + std::to_string(c.model.image_height) +
                                "x" + std::to_string(c.model.image_width));
  }
}

int generate_data(const std::string& config_path, const std::string& out, unsigned threads) {
  const TrainConfig c = TrainConfig::load(config_path);
  const DatasetBundle b = make_datasets(c.data, threads);
  save_bundle(out, b);
  for (auto name : DatasetBundle::kSplitNames) {
    std::cout << name << ": " << b.split(name).size() << " samples\n";
  }
  std::cout << "lexicon: " << b.train_lexicon.size() << " train words, " << b.test_lexicon.size()
            << " test words\n";
  return 0;
}

int run_train(const std::string& config_path, const std::string& data, const std::string& out,
              const std::string& ablation) {
  TrainConfig c = TrainConfig::load(config_path);
  if (!ablation.empty()) c.apply_ablation(ablation);
  c.validate();
  const DatasetBundle b = load_bundle(data);
  require_matching(c, b);
  TrainOptions opt;
  opt.out_dir = out;
  opt.on_epoch = [](const MetricsRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "epoch %zu step %zu: ce %.4f ccr %.4f wvcr %.4f scst %.4f gate %.2f lr %.2e | "
                  "acc clean %.3f distorted %.3f occluded %.3f",
                  r.epoch, r.step, r.ce, r.ccr, r.wvcr, r.scst, r.gate_frac, r.lr, r.acc_clean,
                  r.acc_distorted, r.acc_occluded);
    info(buf);
  };
  if (verbosity() == Verbosity::Debug) {
    opt.on_step = [](std::size_t step, const LossBreakdown& b) {
      std::cerr << "step " << step << ": total " << b.total << " ce " << b.ce << " ccr " << b.ccr
                << " wvcr " << b.wvcr << " scst " << b.scst << " gate " << b.gate_pass_fraction
                << '\n';
    };
  }
  try {
    const TrainResult r = train(c, b, opt);
    std::cout << "trained " << r.steps << " steps; metrics and checkpoint in " << out << '\n';
  } catch (const TrainingHalted& e) {
    std::cerr << "halted: " << e.what() << "; batch record in " << out << "/halt.txt\n";
    return 3;
  }
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& data, const std::string& split,
             bool use_teacher) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const TrainConfig c = TrainConfig::parse(ck.config_text);
  if (c.digest() != ck.config_digest) {
    throw std::runtime_error("checkpoint config digest does not match its config text");
  }
  if (use_teacher && !ck.teacher) throw std::runtime_error("checkpoint has no teacher");
  const DatasetBundle b = load_bundle(data);
  require_matching(c, b);
  const Recognizer rec(c.model);
  const Dataset& d = b.split(split);
  const double acc = evaluate(rec, use_teacher ? *ck.teacher : ck.student, d);
  std::printf("%s accuracy on %s (%zu samples): %.4f\n", use_teacher ? "teacher" : "student",
              split.c_str(), d.size(), acc);
  return 0;
}

int run_report(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<RunRecord> runs;
  for (const auto& d : dirs) runs.push_back(load_run(d));
  const ReportOutput r = write_report(runs, out);
  std::cout << r.summary;
  for (const auto& f : r.files) info("wrote " + f.string());
  return 0;
}

int run_gradcheck(std::size_t seeds) {
  const auto entries = gradcheck_suite(seeds);
  bool ok = true;
  for (const auto& e : entries) {
    std::printf("%-24s max rel error %.3e  %s\n", e.name.c_str(), e.max_rel_error,
                e.passed ? "ok" : "FAIL");
    ok = ok && e.passed;
  }
  return ok ? 0 : 1;
}

int run_oracle(std::size_t samples) {
  const CheckOutcome a = check_dp_oracle();
  const CheckOutcome b = check_dp_properties();
  const CheckOutcome c = check_scst_unbiased(samples);
  print_outcome("shortest path vs brute force", a);
  print_outcome("shortest path properties", b);
  print_outcome("self-critical gradient vs enumeration", c);
  return a.passed && b.passed && c.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised sequence recognizer: data, training, evaluation and checks"};
  app.require_subcommand(1);

  std::string config, out, data, ablation, checkpoint, split;
  unsigned threads = 1;
  auto* gen = app.add_subcommand("generate-data", "Render the synthetic and real-domain datasets");
  gen->add_option("--config", config, "Config file (data_* keys)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--threads", threads, "Rendering threads")->check(CLI::PositiveNumber);

  auto* tr = app.add_subcommand("train", "Train one run");
  tr->add_option("--config", config, "Config file")->required()->check(CLI::ExistingFile);
  tr->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", out, "Run output directory")->required();
  tr->add_option("--ablation", ablation, "Loss switches")
      ->check(CLI::IsMember({"sup", "ccr", "+wvcr", "+wscr", "full"}));

  bool teacher = false;
  auto* ev = app.add_subcommand("eval", "Word accuracy of a checkpoint on one split");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", split, "Split name")
      ->required()
      ->check(CLI::IsMember({"labeled_train", "unlabeled_train", "test_clean", "test_distorted",
                             "test_occluded"}));
  ev->add_flag("--teacher", teacher, "Score the teacher instead of the student");

  std::vector<std::string> runs;
  std::string report_out = "report";
  auto* rep = app.add_subcommand("report", "Summary table and plots for one or more runs");
  rep->add_option("--runs", runs, "Run directories")->required()->check(CLI::ExistingDirectory);
  rep->add_option("--out", report_out, "Output directory for summary and plots");

  std::size_t seeds = 10;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks of every op and loss");
  gc->add_option("--seeds", seeds, "Random inputs per op")->check(CLI::PositiveNumber);

  std::size_t samples = 50000;
  auto* orc = app.add_subcommand("oracle", "Shortest-path and self-critical gradient oracles");
  orc->add_option("--samples", samples, "Monte-Carlo samples")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return generate_data(config, out, threads);
    if (*tr) return run_train(config, data, out, ablation);
    if (*ev) return run_eval(checkpoint, data, split, teacher);
    if (*rep) return run_report(runs, report_out);
    if (*gc) return run_gradcheck(seeds);
    if (*orc) return run_oracle(samples);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
