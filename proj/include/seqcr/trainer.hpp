#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "seqcr/datagen.hpp"
#include "seqcr/objective.hpp"
#include "seqcr/recognizer.hpp"

namespace seqcr {

enum class LabeledAugment { None, Weak, Strong };

/// Every tunable of a run. Text form: one `key = value` per line, `#`
/// comments, unknown keys rejected.
struct TrainConfig {
  // objective
  double lambda_ccr = 1.0;
  double lambda_wvcr = 0.1;
  double lambda_scst = 0.1;
  double tau = 0.5;
  bool use_ccr = true;
  bool use_wvcr = true;
  bool use_scst = true;
  double gumbel_temperature = 1.0;

  // mean teacher
  double ema_retention = 0.99;
  /// Copy the student into the teacher when the unlabeled losses switch on.
  bool resync_teacher = true;

  // optimisation
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double weight_decay = 0.05;
  double grad_clip = 5.0;
  std::size_t epochs = 10;
  std::size_t warmup_epochs = 1;
  std::size_t batch_size = 64;
  /// Unlabeled images per labeled image in a step.
  double unlabeled_ratio = 1.0;
  LabeledAugment labeled_augment = LabeledAugment::Weak;
  std::uint64_t seed = 1;

  /// Test images per split scored at each epoch end (0 = all); the last
  /// epoch always scores all.
  std::size_t eval_limit = 0;

  ModelConfig model;
  DataConfig data;

  LossWeights weights() const;
  bool unsupervised() const { return use_ccr || use_wvcr || use_scst; }
  void validate() const;

  std::string to_text() const;
  static TrainConfig parse(std::string_view text);
  static TrainConfig load(const std::filesystem::path& path);
  /// FNV-1a of the canonical text form.
  std::uint64_t digest() const;

  /// "sup", "ccr", "+wvcr", "+wscr" / "full".
  void apply_ablation(std::string_view name);
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decoupled weight decay Adam.
class AdamW {
 public:
  AdamW(double beta1, double beta2, double epsilon, double weight_decay);

  void step(ModelState& params, std::span<const Tensor> grads, double lr);
  /// Single-tensor form for tests.
  void step(std::vector<Tensor>& params, std::span<const Tensor> grads, double lr);
  std::size_t steps() const { return t_; }

 private:
  double b1_, b2_, eps_, wd_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

/// Linear warmup from 0 over `warmup_steps`, then cosine decay to 0 at
/// `total_steps`.
double learning_rate(double base, std::size_t step, std::size_t warmup_steps,
                     std::size_t total_steps);

/// Scales grads so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

struct MetricsRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double ce = 0, ccr = 0, wvcr = 0, scst = 0, total = 0;
  double gate_frac = 0;
  double lr = 0;
  double acc_clean = 0, acc_distorted = 0, acc_occluded = 0;
};

inline constexpr std::string_view kMetricsHeader =
    "step,epoch,ce,ccr,wvcr,scst,total,gate_frac,lr,acc_clean,acc_distorted,acc_occluded";

std::string format_metrics_row(const MetricsRow& row);
void write_metrics(std::ostream& out, std::span<const MetricsRow> rows);

struct ParsedMetrics {
  std::vector<MetricsRow> rows;
  /// "line N: reason" for every row that could not be parsed.
  std::vector<std::string> errors;
};
ParsedMetrics parse_metrics(std::istream& in);
ParsedMetrics read_metrics(const std::filesystem::path& path);

/// Thrown when a step produces a non-finite loss or gradient.
class TrainingHalted : public std::runtime_error {
 public:
  TrainingHalted(const std::string& what, std::size_t step, std::size_t epoch)
      : std::runtime_error(what), step_(step), epoch_(epoch) {}
  std::size_t step() const { return step_; }
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t step_, epoch_;
};

struct TrainResult {
  ModelState student;
  ModelState teacher;
  std::vector<MetricsRow> metrics;
  std::size_t steps = 0;
};

struct TrainOptions {
  /// Output directory for metrics.csv, config.cfg, checkpoint.sqck and halt
  /// records.
  /// Empty: nothing is written.
  std::filesystem::path out_dir;
  /// Called after each epoch's metrics row.
  std::function<void(const MetricsRow&)> on_epoch;
  /// Called after every optimizer step with the step's loss breakdown.
  std::function<void(std::size_t step, const LossBreakdown&)> on_step;
};

/// Mean Teacher training: each step pairs a labeled batch (teacher-forced
/// CE) with an unlabeled batch (CCR, WVCR, SCST against the teacher's weak
/// view pseudo labels). Deterministic for a fixed config.
TrainResult train(const TrainConfig& config, const DatasetBundle& data,
                  const TrainOptions& options = {});

/// Greedy argmax word accuracy with case folding. `limit` = 0 scores all.
double evaluate(const Recognizer& recognizer, const ModelState& state, const Dataset& data,
                std::size_t limit = 0);

std::string fold_case(std::string_view s);

}  // namespace seqcr
