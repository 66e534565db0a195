#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "seqcr/trainer.hpp"

namespace seqcr {

/// One training run as found on disk: `metrics.csv` plus an optional
/// `config.cfg` naming the ablation and seed.
struct RunRecord {
  std::string name;
  std::string ablation = "custom";
  std::uint64_t seed = 0;
  std::vector<MetricsRow> rows;
  std::vector<std::string> errors;
};

/// "sup", "ccr", "+wvcr" or "full" when the switches match a standard
/// ablation, otherwise "custom".
std::string ablation_of(const TrainConfig& config);

/// Reads `dir/metrics.csv`; malformed rows land in `errors`, the rest are kept.
RunRecord load_run(const std::filesystem::path& dir);

struct SplitAccuracy {
  double clean = 0.0, distorted = 0.0, occluded = 0.0;
  double mean() const { return (clean + distorted + occluded) / 3.0; }
};

/// Accuracies of the last metrics row; zeros for an empty run.
SplitAccuracy final_accuracy(const RunRecord& run);

/// Midpoint average for even counts; 0 for an empty input.
double median(std::vector<double> values);

struct GridRow {
  std::string ablation;
  std::size_t runs = 0;
  /// Per-split medians over runs.
  SplitAccuracy median;
  /// Median over runs of each run's three-split mean.
  double median_mean = 0.0;
  /// Per-split difference from the reference row (the first row).
  SplitAccuracy delta;
  double delta_mean = 0.0;
};

/// One row per ablation in the order sup, ccr, +wvcr, full, then others
/// alphabetically. Runs with no metrics rows are skipped.
std::vector<GridRow> ablation_grid(std::span<const RunRecord> runs);

struct LineSeries {
  std::string name;
  std::vector<double> x, y;
};

struct LineChart {
  std::string title, x_label, y_label;
  double y_min = 0.0, y_max = 1.0;
  double width = 640.0, height = 360.0;
  std::vector<LineSeries> series;

  double x_min() const;
  double x_max() const;
  /// Pixel coordinates of a data point inside the plot frame.
  double x_px(double x) const;
  double y_px(double y) const;
  std::string svg() const;
};

/// Per-split test accuracy against step, fixed [0, 1] axis.
LineChart accuracy_chart(const RunRecord& run);
/// Loss terms against step.
LineChart loss_chart(const RunRecord& run);

struct ReportOutput {
  std::string summary;
  std::vector<std::filesystem::path> files;
};

/// Text summary (per-run table, ablation grid, parse errors) plus
/// `<run>_accuracy.svg` and `<run>_loss.svg` for every run with rows.
std::string summary_text(std::span<const RunRecord> runs);
ReportOutput write_report(std::span<const RunRecord> runs, const std::filesystem::path& out_dir);

}  // namespace seqcr
