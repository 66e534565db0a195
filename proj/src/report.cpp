#include "seqcr/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace seqcr {

namespace {

const std::vector<std::string>& standard_order() {
  static const std::vector<std::string> order = {"sup", "ccr", "+wvcr", "full"};
  return order;
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string signed_fixed(double v, int digits = 4) {
  return (v >= 0 ? "+" : "") + fixed(v, digits);
}

std::string escape_xml(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

constexpr double kLeft = 60, kRight = 130, kTop = 30, kBottom = 40;
const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

}  // namespace

std::string ablation_of(const TrainConfig& c) {
  if (!c.use_ccr && !c.use_wvcr && !c.use_scst) return "sup";
  if (c.use_ccr && !c.use_wvcr && !c.use_scst) return "ccr";
  if (c.use_ccr && c.use_wvcr && !c.use_scst) return "+wvcr";
  if (c.use_ccr && c.use_wvcr && c.use_scst) return "full";
  return "custom";
}

RunRecord load_run(const std::filesystem::path& dir) {
  RunRecord run;
  run.name = dir.filename().string();
  if (run.name.empty()) run.name = dir.parent_path().filename().string();
  ParsedMetrics m = read_metrics(dir / "metrics.csv");
  run.rows = std::move(m.rows);
  run.errors = std::move(m.errors);
  if (std::filesystem::exists(dir / "config.cfg")) {
    try {
      const TrainConfig c = TrainConfig::load(dir / "config.cfg");
      run.ablation = ablation_of(c);
      run.seed = c.seed;
    } catch (const ConfigError& e) {
      run.errors.push_back(std::string("config.cfg: ") + e.what());
    }
  }
  return run;
}

SplitAccuracy final_accuracy(const RunRecord& run) {
  if (run.rows.empty()) return {};
  const MetricsRow& r = run.rows.back();
  return {r.acc_clean, r.acc_distorted, r.acc_occluded};
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<GridRow> ablation_grid(std::span<const RunRecord> runs) {
  std::map<std::string, std::vector<SplitAccuracy>> by;
  for (const auto& r : runs) {
    if (!r.rows.empty()) by[r.ablation].push_back(final_accuracy(r));
  }
  std::vector<std::string> names;
  for (const auto& n : standard_order()) {
    if (by.contains(n)) names.push_back(n);
  }
  for (const auto& [n, _] : by) {
    if (std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
  }
  std::vector<GridRow> grid;
  for (const auto& n : names) {
    const auto& accs = by[n];
    std::vector<double> c, d, o, m;
    for (const auto& a : accs) {
      c.push_back(a.clean);
      d.push_back(a.distorted);
      o.push_back(a.occluded);
      m.push_back(a.mean());
    }
    GridRow row;
    row.ablation = n;
    row.runs = accs.size();
    row.median = {median(c), median(d), median(o)};
    row.median_mean = median(m);
    grid.push_back(row);
  }
  if (!grid.empty()) {
    const GridRow ref = grid.front();
    for (auto& row : grid) {
      row.delta = {row.median.clean - ref.median.clean, row.median.distorted - ref.median.distorted,
                   row.median.occluded - ref.median.occluded};
      row.delta_mean = row.median_mean - ref.median_mean;
    }
  }
  return grid;
}

double LineChart::x_min() const {
  double lo = INFINITY;
  for (const auto& s : series) {
    for (double x : s.x) lo = std::min(lo, x);
  }
  return std::isfinite(lo) ? lo : 0.0;
}

double LineChart::x_max() const {
  double hi = -INFINITY;
  for (const auto& s : series) {
    for (double x : s.x) hi = std::max(hi, x);
  }
  return std::isfinite(hi) ? hi : 1.0;
}

double LineChart::x_px(double x) const {
  const double lo = x_min(), hi = x_max();
  const double span = hi > lo ? hi - lo : 1.0;
  return kLeft + (x - lo) / span * (width - kLeft - kRight);
}

double LineChart::y_px(double y) const {
  const double span = y_max > y_min ? y_max - y_min : 1.0;
  return height - kBottom - (y - y_min) / span * (height - kTop - kBottom);
}

std::string LineChart::svg() const {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">"
     << escape_xml(title) << "</text>\n";
  const double x0 = kLeft, x1 = width - kRight, y0 = height - kBottom, y1 = kTop;
  os << "<rect x=\"" << x0 << "\" y=\"" << y1 << "\" width=\"" << x1 - x0 << "\" height=\""
     << y0 - y1 << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = y_min + (y_max - y_min) * k / 4.0;
    const double py = y_px(v);
    os << "<line x1=\"" << x0 << "\" x2=\"" << x1 << "\" y1=\"" << py << "\" y2=\"" << py
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << x0 - 4 << "\" y=\"" << py + 4 << "\" text-anchor=\"end\">"
       << fixed(v, 3) << "</text>\n";
    const double vx = x_min() + (x_max() - x_min()) * k / 4.0;
    os << "<text x=\"" << x_px(vx) << "\" y=\"" << y0 + 14 << "\" text-anchor=\"middle\">"
       << fixed(vx, 0) << "</text>\n";
  }
  os << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << height - 6 << "\" text-anchor=\"middle\">"
     << escape_xml(x_label) << "</text>\n";
  os << "<text x=\"14\" y=\"" << (y0 + y1) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
     << (y0 + y1) / 2 << ")\">" << escape_xml(y_label) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kColors[i % std::size(kColors)];
    os << "<polyline data-series=\"" << escape_xml(s.name) << "\" fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      os << (k ? " " : "") << x_px(s.x[k]) << "," << y_px(s.y[k]);
    }
    os << "\"/>\n";
    const double ly = kTop + 14.0 * static_cast<double>(i) + 8;
    os << "<line x1=\"" << x1 + 8 << "\" x2=\"" << x1 + 24 << "\" y1=\"" << ly << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << x1 + 28 << "\" y=\"" << ly + 4 << "\">" << escape_xml(s.name);
    if (!s.y.empty()) os << " " << fixed(s.y.back(), 3);
    os << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

LineChart accuracy_chart(const RunRecord& run) {
  LineChart c;
  c.title = run.name + ": test accuracy";
  c.x_label = "step";
  c.y_label = "word accuracy";
  LineSeries clean{"clean", {}, {}}, dist{"distorted", {}, {}}, occ{"occluded", {}, {}};
  for (const auto& r : run.rows) {
    for (LineSeries* s : {&clean, &dist, &occ}) s->x.push_back(static_cast<double>(r.step));
    clean.y.push_back(r.acc_clean);
    dist.y.push_back(r.acc_distorted);
    occ.y.push_back(r.acc_occluded);
  }
  c.series = {clean, dist, occ};
  return c;
}

LineChart loss_chart(const RunRecord& run) {
  LineChart c;
  c.title = run.name + ": training losses";
  c.x_label = "step";
  c.y_label = "epoch mean";
  LineSeries ce{"ce", {}, {}}, ccr{"ccr", {}, {}}, wvcr{"wvcr", {}, {}}, scst{"scst", {}, {}},
      total{"total", {}, {}};
  double lo = 0.0, hi = 0.0;
  for (const auto& r : run.rows) {
    const double x = static_cast<double>(r.step);
    for (auto [s, v] : {std::pair{&ce, r.ce}, {&ccr, r.ccr}, {&wvcr, r.wvcr}, {&scst, r.scst},
                        {&total, r.total}}) {
      s->x.push_back(x);
      s->y.push_back(v);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  c.y_min = lo;
  c.y_max = hi > lo ? hi : lo + 1.0;
  c.series = {ce, ccr, wvcr, scst, total};
  return c;
}

std::string summary_text(std::span<const RunRecord> runs) {
  std::ostringstream os;
  os << "runs: " << runs.size() << "\n\n";
  os << "run,ablation,seed,rows,final_step,final_ce,final_total,acc_clean,acc_distorted,"
        "acc_occluded,acc_mean\n";
  for (const auto& r : runs) {
    const SplitAccuracy a = final_accuracy(r);
    const MetricsRow last = r.rows.empty() ? MetricsRow{} : r.rows.back();
    os << r.name << ',' << r.ablation << ',' << r.seed << ',' << r.rows.size() << ','
       << last.step << ',' << fixed(last.ce) << ',' << fixed(last.total) << ',' << fixed(a.clean)
       << ',' << fixed(a.distorted) << ',' << fixed(a.occluded) << ',' << fixed(a.mean()) << '\n';
  }
  const auto grid = ablation_grid(runs);
  if (grid.size() > 1 || (grid.size() == 1 && grid[0].runs > 1)) {
    os << "\nablation grid (medians over runs; deltas against " << grid.front().ablation
       << ")\n";
    os << "ablation,runs,clean,distorted,occluded,mean,d_clean,d_distorted,d_occluded,d_mean\n";
    for (const auto& g : grid) {
      os << g.ablation << ',' << g.runs << ',' << fixed(g.median.clean) << ','
         << fixed(g.median.distorted) << ',' << fixed(g.median.occluded) << ','
         << fixed(g.median_mean) << ',' << signed_fixed(g.delta.clean) << ','
         << signed_fixed(g.delta.distorted) << ',' << signed_fixed(g.delta.occluded) << ','
         << signed_fixed(g.delta_mean) << '\n';
    }
  }
  bool header = false;
  for (const auto& r : runs) {
    for (const auto& e : r.errors) {
      if (!header) os << "\nerrors\n";
      header = true;
      os << r.name << ": " << e << '\n';
    }
  }
  return os.str();
}

ReportOutput write_report(std::span<const RunRecord> runs, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  ReportOutput out;
  out.summary = summary_text(runs);
  const auto summary_path = out_dir / "summary.txt";
  std::ofstream(summary_path) << out.summary;
  out.files.push_back(summary_path);
  for (const auto& r : runs) {
    if (r.rows.empty()) continue;
    for (const auto& [suffix, chart] :
         {std::pair{"_accuracy.svg", accuracy_chart(r)}, {"_loss.svg", loss_chart(r)}}) {
      const auto p = out_dir / (r.name + suffix);
      std::ofstream f(p);
      if (!f) throw std::runtime_error("cannot write " + p.string());
      f << chart.svg();
      out.files.push_back(p);
    }
  }
  return out;
}

}  // namespace seqcr
