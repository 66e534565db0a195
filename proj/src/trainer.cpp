#include "seqcr/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <numbers>
#include <sstream>

#include "seqcr/alignment.hpp"
#include "seqcr/meanteacher.hpp"
#include "seqcr/rng.hpp"
#include "seqcr/semantics.hpp"

namespace seqcr {

namespace {

enum StreamTag : std::uint64_t {
  kInitStream = 1,
  kShuffleStream = 2,
  kUnlabeledOrderStream = 3,
  kLabeledAugmentStream = 4,
  kWeakStream = 5,
  kStrongStream = 6,
  kGumbelStream = 7,
  kSampleStream = 8,
};

std::vector<std::size_t> permutation(std::size_t n, std::mt19937_64 rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[uniform_index(rng, i)]);
  return p;
}

std::string join(std::span<const std::size_t> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
  return s;
}

/// Cycles through the unlabeled set, reshuffling at each wrap.
class UnlabeledCursor {
 public:
  UnlabeledCursor(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}

  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    out.reserve(count);
    while (out.size() < count) {
      if (pos_ == order_.size()) {
        order_ = permutation(n_, make_rng(seed_, {kUnlabeledOrderStream, pass_++}));
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t pass_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> order_;
};

bool finite_all(std::span<const Tensor> ts) {
  for (const auto& t : ts) {
    for (double v : t.data()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

struct EpochAccumulator {
  double ce = 0, ccr = 0, wvcr = 0, scst = 0, total = 0, gate = 0;
  std::size_t n = 0;
  void add(const LossBreakdown& b) {
    ce += b.ce;
    ccr += b.ccr;
    wvcr += b.wvcr;
    scst += b.scst;
    total += b.total;
    gate += b.gate_pass_fraction;
    ++n;
  }
};

}  // namespace

// ---- optimiser and schedule ---------------------------------------------------

AdamW::AdamW(double beta1, double beta2, double epsilon, double weight_decay)
    : b1_(beta1), b2_(beta2), eps_(epsilon), wd_(weight_decay) {}

void AdamW::step(std::vector<Tensor>& params, std::span<const Tensor> grads, double lr) {
  if (params.size() != grads.size()) throw std::invalid_argument("AdamW: params/grads size mismatch");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.shape(), 0.0);
      v_.emplace_back(p.shape(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw std::invalid_argument("AdamW: parameter count changed");
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape()) {
      throw std::invalid_argument("AdamW: gradient " + to_string(grads[i].shape()) +
                                  " does not match parameter " + to_string(params[i].shape()));
    }
    auto p = params[i].data();
    auto g = grads[i].data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1_ * m[k] + (1 - b1_) * g[k];
      v[k] = b2_ * v[k] + (1 - b2_) * g[k] * g[k];
      const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
      p[k] -= lr * (update + wd_ * p[k]);
    }
  }
}

void AdamW::step(ModelState& params, std::span<const Tensor> grads, double lr) {
  std::vector<Tensor> flat;
  flat.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) flat.push_back(std::move(params[i]));
  step(flat, grads, lr);
  for (std::size_t i = 0; i < params.size(); ++i) params[i] = std::move(flat[i]);
}

double learning_rate(double base, std::size_t step, std::size_t warmup_steps,
                     std::size_t total_steps) {
  if (step < warmup_steps) {
    return base * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (total_steps <= warmup_steps) return base;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      for (auto& v : g.data()) v *= s;
    }
  }
  return norm;
}

// ---- metrics -------------------------------------------------------------------

std::string format_metrics_row(const MetricsRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.6g,%.9g,%.6g,%.6g,%.6g",
                r.step, r.epoch, r.ce, r.ccr, r.wvcr, r.scst, r.total, r.gate_frac, r.lr,
                r.acc_clean, r.acc_distorted, r.acc_occluded);
  return buf;
}

void write_metrics(std::ostream& out, std::span<const MetricsRow> rows) {
  out << kMetricsHeader << '\n';
  for (const auto& r : rows) out << format_metrics_row(r) << '\n';
}

ParsedMetrics parse_metrics(std::istream& in) {
  ParsedMetrics out;
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!header) {
      header = true;
      if (line != kMetricsHeader) {
        out.errors.push_back("line " + std::to_string(line_no) + ": unexpected header");
      }
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 12) {
      out.errors.push_back("line " + std::to_string(line_no) + ": expected 12 fields, got " +
                           std::to_string(cells.size()));
      continue;
    }
    std::vector<double> v(12);
    bool ok = true;
    for (std::size_t i = 0; i < 12 && ok; ++i) {
      const auto& c = cells[i];
      const auto [p, ec] = std::from_chars(c.data(), c.data() + c.size(), v[i]);
      ok = ec == std::errc() && p == c.data() + c.size() && std::isfinite(v[i]);
      if (!ok) {
        out.errors.push_back("line " + std::to_string(line_no) + ": field " +
                             std::to_string(i + 1) + " is not a number: \"" + c + "\"");
      }
    }
    if (!ok) continue;
    if (v[0] < 0 || v[1] < 0) {
      out.errors.push_back("line " + std::to_string(line_no) + ": negative step or epoch");
      continue;
    }
    MetricsRow r;
    r.step = static_cast<std::size_t>(v[0]);
    r.epoch = static_cast<std::size_t>(v[1]);
    r.ce = v[2];
    r.ccr = v[3];
    r.wvcr = v[4];
    r.scst = v[5];
    r.total = v[6];
    r.gate_frac = v[7];
    r.lr = v[8];
    r.acc_clean = v[9];
    r.acc_distorted = v[10];
    r.acc_occluded = v[11];
    out.rows.push_back(r);
  }
  return out;
}

ParsedMetrics read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse_metrics(in);
}

// ---- evaluation ----------------------------------------------------------------

std::string fold_case(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

double evaluate(const Recognizer& recognizer, const ModelState& state, const Dataset& data,
                std::size_t limit) {
  const std::size_t n = limit == 0 ? data.size() : std::min(limit, data.size());
  if (n == 0) return 0.0;
  std::vector<Tensor> images;
  images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) images.push_back(data.samples[i].image());
  const auto traces = recognizer.predict(state, images);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string pred = recognizer.alphabet().decode(traces[i].tokens);
    if (fold_case(pred) == fold_case(EvaluationAccess::ground_truth(data.samples[i]))) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

// ---- training ------------------------------------------------------------------

TrainResult train(const TrainConfig& config, const DatasetBundle& data,
                  const TrainOptions& options) {
  config.validate();
  const Recognizer rec(config.model);
  const Alphabet& alpha = rec.alphabet();
  const NGramEmbedder embedder(NGramEmbedder::kDefaultSeed, 64, 1, 3, config.model.characters);
  const LossWeights weights = config.weights();

  const auto& labeled = data.labeled_train.samples;
  if (labeled.empty()) throw std::invalid_argument("train: empty labeled set");
  std::vector<std::vector<std::size_t>> label_tokens;
  label_tokens.reserve(labeled.size());
  for (const auto& s : labeled) {
    if (!s.label()) throw std::invalid_argument("train: labeled set contains an unlabeled sample");
    auto toks = alpha.encode(*s.label());
    if (toks.size() > config.model.max_len) {
      throw std::invalid_argument("train: label \"" + *s.label() + "\" exceeds max_len");
    }
    label_tokens.push_back(std::move(toks));
  }
  const auto& unlabeled = data.unlabeled_train.samples;
  if (config.unsupervised() && unlabeled.empty()) {
    throw std::invalid_argument("train: unlabeled losses enabled but the unlabeled set is empty");
  }

  TrainResult res;
  res.student = ModelState::initialize(config.model, derive_seed(config.seed, {kInitStream}));
  res.teacher = res.student;

  const std::size_t B = config.batch_size;
  const std::size_t Bu = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(config.unlabeled_ratio * static_cast<double>(B))));
  const std::size_t steps_per_epoch = (labeled.size() + B - 1) / B;
  const std::size_t total_steps = config.epochs * steps_per_epoch;
  const std::size_t warmup_steps = std::min(total_steps, config.warmup_epochs * steps_per_epoch);

  std::ofstream metrics_out;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    metrics_out.open(options.out_dir / "metrics.csv", std::ios::trunc);
    if (!metrics_out) throw std::runtime_error("cannot write metrics in " + options.out_dir.string());
    metrics_out << kMetricsHeader << '\n' << std::flush;
    std::ofstream(options.out_dir / "config.cfg", std::ios::trunc) << config.to_text();
  }

  AdamW opt(config.beta1, config.beta2, config.adam_epsilon, config.weight_decay);
  UnlabeledCursor cursor(unlabeled.size(), config.seed);
  StrongAugmentSpec strong_spec;
  bool teacher_synced = false;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = permutation(labeled.size(), make_rng(config.seed, {kShuffleStream, epoch}));
    const bool ssl_on = config.unsupervised() && epoch >= config.warmup_epochs;
    if (ssl_on && config.resync_teacher && !teacher_synced) {
      res.teacher = res.student;
      teacher_synced = true;
    }
    EpochAccumulator acc;
    double lr = 0.0;

    for (std::size_t k = 0; k < steps_per_epoch; ++k, ++step) {
      lr = learning_rate(config.lr, step, warmup_steps, total_steps);
      const std::size_t begin = k * B, end = std::min(labeled.size(), begin + B);
      std::vector<std::size_t> lidx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                    order.begin() + static_cast<std::ptrdiff_t>(end));

      Tape tape;
      const BoundModel m = rec.bind(tape, res.student, true);

      std::vector<Tensor> limgs;
      std::vector<std::vector<std::size_t>> ltoks;
      limgs.reserve(lidx.size());
      for (std::size_t i = 0; i < lidx.size(); ++i) {
        const Tensor& img = labeled[lidx[i]].image();
        auto rng = make_rng(config.seed, {kLabeledAugmentStream, step, i});
        switch (config.labeled_augment) {
          case LabeledAugment::None: limgs.push_back(img); break;
          case LabeledAugment::Weak: limgs.push_back(weak_augment(img, rng)); break;
          case LabeledAugment::Strong: limgs.push_back(strong_augment(img, rng, strong_spec)); break;
        }
        ltoks.push_back(label_tokens[lidx[i]]);
      }
      const Var lfeat = rec.encode(tape, m, limgs);
      const BatchTrace ltrace = rec.decode_teacher_forcing(m, lfeat, ltoks);
      LossTerms terms;
      terms.ce = ce_loss(ltrace, ltoks);
      double gate_frac = 0.0;

      std::vector<std::size_t> uidx;
      if (ssl_on) {
        uidx = cursor.next(Bu);
        std::vector<Tensor> weak, strong;
        weak.reserve(Bu);
        strong.reserve(Bu);
        for (std::size_t i = 0; i < Bu; ++i) {
          const Tensor& img = unlabeled[uidx[i]].image();
          auto wr = make_rng(config.seed, {kWeakStream, step, i});
          auto sr = make_rng(config.seed, {kStrongStream, step, i});
          weak.push_back(weak_augment(img, wr));
          strong.push_back(strong_augment(img, sr, strong_spec));
        }
        const auto teacher_traces = teacher_predict(rec, res.teacher, weak);
        std::vector<DecodeTrace> gated;
        std::vector<Tensor> gated_strong;
        for (std::size_t i = 0; i < Bu; ++i) {
          if (teacher_traces[i].confidence > config.tau) {
            gated.push_back(teacher_traces[i]);
            gated_strong.push_back(std::move(strong[i]));
          }
        }
        gate_frac = static_cast<double>(gated.size()) / static_cast<double>(Bu);
        const Var zero = tape.constant(Tensor::scalar(0.0));
        if (gated.empty()) {
          if (config.use_ccr) terms.ccr = zero;
          if (config.use_wvcr) terms.wvcr = zero;
          if (config.use_scst) terms.scst = zero;
        } else {
          std::vector<std::size_t> rows(gated.size());
          std::iota(rows.begin(), rows.end(), 0);
          const Var sfeat = rec.encode(tape, m, gated_strong);
          if (config.use_ccr) {
            std::vector<std::vector<std::size_t>> pseudo_tokens;
            for (const auto& t : gated) pseudo_tokens.push_back(t.tokens);
            const BatchTrace tf = rec.decode_teacher_forcing(m, sfeat, pseudo_tokens);
            terms.ccr = ccr_loss(gated, tf, rows, config.tau).loss;
          }
          if (config.use_wvcr) {
            auto grng = make_rng(config.seed, {kGumbelStream, step});
            GreedyOptions go;
            go.mode = Feedback::StGumbel;
            go.max_len = config.model.max_len;
            go.temperature = config.gumbel_temperature;
            go.rng = &grng;
            const BatchTrace st = rec.decode_greedy(m, sfeat, go);
            terms.wvcr = wvcr_loss_batch(gated, st, rows, alpha.eos()).loss;
          }
          if (config.use_scst) {
            auto srng = make_rng(config.seed, {kSampleStream, step});
            GreedyOptions so;
            so.mode = Feedback::Sample;
            so.max_len = config.model.max_len;
            so.rng = &srng;
            const BatchTrace sampled = rec.decode_greedy(m, sfeat, so);
            const BoundModel frozen = rec.bind(tape, res.student, false);
            GreedyOptions ao;
            ao.max_len = config.model.max_len;
            const BatchTrace greedy = rec.decode_greedy(frozen, detach(sfeat), ao);
            std::vector<std::string> baseline, pseudo;
            for (std::size_t i = 0; i < gated.size(); ++i) {
              baseline.push_back(alpha.decode(greedy.tokens[i]));
              pseudo.push_back(alpha.decode(gated[i].tokens));
            }
            terms.scst = scst_loss(sampled, baseline, pseudo, rows, alpha, embedder).loss;
          }
        }
      }

      auto [total, breakdown] = total_loss(terms, weights, gate_frac);
      auto halt = [&](const std::string& why) {
        if (!options.out_dir.empty()) {
          std::ofstream h(options.out_dir / "halt.txt", std::ios::trunc);
          h << "reason = " << why << "\nstep = " << step << "\nepoch = " << epoch
            << "\nlabeled = " << join(lidx) << "\nunlabeled = " << join(uidx) << '\n';
        }
        throw TrainingHalted(why + " at step " + std::to_string(step) + " (epoch " +
                                 std::to_string(epoch) + ", labeled batch " +
                                 std::to_string(k) + ")",
                             step, epoch);
      };
      if (!std::isfinite(breakdown.total)) halt("non-finite loss");

      const Gradients g = tape.backward(total);
      std::vector<Tensor> grads;
      grads.reserve(m.params.size());
      for (const Var& p : m.params) {
        grads.push_back(g.contains(p.id()) ? g[p] : Tensor(p.shape(), 0.0));
      }
      if (!finite_all(grads)) halt("non-finite gradient");
      clip_global_norm(grads, config.grad_clip);
      opt.step(res.student, grads, lr);
      ema_update(res.teacher, res.student, config.ema_retention);
      acc.add(breakdown);
      if (options.on_step) options.on_step(step, breakdown);
    }

    MetricsRow row;
    row.step = step;
    row.epoch = epoch;
    const double n = static_cast<double>(std::max<std::size_t>(1, acc.n));
    row.ce = acc.ce / n;
    row.ccr = acc.ccr / n;
    row.wvcr = acc.wvcr / n;
    row.scst = acc.scst / n;
    row.total = acc.total / n;
    row.gate_frac = acc.gate / n;
    row.lr = lr;
    const std::size_t limit = epoch + 1 == config.epochs ? 0 : config.eval_limit;
    row.acc_clean = evaluate(rec, res.student, data.test_clean, limit);
    row.acc_distorted = evaluate(rec, res.student, data.test_distorted, limit);
    row.acc_occluded = evaluate(rec, res.student, data.test_occluded, limit);
    res.metrics.push_back(row);
    if (metrics_out.is_open()) metrics_out << format_metrics_row(row) << '\n' << std::flush;
    if (options.on_epoch) options.on_epoch(row);
  }
  res.steps = step;

  if (!options.out_dir.empty()) {
    Checkpoint ck;
    ck.config_digest = config.digest();
    ck.config_text = config.to_text();
    ck.student = res.student;
    ck.teacher = res.teacher;
    save_checkpoint(options.out_dir / "checkpoint.sqck", ck);
  }
  return res;
}

}  // namespace seqcr
