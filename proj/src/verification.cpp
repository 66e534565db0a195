#include "seqcr/verification.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "seqcr/alignment.hpp"
#include "seqcr/meanteacher.hpp"
#include "seqcr/rng.hpp"
#include "seqcr/semantics.hpp"

namespace seqcr {

namespace {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
  Tensor t = random_tensor(std::move(shape), rng, 0.1, 1.0);
  for (double& v : t.data()) {
    if (uniform01(rng) < 0.5) v = -v;
  }
  return t;
}

Var project(Var v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(v, v.tape().constant(random_tensor(v.shape(), rng))));
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct OpCase {
  const char* name;
  std::function<std::vector<Tensor>(std::mt19937_64&)> inputs;
  ScalarFn f;
};

std::vector<OpCase> op_catalog() {
  auto two = [](Shape a, Shape b) {
    return [a, b](std::mt19937_64& rng) {
      return std::vector<Tensor>{random_tensor(a, rng), random_tensor(b, rng)};
    };
  };
  auto one = [](Shape a) {
    return [a](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(a, rng)}; };
  };
  auto nonzero = [](Shape a) {
    return [a](std::mt19937_64& rng) { return std::vector<Tensor>{away_from_zero(a, rng)}; };
  };
  using P = std::span<const Var>;
  return {
      {"add", two({3, 4}, {3, 4}), [](Tape&, P p) { return project(add(p[0], p[1]), 1); }},
      {"add_broadcast", two({2, 3, 4}, {2, 1, 4}),
       [](Tape&, P p) { return project(add(p[0], p[1]), 1); }},
      {"sub", two({3, 4}, {1, 4}), [](Tape&, P p) { return project(sub(p[0], p[1]), 2); }},
      {"mul", two({3, 4}, {3, 4}), [](Tape&, P p) { return project(mul(p[0], p[1]), 3); }},
      {"div",
       [](std::mt19937_64& rng) {
         return std::vector<Tensor>{random_tensor({3, 4}, rng), away_from_zero({3, 4}, rng)};
       },
       [](Tape&, P p) { return project(div(p[0], p[1]), 4); }},
      {"scale", one({5}), [](Tape&, P p) { return project(scale(p[0], -1.7), 5); }},
      {"shift", one({5}), [](Tape&, P p) { return project(shift(p[0], 0.3), 5); }},
      {"matmul", two({3, 4}, {4, 2}), [](Tape&, P p) { return project(matmul(p[0], p[1]), 6); }},
      {"matmul_batched", two({2, 3, 4}, {2, 4, 5}),
       [](Tape&, P p) { return project(matmul(p[0], p[1]), 6); }},
      {"exp", one({6}), [](Tape&, P p) { return project(exp(p[0]), 7); }},
      {"log",
       [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor({6}, rng, 0.2, 2.0)}; },
       [](Tape&, P p) { return project(log(p[0]), 8); }},
      {"tanh", one({6}), [](Tape&, P p) { return project(tanh(p[0]), 9); }},
      {"sigmoid", one({6}), [](Tape&, P p) { return project(sigmoid(p[0]), 9); }},
      {"relu", nonzero({8}), [](Tape&, P p) { return project(relu(p[0]), 10); }},
      {"softmax", one({3, 5}), [](Tape&, P p) { return project(softmax(p[0], 1), 11); }},
      {"log_softmax", one({3, 5}), [](Tape&, P p) { return project(log_softmax(p[0], 1), 12); }},
      {"sum", one({3, 5}), [](Tape&, P p) { return sum(mul(p[0], p[0])); }},
      {"sum_axis", one({3, 5}), [](Tape&, P p) { return project(sum(p[0], 0), 13); }},
      {"mean", one({3, 5}), [](Tape&, P p) { return mean(exp(p[0])); }},
      {"concat", two({2, 3}, {2, 4}),
       [](Tape&, P p) {
         const Var parts[] = {p[0], p[1]};
         return project(concat(parts, 1), 14);
       }},
      {"slice", one({4, 6}), [](Tape&, P p) { return project(slice(p[0], 1, 2, 5), 15); }},
      {"gather_rows", one({5, 3}),
       [](Tape&, P p) {
         const std::size_t ids[] = {4, 0, 4, 2};
         return project(gather_rows(p[0], ids), 16);
       }},
      {"pick", one({3, 5}),
       [](Tape&, P p) {
         const std::size_t cols[] = {1, 4, 0};
         return project(pick(p[0], cols), 17);
       }},
      {"max", one({4, 5}), [](Tape&, P p) { return project(max(p[0], 1), 18); }},
      {"l2_norm", nonzero({3, 4}), [](Tape&, P p) { return project(l2_norm(p[0], 1), 19); }},
      {"cosine_similarity", two({3, 4}, {3, 4}),
       [](Tape&, P p) { return project(cosine_similarity(p[0], p[1], 1), 20); }},
      {"reshape", one({3, 4}), [](Tape&, P p) { return project(reshape(p[0], {2, 6}), 21); }},
  };
}

ModelConfig check_model(std::string chars, std::size_t max_len) {
  ModelConfig c;
  c.image_height = 8;
  c.image_width = 16;
  c.filter_height = 3;
  c.filter_width = 3;
  c.filter_channels = 4;
  c.column_stride = 4;
  c.column_window = 3;
  c.feature_dim = 6;
  c.embed_dim = 4;
  c.hidden_dim = 5;
  c.attention_dim = 5;
  c.max_len = max_len;
  c.characters = std::move(chars);
  return c;
}

// Every parameter perturbed so no unit sits on a relu kink and no
// attention energies tie.
ModelState jittered_state(const ModelConfig& c, std::uint64_t seed, double spread) {
  ModelState s = ModelState::initialize(c, seed);
  std::mt19937_64 rng(derive_seed(seed, {77}));
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (double& v : s[i].data()) v += uniform(rng, -spread, spread);
  }
  return s;
}

std::vector<Tensor> random_images(const ModelConfig& c, std::size_t n, std::mt19937_64& rng) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_tensor({c.image_height, c.image_width}, rng, 0.05, 1.0));
  return out;
}

std::vector<Tensor> params_of(const ModelState& s) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < s.size(); ++i) out.push_back(s[i]);
  return out;
}

GradCheckEntry entry(std::string name, const GradCheckResult& r, double tol) {
  return {std::move(name), r.max_rel_error, r.passed(tol)};
}

}  // namespace

CheckOutcome check_dp_oracle(std::size_t matrices, std::size_t max_dim, std::uint64_t seed) {
  Stopwatch sw;
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  std::size_t failures = 0;
  for (std::size_t k = 0; k < matrices; ++k) {
    const std::size_t n = 1 + uniform_index(rng, max_dim), m = 1 + uniform_index(rng, max_dim);
    const Tensor d = random_tensor({n, m}, rng, 0.0, 2.0);
    const double err = std::abs(shortest_path(d).total - brute_force_shortest_path(d));
    worst = std::max(worst, err);
    failures += err > 1e-9;
  }
  CheckOutcome o;
  o.seconds = sw.seconds();
  o.passed = failures == 0 && o.seconds < 5.0;
  o.detail = fmt("%zu matrices up to %zux%zu, %zu mismatches, max |diff| %.3g, %.2f s", matrices,
                 max_dim, max_dim, failures, worst, o.seconds);
  return o;
}

CheckOutcome check_dp_properties(std::size_t instances, std::uint64_t seed) {
  Stopwatch sw;
  std::mt19937_64 rng(seed);
  std::size_t mono_fail = 0, sym_fail = 0, zero_fail = 0, zero_cases = 0;
  for (std::size_t k = 0; k < instances; ++k) {
    const std::size_t n = 1 + uniform_index(rng, 6), m = 1 + uniform_index(rng, 6);
    const Tensor d = random_tensor({n, m}, rng, 0.0, 2.0);
    const double base = shortest_path(d).total;

    Tensor raised = d;
    raised[uniform_index(rng, d.size())] += uniform(rng, 0.0, 1.0);
    mono_fail += shortest_path(raised).total < base;

    Tensor t({m, n});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) t.at(j, i) = d.at(i, j);
    }
    sym_fail += std::abs(shortest_path(t).total - base) > 1e-12;

    // Sparse 0/1 costs so zero-cost paths occur with useful frequency.
    Tensor z({n, m});
    for (double& v : z.data()) v = uniform01(rng) < 0.7 ? 0.0 : 1.0;
    const bool has_zero_path = brute_force_shortest_path(z) == 0.0;
    zero_cases += has_zero_path;
    zero_fail += (shortest_path(z).total == 0.0) != has_zero_path;
  }
  CheckOutcome o;
  o.seconds = sw.seconds();
  o.passed = mono_fail == 0 && sym_fail == 0 && zero_fail == 0 && zero_cases > 0 &&
             zero_cases < instances;
  o.detail = fmt(
      "%zu instances: monotonicity %zu failures, transpose symmetry %zu failures, "
      "zero-iff-zero-path %zu failures (%zu with a zero path)",
      instances, mono_fail, sym_fail, zero_fail, zero_cases);
  return o;
}

std::vector<GradCheckEntry> gradcheck_suite(std::size_t seeds, double tol) {
  std::vector<GradCheckEntry> out;
  for (const auto& c : op_catalog()) {
    GradCheckEntry worst{c.name, 0.0, true};
    for (std::uint64_t s = 0; s < seeds; ++s) {
      std::mt19937_64 rng(derive_seed(s, {42}));
      std::vector<Tensor> params = c.inputs(rng);
      const GradCheckResult r = grad_check(c.f, params);
      worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
      worst.passed = worst.passed && r.passed(tol);
    }
    out.push_back(worst);
  }

  const ModelConfig cfg = check_model("abc", 4);
  const Recognizer rec(cfg);
  const ModelState student = jittered_state(cfg, 31, 0.3);
  const ModelState teacher = jittered_state(cfg, 32, 0.3);
  std::mt19937_64 rng(33);
  const std::vector<Tensor> imgs = random_images(cfg, 2, rng);
  const std::vector<std::vector<std::size_t>> labels = {rec.alphabet().encode("abc"),
                                                        rec.alphabet().encode("b")};
  const std::vector<DecodeTrace> pseudo = rec.predict(teacher, imgs);
  std::vector<std::vector<std::size_t>> pseudo_tokens;
  for (const auto& t : pseudo) pseudo_tokens.push_back(t.tokens);
  const std::vector<std::size_t> rows = {0, 1};
  GradCheckOptions opt;
  opt.max_coords_per_param = 8;

  auto forced = [&](Tape& tape, std::span<const Var> vars,
                    const std::vector<std::vector<std::size_t>>& toks) {
    const BoundModel m{std::vector<Var>(vars.begin(), vars.end())};
    return rec.decode_teacher_forcing(m, rec.encode(tape, m, imgs), toks);
  };
  {
    std::vector<Tensor> p = params_of(student);
    const ScalarFn f = [&](Tape& tape, std::span<const Var> v) {
      return ce_loss(forced(tape, v, labels), labels);
    };
    out.push_back(entry("ce_loss(recognizer)", grad_check(f, p, opt), tol));
  }
  {
    std::vector<Tensor> p = params_of(student);
    const ScalarFn f = [&](Tape& tape, std::span<const Var> v) {
      return ccr_loss(pseudo, forced(tape, v, pseudo_tokens), rows, 0.0).loss;
    };
    out.push_back(entry("ccr_loss(recognizer)", grad_check(f, p, opt), tol));
  }
  {
    std::vector<Tensor> p = params_of(student);
    const ScalarFn f = [&](Tape& tape, std::span<const Var> v) {
      return wvcr_loss_batch(pseudo, forced(tape, v, pseudo_tokens), rows, rec.alphabet().eos())
          .loss;
    };
    out.push_back(entry("wvcr_loss(recognizer)", grad_check(f, p, opt), tol));
  }
  return out;
}

CheckOutcome check_gradients(std::size_t seeds, double tol) {
  Stopwatch sw;
  const auto entries = gradcheck_suite(seeds, tol);
  CheckOutcome o;
  o.seconds = sw.seconds();
  std::size_t failed = 0;
  double worst = 0.0;
  std::string names;
  for (const auto& e : entries) {
    worst = std::max(worst, e.max_rel_error);
    if (!e.passed) {
      ++failed;
      names += " " + e.name;
    }
  }
  o.passed = failed == 0 && o.seconds < 120.0;
  o.detail = fmt("%zu checks, %zu failed, max rel error %.3g, %.1f s", entries.size(), failed,
                 worst, o.seconds) +
             (failed ? " (failed:" + names + ")" : "");
  return o;
}

CheckOutcome check_st_gumbel(std::size_t draws, std::uint64_t seed) {
  Stopwatch sw;
  std::mt19937_64 rng(seed);
  const Tensor logits = Tensor::vector({1.0, 0.0, -0.5, 0.5});
  const std::size_t V = logits.size();
  std::vector<double> p(V);
  double z = 0.0;
  for (std::size_t v = 0; v < V; ++v) z += p[v] = std::exp(logits[v]);
  for (double& v : p) v /= z;

  std::vector<std::size_t> counts(V, 0);
  std::size_t not_one_hot = 0;
  for (std::size_t i = 0; i < draws; ++i) {
    Tape t;
    const Var y = st_gumbel(t.constant(logits), 1.0, gumbel_noise({V}, rng));
    std::size_t ones = 0, at = 0;
    for (std::size_t v = 0; v < V; ++v) {
      const double x = y.value()[v];
      if (x != 0.0 && x != 1.0) ++not_one_hot;
      if (x == 1.0) {
        ++ones;
        at = v;
      }
    }
    if (ones != 1) ++not_one_hot;
    ++counts[at];
  }
  double worst_sd = 0.0;
  for (std::size_t v = 0; v < V; ++v) {
    const double n = static_cast<double>(draws);
    const double sd = std::sqrt(n * p[v] * (1 - p[v]));
    worst_sd = std::max(worst_sd, std::abs(static_cast<double>(counts[v]) - n * p[v]) / sd);
  }

  double grad_diff = 0.0;
  for (double temperature : {0.5, 1.0, 2.0}) {
    const Tensor x = random_tensor({3, 5}, rng, -2, 2);
    const Tensor g = gumbel_noise({3, 5}, rng);
    const Tensor w = random_tensor({3, 5}, rng);
    Tape a;
    const Var la = a.param(x);
    const Tensor ga = a.backward(sum(mul(st_gumbel(la, temperature, g), a.constant(w))))[la];
    Tape b;
    const Var lb = b.param(x);
    const Var soft = softmax(scale(add(lb, b.constant(g)), 1.0 / temperature), 1);
    const Tensor gb = b.backward(sum(mul(soft, b.constant(w))))[lb];
    for (std::size_t k = 0; k < ga.size(); ++k) grad_diff = std::max(grad_diff, std::abs(ga[k] - gb[k]));
  }
  CheckOutcome o;
  o.seconds = sw.seconds();
  o.passed = not_one_hot == 0 && worst_sd < 3.0 && grad_diff == 0.0;
  o.detail = fmt(
      "%zu draws: %zu non-one-hot outputs, worst class deviation %.2f sd, max straight-through vs "
      "softmax-path gradient difference %.3g",
      draws, not_one_hot, worst_sd, grad_diff);
  return o;
}

CheckOutcome check_scst_unbiased(std::size_t samples, std::uint64_t seed) {
  Stopwatch sw;
  const ModelConfig cfg = check_model("ab", 2);
  const Recognizer rec(cfg);
  const ModelState state = jittered_state(cfg, seed, 1.0);
  std::mt19937_64 rng(derive_seed(seed, {1}));
  const Tensor img = random_images(cfg, 1, rng)[0];
  const NGramEmbedder embedder(NGramEmbedder::kDefaultSeed, 64, 1, 3, "ab");
  const std::string pseudo = "ab";
  const auto exact = exact_expected_scst_gradient(rec, state, img, pseudo, embedder);
  const std::span<const Tensor> one(&img, 1);
  const std::string base = rec.alphabet().decode(rec.predict(state, one)[0].tokens);

  std::vector<Tensor> mc;
  for (std::size_t i = 0; i < state.size(); ++i) mc.emplace_back(state[i].shape(), 0.0);
  const std::size_t chunk = 5000;
  double zero_adv_max = 0.0;
  for (std::size_t done = 0; done < samples; done += chunk) {
    const std::size_t n = std::min(chunk, samples - done);
    const std::vector<Tensor> imgs(n, img);
    Tape tape;
    const BoundModel m = rec.bind(tape, state, true);
    GreedyOptions go;
    go.mode = Feedback::Sample;
    go.max_len = cfg.max_len;
    go.rng = &rng;
    const BatchTrace tr = rec.decode_greedy(m, rec.encode(tape, m, imgs), go);
    std::vector<std::size_t> rows(n);
    for (std::size_t b = 0; b < n; ++b) rows[b] = b;
    const std::vector<std::string> bases(n, base), pseudos(n, pseudo);
    const ScstBatch loss = scst_loss(tr, bases, pseudos, rows, rec.alphabet(), embedder);
    const Gradients g = tape.backward(loss.loss);
    const double w = static_cast<double>(n) / static_cast<double>(samples);
    for (std::size_t i = 0; i < state.size(); ++i) {
      if (!g.contains(m.at(i).id())) continue;
      const Tensor& gi = g[m.at(i)];
      for (std::size_t k = 0; k < gi.size(); ++k) mc[i][k] += w * gi[k];
    }
    if (done == 0) {
      // Baseline equal to each sampled string: every advantage is zero.
      std::vector<std::string> own(n);
      for (std::size_t b = 0; b < n; ++b) own[b] = rec.alphabet().decode(tr.tokens[b]);
      const ScstBatch z = scst_loss(tr, own, pseudos, rows, rec.alphabet(), embedder);
      const Gradients gz = tape.backward(z.loss);
      for (std::size_t i = 0; i < state.size(); ++i) {
        if (!gz.contains(m.at(i).id())) continue;
        for (double v : gz[m.at(i)].data()) zero_adv_max = std::max(zero_adv_max, std::abs(v));
      }
    }
  }
  double num = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < state.size(); ++i) {
    for (std::size_t k = 0; k < mc[i].size(); ++k) {
      num += mc[i][k] * exact[i][k];
      na += mc[i][k] * mc[i][k];
      nb += exact[i][k] * exact[i][k];
    }
  }
  const double cosine = na > 0 && nb > 0 ? num / std::sqrt(na * nb) : 0.0;
  CheckOutcome o;
  o.seconds = sw.seconds();
  o.passed = cosine > 0.99 && zero_adv_max == 0.0;
  o.detail = fmt(
      "%zu samples on %zu characters x %zu steps: cosine %.5f with enumeration, zero-advantage max "
      "|grad| %.3g",
      samples, cfg.characters.size(), cfg.max_len, cosine, zero_adv_max);
  return o;
}

CheckOutcome check_ema(std::size_t steps, std::uint64_t seed) {
  Stopwatch sw;
  const ModelConfig cfg = check_model("abc", 4);
  const ModelState student = ModelState::initialize(cfg, seed);
  ModelState teacher = ModelState::initialize(cfg, seed + 1);
  const double d0 = parameter_distance(teacher, student);
  const double gamma = 0.9;
  double worst = 0.0;
  for (std::size_t k = 1; k <= steps; ++k) {
    ema_update(teacher, student, gamma);
    const double expect = std::pow(gamma, static_cast<double>(k)) * d0;
    worst = std::max(worst, std::abs(parameter_distance(teacher, student) - expect));
  }
  ModelState copy = ModelState::initialize(cfg, seed + 2);
  ema_update(copy, student, 0.0);
  const bool copied = copy == student;
  CheckOutcome o;
  o.seconds = sw.seconds();
  o.passed = worst <= 1e-12 && copied;
  o.detail = fmt("%zu steps at retention %.2f: max deviation %.3g (initial distance %.3g); "
                 "zero retention copies student: %s",
                 steps, gamma, worst, d0, copied ? "yes" : "no");
  return o;
}

CheckOutcome check_ccr_closed_form(std::uint64_t seed) {
  Stopwatch sw;
  // One step, teacher [0.5, 0.5], student [0.25, 0.75].
  double value = 0.0;
  {
    Tape t;
    const Var l = t.param(Tensor::matrix(1, 2, {std::log(0.25), std::log(0.75)}));
    BatchTrace st;
    st.log_probs = {log_softmax(l, 1)};
    st.tokens = {{1}};
    DecodeTrace teacher;
    teacher.tokens = {0};
    teacher.probs = Tensor::matrix(1, 2, {0.5, 0.5});
    teacher.confidence = confidence(teacher.probs);
    const std::vector<DecodeTrace> tt = {teacher};
    const std::vector<std::size_t> rows = {0};
    value = ccr_loss(tt, st, rows, 0.4).loss.value().item();
  }
  const double expect = 0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75);

  // Three rows; the middle teacher falls below tau.
  std::mt19937_64 rng(seed);
  Tape t;
  std::vector<Var> steps;
  BatchTrace st;
  for (int k = 0; k < 2; ++k) {
    steps.push_back(t.param(random_tensor({3, 4}, rng, -2, 2)));
    st.log_probs.push_back(log_softmax(steps.back(), 1));
  }
  st.tokens = {{0, 3}, {1, 3}, {2, 3}};
  std::vector<DecodeTrace> teachers;
  for (double top : {0.95, 0.3, 0.9}) {
    DecodeTrace d;
    d.tokens = {0, 3};
    d.probs = Tensor({2, 4}, (1.0 - top) / 3.0);
    d.probs.at(0, 0) = d.probs.at(1, 3) = top;
    d.confidence = confidence(d.probs);
    teachers.push_back(d);
  }
  const std::vector<std::size_t> rows = {0, 1, 2};
  const CcrBatch r = ccr_loss(teachers, st, rows, 0.5);
  const Gradients g = t.backward(r.loss);
  bool gated_zero = true, others_nonzero = false;
  for (const Var& s : steps) {
    const Tensor& gs = g[s];
    for (std::size_t c = 0; c < 4; ++c) {
      gated_zero = gated_zero && std::bit_cast<std::uint64_t>(gs.at(1, c)) == 0;
      others_nonzero = others_nonzero || gs.at(0, c) != 0.0 || gs.at(2, c) != 0.0;
    }
  }
  CheckOutcome o;
  o.seconds = sw.seconds();
  o.passed = std::abs(value - 0.14384) < 1e-5 && std::abs(value - expect) < 1e-12 &&
             gated_zero && others_nonzero && r.gated_in == 2;
  o.detail = fmt("closed form %.6f (expected %.6f); gated-off row gradient bit-zero: %s; "
                 "gated-in rows %zu of 3",
                 value, expect, gated_zero ? "yes" : "no", r.gated_in);
  return o;
}

CheckOutcome check_determinism(const TrainConfig& config, const DatasetBundle& data,
                               const std::filesystem::path& workdir) {
  Stopwatch sw;
  std::filesystem::remove_all(workdir);
  for (const char* run : {"a", "b"}) {
    TrainOptions opt;
    opt.out_dir = workdir / run;
    train(config, data, opt);
  }
  const auto ma = read_bytes(workdir / "a" / "metrics.csv");
  const auto mb = read_bytes(workdir / "b" / "metrics.csv");
  const bool metrics_same = ma == mb && !ma.empty();

  bool datasets_same = true;
  std::string bad;
  for (auto name : DatasetBundle::kSplitNames) {
    const auto p1 = workdir / (std::string(name) + ".1.sqcd");
    const auto p2 = workdir / (std::string(name) + ".2.sqcd");
    save_dataset(p1, data.split(name));
    const Dataset back = load_dataset(p1);
    save_dataset(p2, back);
    const bool same = read_bytes(p1) == read_bytes(p2) && back == data.split(name);
    if (!same) bad += " " + std::string(name);
    datasets_same = datasets_same && same;
  }
  CheckOutcome o;
  o.seconds = sw.seconds();
  o.passed = metrics_same && datasets_same;
  o.detail = fmt("metrics files (%zu bytes) identical: %s; dataset round trips identical: %s",
                 ma.size(), metrics_same ? "yes" : "no", datasets_same ? "yes" : "no") +
             bad;
  return o;
}

AblationResult run_ablation(const AblationPlan& plan, const DatasetBundle& data,
                            const std::function<void(const std::string&)>& log) {
  AblationResult res;
  for (std::uint64_t seed : plan.seeds) {
    for (const auto& abl : plan.ablations) {
      TrainConfig c = plan.base;
      c.apply_ablation(abl);
      c.seed = seed;
      std::string dirname = abl + "_seed" + std::to_string(seed);
      if (dirname.front() == '+') dirname.erase(0, 1);
      const auto dir = plan.out_dir / dirname;
      TrainOptions opt;
      opt.out_dir = dir;
      if (log) log("training " + dirname);
      Stopwatch sw;
      train(c, data, opt);
      const double secs = sw.seconds();
      res.max_run_seconds = std::max(res.max_run_seconds, secs);
      RunRecord r = load_run(dir);
      const SplitAccuracy a = final_accuracy(r);
      if (log) {
        log(fmt("%s: clean %.4f distorted %.4f occluded %.4f mean %.4f (%.0f s)", dirname.c_str(),
                a.clean, a.distorted, a.occluded, a.mean(), secs));
      }
      res.runs.push_back(std::move(r));
    }
  }
  res.grid = ablation_grid(res.runs);
  return res;
}

CheckOutcome judge_ablation(const AblationResult& result, double budget_seconds) {
  CheckOutcome o;
  const GridRow* g[4] = {};
  const char* names[4] = {"sup", "ccr", "+wvcr", "full"};
  for (const auto& row : result.grid) {
    for (int k = 0; k < 4; ++k) {
      if (row.ablation == names[k]) g[k] = &row;
    }
  }
  for (int k = 0; k < 4; ++k) {
    if (!g[k]) {
      o.detail = std::string("missing ablation ") + names[k];
      return o;
    }
  }
  const bool order = g[0]->median_mean < g[1]->median_mean &&
                     g[1]->median_mean < g[2]->median_mean &&
                     g[2]->median_mean <= g[3]->median_mean;
  const double ccr_gain = g[1]->median.distorted - g[0]->median.distorted;
  const bool gain = ccr_gain >= 0.05;
  const double occ = g[3]->median.occluded;
  const bool best_occ = occ > g[0]->median.occluded && occ > g[1]->median.occluded &&
                        occ > g[2]->median.occluded;
  const bool budget = result.max_run_seconds < budget_seconds;
  o.passed = order && gain && best_occ && budget;
  o.seconds = result.max_run_seconds;
  o.detail = fmt(
      "median mean sup %.4f ccr %.4f +wvcr %.4f full %.4f [order %s]; ccr distorted gain %+.4f "
      "[%s]; occluded sup %.4f ccr %.4f +wvcr %.4f full %.4f [full strictly best %s]; slowest "
      "run %.0f s [budget %s]",
      g[0]->median_mean, g[1]->median_mean, g[2]->median_mean, g[3]->median_mean,
      order ? "ok" : "violated", ccr_gain, gain ? "ok" : "below 0.05", g[0]->median.occluded,
      g[1]->median.occluded, g[2]->median.occluded, occ, best_occ ? "ok" : "no",
      result.max_run_seconds, budget ? "ok" : "exceeded");
  return o;
}

}  // namespace seqcr
