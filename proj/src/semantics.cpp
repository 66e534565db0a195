#include "seqcr/semantics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "seqcr/rng.hpp"

namespace seqcr {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

NGramEmbedder::NGramEmbedder(std::uint64_t seed, std::size_t dim, std::size_t min_n,
                             std::size_t max_n, std::string characters)
    : seed_(seed), dim_(dim), min_n_(min_n), max_n_(max_n), alphabet_(std::move(characters)) {
  if (dim_ == 0 || min_n_ == 0 || max_n_ < min_n_) {
    throw std::invalid_argument("NGramEmbedder: bad dimension or n-gram range");
  }
}

void NGramEmbedder::add_ngram(std::string_view gram, std::vector<double>& acc) const {
  std::mt19937_64 rng(derive_seed(seed_, {fnv1a(gram)}));
  for (double& v : acc) v += normal01(rng);
}

std::vector<double> NGramEmbedder::embed(std::string_view word) const {
  std::string clean;
  for (char c : word) {
    if (auto t = alphabet_.token_of(c)) {
      clean.push_back(alphabet_.char_of(*t));
    } else {
      dropped_.fetch_add(1);
    }
  }
  std::vector<double> acc(dim_, 0.0);
  if (clean.empty()) return acc;
  const std::string marked = "<" + clean + ">";
  for (std::size_t n = min_n_; n <= max_n_; ++n) {
    for (std::size_t i = 0; i + n <= marked.size(); ++i) {
      add_ngram(std::string_view(marked).substr(i, n), acc);
    }
  }
  // whole word, unless already covered by the n-gram range
  if (marked.size() > max_n_) add_ngram(marked, acc);
  const double norm = l2_norm(acc);
  for (double& v : acc) v /= norm;
  return acc;
}

double reward(const NGramEmbedder& embedder, std::string_view pred, std::string_view pseudo) {
  const auto a = embedder.embed(pred);
  const auto b = embedder.embed(pseudo);
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

double scst_weight(const RewardRecord& r, bool empty_sample, std::size_t steps) {
  if (empty_sample || steps == 0) return 0.0;
  return -r.advantage() / static_cast<double>(steps);
}

ScstBatch scst_loss(const BatchTrace& sampled, std::span<const std::string> baseline_strings,
                    std::span<const std::string> pseudo_labels,
                    std::span<const std::size_t> rows, const Alphabet& alphabet,
                    const NGramEmbedder& embedder) {
  if (baseline_strings.size() != rows.size() || pseudo_labels.size() != rows.size()) {
    throw std::invalid_argument("scst_loss: rows, baselines and pseudo labels differ in size");
  }
  if (sampled.steps() == 0) throw std::invalid_argument("scst_loss: empty sampled trace");
  Tape& tape = sampled.log_probs[0].tape();
  const std::size_t B = sampled.batch_size();
  const double denom = static_cast<double>(std::max<std::size_t>(rows.size(), 1));

  ScstBatch out;
  std::vector<double> row_weight(B, 0.0);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const std::size_t b = rows[k];
    const std::string text = alphabet.decode(sampled.tokens[b]);
    RewardRecord r{reward(embedder, text, pseudo_labels[k]),
                   reward(embedder, baseline_strings[k], pseudo_labels[k])};
    const bool empty = text.empty();
    out.empty_samples += empty;
    out.rewards.push_back(r);
    row_weight[b] += scst_weight(r, empty, sampled.length(b)) / denom;
  }

  Var total = tape.constant(Tensor::scalar(0.0));
  for (std::size_t t = 0; t < sampled.steps(); ++t) {
    std::vector<std::size_t> tokens(B, 0);
    Tensor w({B}, 0.0);
    bool any = false;
    for (std::size_t b = 0; b < B; ++b) {
      if (t < sampled.length(b)) {
        tokens[b] = sampled.tokens[b][t];
        w[b] = row_weight[b];
        any = true;
      }
    }
    if (!any) continue;
    total = add(total, sum(mul(pick(sampled.log_probs[t], tokens), tape.constant(std::move(w)))));
  }
  out.loss = total;
  return out;
}

std::vector<Tensor> exact_expected_scst_gradient(const Recognizer& recognizer,
                                                 const ModelState& state, const Tensor& image,
                                                 const std::string& pseudo_label,
                                                 const NGramEmbedder& embedder) {
  const Alphabet& alphabet = recognizer.alphabet();
  const std::size_t max_len = recognizer.config().max_len;
  if (alphabet.num_chars() > 4 || max_len > 3) {
    throw std::invalid_argument("exact_expected_scst_gradient: sequence space too large (" +
                                std::to_string(alphabet.num_chars()) + " characters, max_len " +
                                std::to_string(max_len) + ")");
  }
  const std::span<const Tensor> images(&image, 1);
  const std::string baseline = alphabet.decode(recognizer.predict(state, images)[0].tokens);
  const double baseline_reward = reward(embedder, baseline, pseudo_label);

  std::vector<Tensor> expected;
  for (std::size_t i = 0; i < state.size(); ++i) expected.emplace_back(state[i].shape(), 0.0);

  const std::size_t V = alphabet.size();
  std::vector<std::size_t> seq;
  std::function<void()> visit = [&]() {
    const bool finished = !seq.empty() && (seq.back() == alphabet.eos() || seq.size() == max_len);
    if (!finished) {
      for (std::size_t v = 0; v < V; ++v) {
        seq.push_back(v);
        visit();
        seq.pop_back();
      }
      return;
    }
    Tape tape;
    BoundModel m = recognizer.bind(tape, state, true);
    Var f = recognizer.encode(tape, m, images);
    const std::vector<std::size_t> seqs[] = {seq};
    BatchTrace tf = recognizer.decode_teacher_forcing(m, f, seqs);
    double log_p = 0.0;
    Var sum_logp = tape.constant(Tensor::scalar(0.0));
    for (std::size_t t = 0; t < seq.size(); ++t) {
      const std::size_t tok[] = {seq[t]};
      Var lp = pick(tf.log_probs[t], tok);
      log_p += lp.value()[0];
      sum_logp = add(sum_logp, sum(lp));
    }
    const std::string text = alphabet.decode(seq);
    const RewardRecord r{reward(embedder, text, pseudo_label), baseline_reward};
    const double w = scst_weight(r, text.empty(), seq.size());
    if (w == 0.0) return;
    Gradients g = tape.backward(scale(sum_logp, w));
    const double prob = std::exp(log_p);
    for (std::size_t i = 0; i < state.size(); ++i) {
      const Tensor& gi = g[m.at(i)];
      for (std::size_t k = 0; k < gi.size(); ++k) expected[i][k] += prob * gi[k];
    }
  };
  visit();
  return expected;
}

}  // namespace seqcr
