#pragma once

// Word-level semantic consistency: hashed character n-gram word vectors, a
// cosine reward, and the self-critical sequence training (SCST) loss.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "seqcr/autodiff.hpp"
#include "seqcr/recognizer.hpp"

namespace seqcr {

/// fastText-style subword embedding without training: every n-gram of the
/// boundary-marked word "<w>" (n in [min_n, max_n]) plus the whole marked
/// word maps through a seeded hash to a fixed Gaussian vector. A word is the
/// L2-normalised sum of its n-gram vectors. Immutable apart from a counter of
/// dropped characters, so it can be shared across threads.
class NGramEmbedder {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0x5eed5eedULL;

  explicit NGramEmbedder(std::uint64_t seed = kDefaultSeed, std::size_t dim = 64,
                         std::size_t min_n = 1, std::size_t max_n = 3,
                         std::string characters = std::string(Alphabet::kDefaultCharacters));

  /// Unit vector, or the zero vector for an empty (post-filter) word.
  std::vector<double> embed(std::string_view word) const;

  std::size_t dim() const { return dim_; }
  std::size_t dropped_characters() const { return dropped_.load(); }

 private:
  void add_ngram(std::string_view gram, std::vector<double>& acc) const;

  std::uint64_t seed_;
  std::size_t dim_, min_n_, max_n_;
  Alphabet alphabet_;
  mutable std::atomic<std::size_t> dropped_{0};
};

/// Cosine similarity of the two word vectors; 0 if either is empty.
double reward(const NGramEmbedder& embedder, std::string_view pred, std::string_view pseudo);

struct RewardRecord {
  double sampled = 0.0;   // r(sampled string, pseudo label)
  double baseline = 0.0;  // r(greedy string, pseudo label)
  double advantage() const { return sampled - baseline; }
};

struct ScstBatch {
  Var loss;
  std::vector<RewardRecord> rewards;  // one per requested row
  std::size_t empty_samples = 0;      // rows whose sampled string was empty (loss 0)
};

/// Self-critical loss over the requested batch rows:
///   -(r(sampled) - r(baseline)) * (1/T) * sum_t log p_t(sampled token_t)
/// averaged over rows.size(). T counts every sampled step including EOS.
/// Rewards are constants; the gradient flows through the log-probabilities.
ScstBatch scst_loss(const BatchTrace& sampled, std::span<const std::string> baseline_strings,
                    std::span<const std::string> pseudo_labels,
                    std::span<const std::size_t> rows, const Alphabet& alphabet,
                    const NGramEmbedder& embedder);

/// Per-sequence SCST loss value shared by the estimator and the oracle.
double scst_weight(const RewardRecord& r, bool empty_sample, std::size_t steps);

/// Exact expectation of the SCST gradient for one image under `state`,
/// summing over every decodable sequence. The baseline is the argmax decode.
/// Only for tiny models: at most 4 characters and max_len <= 3.
std::vector<Tensor> exact_expected_scst_gradient(const Recognizer& recognizer,
                                                 const ModelState& state, const Tensor& image,
                                                 const std::string& pseudo_label,
                                                 const NGramEmbedder& embedder);

}  // namespace seqcr
