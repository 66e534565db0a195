#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "seqcr/autodiff.hpp"
#include "seqcr/tensor.hpp"

namespace seqcr {

/// Character set plus the three control tokens. Characters take ids
/// [0, n); BOS = n, EOS = n + 1, PAD = n + 2.
class Alphabet {
 public:
  static constexpr std::string_view kDefaultCharacters =
      "abcdefghijklmnopqrstuvwxyz0123456789";

  explicit Alphabet(std::string characters = std::string(kDefaultCharacters));

  const std::string& characters() const { return chars_; }
  std::size_t num_chars() const { return chars_.size(); }
  std::size_t size() const { return chars_.size() + 3; }
  std::size_t bos() const { return chars_.size(); }
  std::size_t eos() const { return chars_.size() + 1; }
  std::size_t pad() const { return chars_.size() + 2; }
  bool is_char(std::size_t token) const { return token < chars_.size(); }

  /// Case-folded lookup.
  std::optional<std::size_t> token_of(char c) const;
  char char_of(std::size_t token) const;

  /// Character tokens followed by EOS. Throws on characters outside the set.
  std::vector<std::size_t> encode(std::string_view word) const;
  /// Characters up to the first EOS; control tokens are skipped.
  std::string decode(std::span<const std::size_t> tokens) const;

 private:
  std::string chars_;
  std::vector<int> lookup_;
};

struct ModelConfig {
  std::size_t image_height = 16;
  std::size_t image_width = 64;
  /// Column embedding: a bank of filter_height x filter_width filters slid
  /// over the image, max-pooled over the vertical axis.
  std::size_t filter_height = 7;
  std::size_t filter_width = 3;
  std::size_t filter_channels = 32;
  std::size_t column_stride = 4;
  /// Each perceptron layer reads this many neighbouring columns, then the
  /// sequence is max-pooled by sqrt(column_stride).
  std::size_t column_window = 3;
  std::size_t feature_dim = 64;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t attention_dim = 64;
  std::size_t max_len = 12;
  std::string characters = std::string(Alphabet::kDefaultCharacters);

  std::size_t columns() const { return image_width / column_stride; }
  std::size_t column_pool() const {
    std::size_t p = 1;
    while ((p + 1) * (p + 1) <= column_stride) ++p;
    return p;
  }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Named parameter tensors in a fixed order. Student and teacher share the
/// same layout.
class ModelState {
 public:
  static ModelState initialize(const ModelConfig& config, std::uint64_t seed);

  std::size_t size() const { return params_.size(); }
  const std::string& name(std::size_t i) const { return params_[i].first; }
  Tensor& operator[](std::size_t i) { return params_[i].second; }
  const Tensor& operator[](std::size_t i) const { return params_[i].second; }
  const Tensor& get(std::string_view name) const;
  Tensor& get(std::string_view name);

  void add(std::string name, Tensor value);
  std::size_t parameter_count() const;
  bool same_layout(const ModelState& other) const;
  bool all_finite() const;

  bool operator==(const ModelState&) const = default;

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
};

/// ModelState placed on a tape.
struct BoundModel {
  std::vector<Var> params;
  Var at(std::size_t i) const { return params[i]; }
};

/// Number of character steps: the EOS step, when present, is excluded.
inline std::size_t char_steps(std::span<const std::size_t> tokens, std::size_t eos) {
  return !tokens.empty() && tokens.back() == eos ? tokens.size() - 1 : tokens.size();
}

/// One decoded image, detached from any tape.
struct DecodeTrace {
  std::vector<std::size_t> tokens;       // T entries; EOS-terminated unless truncated
  Tensor probs;                          // [T, |alphabet|]
  Tensor glimpses;                       // [T, feature_dim]
  std::vector<double> token_log_probs;   // log P_t[token_t]
  double confidence = 0.0;

  std::size_t length() const { return tokens.size(); }
  bool terminated(std::size_t eos) const { return !tokens.empty() && tokens.back() == eos; }
  /// Number of character steps (EOS step excluded).
  std::size_t char_steps(std::size_t eos) const { return seqcr::char_steps(tokens, eos); }
};

/// Product of per-step maximum probabilities.
double confidence(const Tensor& probs);
double confidence(const DecodeTrace& trace);

/// Batched decode over a tape: per-step rows for every image, plus each
/// image's own token sequence. Steps past an image's length are padding.
struct BatchTrace {
  std::vector<Var> logits;     // per step [B, V]
  std::vector<Var> log_probs;  // per step [B, V]
  std::vector<Var> glimpses;   // per step [B, D]
  std::vector<std::vector<std::size_t>> tokens;

  std::size_t batch_size() const { return tokens.size(); }
  std::size_t steps() const { return log_probs.size(); }
  std::size_t length(std::size_t b) const { return tokens[b].size(); }
  DecodeTrace sample(std::size_t b) const;
};

enum class Feedback { Argmax, StGumbel, Sample };

struct GreedyOptions {
  Feedback mode = Feedback::Argmax;
  std::size_t max_len = 12;
  double temperature = 1.0;
  /// Required for StGumbel and Sample modes.
  std::mt19937_64* rng = nullptr;
  /// StGumbel only: use zero noise instead of Gumbel draws.
  bool zero_noise = false;
};

/// Column-embedding + perceptron encoder with an additive-attention
/// recurrent decoder. The glimpse at step t is the attention context vector.
class Recognizer {
 public:
  explicit Recognizer(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const Alphabet& alphabet() const { return alphabet_; }

  BoundModel bind(Tape& tape, const ModelState& state, bool trainable) const;

  /// images: each [H, W] in [0, 1]. Returns features [B, columns, feature_dim].
  Var encode(Tape& tape, const BoundModel& model, std::span<const Tensor> images) const;

  /// Step t consumes token_{t-1} (BOS at t = 0). Each sequence must end in
  /// EOS or have length max_len.
  BatchTrace decode_teacher_forcing(
      const BoundModel& model, Var features,
      std::span<const std::vector<std::size_t>> token_seqs) const;

  BatchTrace decode_greedy(const BoundModel& model, Var features,
                           const GreedyOptions& options) const;

  /// Convenience: gradient-free argmax decode of images.
  std::vector<DecodeTrace> predict(const ModelState& state,
                                   std::span<const Tensor> images) const;

  /// Offsets (in columns) covered by the learned location filter.
  static constexpr int kLocationMin = -1;
  static constexpr int kLocationMax = 3;

  /// Indices of named parameters inside ModelState.
  enum Param : std::size_t {
    kEncConvW, kEncConvB,
    kEncW1, kEncB1, kEncW2, kEncB2,
    kEmbed,
    kGruWx, kGruBx, kGruWh, kGruBh,
    kAttWq, kAttWk, kAttPos, kAttV, kAttLoc,
    kOutW, kOutB,
    kNumParams,
  };

 private:
  struct DecoderState {
    Var keys;      // [B, J, A]
    Var features;  // [B, J, D]
    Var hidden;    // [B, H]
    Var glimpse;   // [B, D]
    Var attention;   // [B, J] previous step's weights
    Var transition;  // [J, J] location term: energy += attention * transition
  };

  DecoderState start(const BoundModel& model, Var features) const;
  /// Perceptron over `column_window` neighbouring rows of each of B
  /// sequences of length L; the blank row pads the borders and is carried
  /// through the same layer.
  std::pair<Var, Var> window_layer(Var seq, Var blank, std::size_t B, std::size_t L,
                                   std::size_t w, std::size_t b, bool activate,
                                   const BoundModel& model) const;
  Var pool_columns(Var seq, std::size_t rows_out, std::size_t pool) const;
  /// One decoder step given the previous-token embedding [B, E].
  std::pair<Var, Var> step(const BoundModel& model, DecoderState& s, Var prev_embed) const;

  ModelConfig config_;
  Alphabet alphabet_;
};

// ---- checkpoints ---------------------------------------------------------------

struct Checkpoint {
  std::uint64_t config_digest = 0;
  std::string config_text;
  ModelState student;
  std::optional<ModelState> teacher;
};

/// "SQCK", u32 version, u64 digest, u32 + config text, u32 block count, then
/// per block (student first, teacher second) u32 param count and per param
/// u16 + name, u8 rank, u32 dims, little-endian f64 payload.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace seqcr
