#include "seqcr/recognizer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>

#include "seqcr/binary_io.hpp"
#include "seqcr/rng.hpp"

namespace seqcr {

// ---- Alphabet ---------------------------------------------------------------------

Alphabet::Alphabet(std::string characters) : chars_(std::move(characters)), lookup_(256, -1) {
  if (chars_.empty()) throw std::invalid_argument("alphabet: no characters");
  for (std::size_t i = 0; i < chars_.size(); ++i) {
    const auto c = static_cast<unsigned char>(
        std::tolower(static_cast<unsigned char>(chars_[i])));
    if (lookup_[c] != -1) {
      throw std::invalid_argument(std::string("alphabet: duplicate character '") +
                                  chars_[i] + "'");
    }
    chars_[i] = static_cast<char>(c);
    lookup_[c] = static_cast<int>(i);
  }
}

std::optional<std::size_t> Alphabet::token_of(char c) const {
  const int id = lookup_[static_cast<unsigned char>(
      std::tolower(static_cast<unsigned char>(c)))];
  if (id < 0) return std::nullopt;
  return static_cast<std::size_t>(id);
}

char Alphabet::char_of(std::size_t token) const {
  if (!is_char(token)) {
    throw std::out_of_range("alphabet: token " + std::to_string(token) +
                            " is not a character");
  }
  return chars_[token];
}

std::vector<std::size_t> Alphabet::encode(std::string_view word) const {
  std::vector<std::size_t> out;
  out.reserve(word.size() + 1);
  for (char c : word) {
    auto t = token_of(c);
    if (!t) {
      throw std::invalid_argument(std::string("alphabet: character '") + c +
                                  "' not in alphabet");
    }
    out.push_back(*t);
  }
  out.push_back(eos());
  return out;
}

std::string Alphabet::decode(std::span<const std::size_t> tokens) const {
  std::string out;
  for (std::size_t t : tokens) {
    if (t == eos()) break;
    if (is_char(t)) out.push_back(chars_[t]);
  }
  return out;
}

// ---- config / state -------------------------------------------------------------------

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw std::invalid_argument(std::string("model config: ") + what + " must be > 0");
  };
  positive(image_height, "image_height");
  positive(image_width, "image_width");
  positive(filter_height, "filter_height");
  positive(filter_width, "filter_width");
  positive(filter_channels, "filter_channels");
  positive(column_stride, "column_stride");
  positive(column_window, "column_window");
  positive(feature_dim, "feature_dim");
  positive(embed_dim, "embed_dim");
  positive(hidden_dim, "hidden_dim");
  positive(attention_dim, "attention_dim");
  positive(max_len, "max_len");
  if (filter_height > image_height) {
    throw std::invalid_argument("model config: filter_height exceeds image_height");
  }
  if (filter_width % 2 == 0) {
    throw std::invalid_argument("model config: filter_width must be odd");
  }
  if (column_pool() * column_pool() != column_stride) {
    throw std::invalid_argument("model config: column_stride must be a perfect square");
  }
  if (image_width % column_stride != 0) {
    throw std::invalid_argument("model config: image_width must be a multiple of column_stride");
  }
  if (column_window % 2 == 0) {
    throw std::invalid_argument("model config: column_window must be odd");
  }
  Alphabet check(characters);
}

namespace {

Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.data()) v = uniform(rng, -limit, limit);
  return t;
}

}  // namespace

ModelState ModelState::initialize(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(derive_seed(seed, {0x1417}));
  const std::size_t vocab = Alphabet(c.characters).size();
  const std::size_t C = c.filter_channels, K = c.filter_height * c.filter_width;
  const std::size_t patch = C * c.column_window;
  const std::size_t patch2 = c.feature_dim * c.column_window;
  const std::size_t F = c.feature_dim, H = c.hidden_dim, A = c.attention_dim;
  const std::size_t E = c.embed_dim, J = c.columns();
  ModelState s;
  // order must match Recognizer::Param
  s.add("enc.conv.w", glorot({K, C}, K, C, rng));
  s.add("enc.conv.b", Tensor({1, C}, 0.0));
  s.add("enc.w1", glorot({patch, F}, patch, F, rng));
  s.add("enc.b1", Tensor({1, F}, 0.0));
  s.add("enc.w2", glorot({patch2, F}, patch2, F, rng));
  s.add("enc.b2", Tensor({1, F}, 0.0));
  s.add("dec.embed", glorot({vocab, E}, vocab, E, rng));
  s.add("dec.gru.wx", glorot({E + F, 3 * H}, E + F, H, rng));
  s.add("dec.gru.bx", Tensor({1, 3 * H}, 0.0));
  s.add("dec.gru.wh", glorot({H, 3 * H}, H, H, rng));
  s.add("dec.gru.bh", Tensor({1, 3 * H}, 0.0));
  s.add("dec.att.wq", glorot({H, A}, H, A, rng));
  s.add("dec.att.wk", glorot({F, A}, F, A, rng));
  s.add("dec.att.pos", glorot({J, A}, J, A, rng));
  s.add("dec.att.v", glorot({A, 1}, A, 1, rng));
  s.add("dec.att.loc",
        Tensor({1, static_cast<std::size_t>(Recognizer::kLocationMax - Recognizer::kLocationMin + 1)},
               0.0));
  s.add("dec.out.w", glorot({H + F, vocab}, H + F, vocab, rng));
  s.add("dec.out.b", Tensor({1, vocab}, 0.0));
  return s;
}

const Tensor& ModelState::get(std::string_view name) const {
  for (const auto& [n, t] : params_) {
    if (n == name) return t;
  }
  throw std::out_of_range("model state: no parameter '" + std::string(name) + "'");
}

Tensor& ModelState::get(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).get(name));
}

void ModelState::add(std::string name, Tensor value) {
  params_.emplace_back(std::move(name), std::move(value));
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.second.size();
  return n;
}

bool ModelState::same_layout(const ModelState& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].first != other.params_[i].first ||
        params_[i].second.shape() != other.params_[i].second.shape()) {
      return false;
    }
  }
  return true;
}

bool ModelState::all_finite() const {
  for (const auto& p : params_) {
    for (double v : p.second.data()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

// ---- traces ---------------------------------------------------------------------------

double confidence(const Tensor& probs) {
  double s = 1.0;
  for (std::size_t t = 0; t < probs.dim(0); ++t) {
    auto row = probs.row(t);
    s *= *std::max_element(row.begin(), row.end());
  }
  return s;
}

double confidence(const DecodeTrace& trace) { return confidence(trace.probs); }

DecodeTrace BatchTrace::sample(std::size_t b) const {
  DecodeTrace out;
  out.tokens = tokens[b];
  const std::size_t T = out.tokens.size();
  if (T == 0) return out;
  const std::size_t V = log_probs[0].shape()[1];
  const std::size_t D = glimpses[0].shape()[1];
  out.probs = Tensor({T, V});
  out.glimpses = Tensor({T, D});
  for (std::size_t t = 0; t < T; ++t) {
    auto lp = log_probs[t].value().row(b);
    auto p = out.probs.row(t);
    for (std::size_t v = 0; v < V; ++v) p[v] = std::exp(lp[v]);
    auto z = glimpses[t].value().row(b);
    std::copy(z.begin(), z.end(), out.glimpses.row(t).begin());
    out.token_log_probs.push_back(lp[out.tokens[t]]);
  }
  out.confidence = confidence(out.probs);
  return out;
}

// ---- Recognizer -----------------------------------------------------------------------

Recognizer::Recognizer(ModelConfig config)
    : config_(std::move(config)), alphabet_(config_.characters) {
  config_.validate();
}

BoundModel Recognizer::bind(Tape& tape, const ModelState& state, bool trainable) const {
  if (state.size() != kNumParams) {
    throw std::invalid_argument("recognizer: model state has " + std::to_string(state.size()) +
                                " tensors, expected " + std::to_string(kNumParams));
  }
  BoundModel m;
  for (std::size_t i = 0; i < state.size(); ++i) m.params.push_back(tape.leaf(state[i], trainable));
  return m;
}

Var Recognizer::encode(Tape& tape, const BoundModel& model,
                       std::span<const Tensor> images) const {
  const std::size_t B = images.size();
  if (B == 0) throw std::invalid_argument("encode: empty batch");
  const std::size_t H = config_.image_height, W = config_.image_width;
  const std::size_t fh = config_.filter_height, fw = config_.filter_width;
  const std::size_t C = config_.filter_channels, Y = H - fh + 1;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(fw / 2);
  Tensor pixels({B * Y * W, fh * fw}, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor& img = images[b];
    if (img.shape() != Shape{H, W}) {
      throw std::invalid_argument("encode: image shape " + to_string(img.shape()) +
                                  " does not match " + to_string(Shape{H, W}));
    }
    for (std::size_t y = 0; y < Y; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        auto row = pixels.row((b * Y + y) * W + x);
        for (std::size_t r = 0; r < fh; ++r) {
          for (std::size_t c = 0; c < fw; ++c) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x + c) - pad;
            if (xx >= 0 && xx < static_cast<std::ptrdiff_t>(W)) {
              row[r * fw + c] = img.at(y + r, static_cast<std::size_t>(xx));
            }
          }
        }
      }
    }
  }
  // column embeddings [B*W, C]; blank is the embedding of an all-zero column
  const Var conv_b = model.at(kEncConvB);
  Var e = relu(add(matmul(tape.constant(std::move(pixels)), model.at(kEncConvW)), conv_b));
  e = reshape(max(reshape(e, {B, Y, W * C}), 1), {B * W, C});
  Var blank = relu(conv_b);

  const std::size_t pool = config_.column_pool();
  auto [h1, blank1] = window_layer(e, blank, B, W, kEncW1, kEncB1, true, model);
  h1 = pool_columns(h1, B * W / pool, pool);
  auto [h2, blank2] = window_layer(h1, blank1, B, W / pool, kEncW2, kEncB2, false, model);
  (void)blank2;
  h2 = pool_columns(h2, B * W / (pool * pool), pool);
  return reshape(h2, {B, config_.columns(), config_.feature_dim});
}

std::pair<Var, Var> Recognizer::window_layer(Var seq, Var blank, std::size_t B, std::size_t L,
                                              std::size_t w, std::size_t b, bool activate,
                                              const BoundModel& model) const {
  const std::size_t win = config_.column_window, cin = seq.shape()[1];
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(win / 2);
  const Var parts[] = {seq, blank};
  const Var table = concat(parts, 0);
  std::vector<std::size_t> ids;
  ids.reserve(B * L * win);
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t k = 0; k < win; ++k) {
        const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(l + k) - half;
        ids.push_back(x >= 0 && x < static_cast<std::ptrdiff_t>(L)
                          ? n * L + static_cast<std::size_t>(x)
                          : B * L);
      }
    }
  }
  Var out = add(matmul(reshape(gather_rows(table, ids), {B * L, win * cin}), model.at(w)),
                model.at(b));
  const std::vector<std::size_t> blank_ids(win, 0);
  Var blank_out = add(matmul(reshape(gather_rows(blank, blank_ids), {1, win * cin}), model.at(w)),
                      model.at(b));
  if (activate) {
    out = relu(out);
    blank_out = relu(blank_out);
  }
  return {out, blank_out};
}

Var Recognizer::pool_columns(Var seq, std::size_t rows_out, std::size_t pool) const {
  const std::size_t c = seq.shape()[1];
  if (pool == 1) return seq;
  return max(reshape(seq, {rows_out, pool, c}), 1);
}

Recognizer::DecoderState Recognizer::start(const BoundModel& model, Var features) const {
  const Shape& s = features.shape();
  const std::size_t J = config_.columns(), D = config_.feature_dim;
  if (s.size() != 3 || s[1] != J || s[2] != D) {
    throw std::invalid_argument("decode: features shape " + to_string(s) + " expected [B," +
                                std::to_string(J) + "," + std::to_string(D) + "]");
  }
  const std::size_t B = s[0], A = config_.attention_dim;
  Tape& tape = features.tape();
  DecoderState st;
  st.features = features;
  Var flat = reshape(features, {B * J, D});
  Var keys = reshape(matmul(flat, model.at(kAttWk)), {B, J, A});
  st.keys = add(keys, reshape(model.at(kAttPos), {1, J, A}));
  st.hidden = tape.constant(Tensor({B, config_.hidden_dim}, 0.0));
  st.glimpse = tape.constant(Tensor({B, D}, 0.0));
  st.attention = tape.constant(Tensor({B, J}, 0.0));
  const std::size_t taps = static_cast<std::size_t>(kLocationMax - kLocationMin + 1);
  Tensor shifts({taps, J * J}, 0.0);
  for (std::size_t k = 0; k < taps; ++k) {
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k) + kLocationMin;
    for (std::size_t i = 0; i < J; ++i) {
      const std::ptrdiff_t j = static_cast<std::ptrdiff_t>(i) + off;
      if (j >= 0 && j < static_cast<std::ptrdiff_t>(J)) shifts.at(k, i * J + static_cast<std::size_t>(j)) = 1.0;
    }
  }
  st.transition = reshape(matmul(model.at(kAttLoc), tape.constant(std::move(shifts))), {J, J});
  return st;
}

std::pair<Var, Var> Recognizer::step(const BoundModel& model, DecoderState& s,
                                     Var prev_embed) const {
  const std::size_t Hd = config_.hidden_dim, A = config_.attention_dim;
  const std::size_t J = config_.columns(), D = config_.feature_dim;
  const std::size_t B = s.features.shape()[0];

  const Var parts[] = {prev_embed, s.glimpse};
  Var x = concat(parts, 1);
  Var gx = add(matmul(x, model.at(kGruWx)), model.at(kGruBx));
  Var gh = add(matmul(s.hidden, model.at(kGruWh)), model.at(kGruBh));
  Var r = sigmoid(add(slice(gx, 1, 0, Hd), slice(gh, 1, 0, Hd)));
  Var u = sigmoid(add(slice(gx, 1, Hd, 2 * Hd), slice(gh, 1, Hd, 2 * Hd)));
  Var n = tanh(add(slice(gx, 1, 2 * Hd, 3 * Hd), mul(r, slice(gh, 1, 2 * Hd, 3 * Hd))));
  s.hidden = add(n, mul(u, sub(s.hidden, n)));

  Var q = reshape(matmul(s.hidden, model.at(kAttWq)), {B, 1, A});
  Var energy = reshape(matmul(reshape(tanh(add(s.keys, q)), {B * J, A}), model.at(kAttV)),
                       {B, J});
  energy = add(energy, matmul(s.attention, s.transition));
  s.attention = softmax(energy, 1);
  Var alpha = reshape(s.attention, {B, 1, J});
  s.glimpse = reshape(matmul(alpha, s.features), {B, D});

  const Var out_parts[] = {s.hidden, s.glimpse};
  Var logits = add(matmul(concat(out_parts, 1), model.at(kOutW)), model.at(kOutB));
  return {logits, s.glimpse};
}

BatchTrace Recognizer::decode_teacher_forcing(
    const BoundModel& model, Var features,
    std::span<const std::vector<std::size_t>> token_seqs) const {
  const std::size_t B = features.shape().at(0);
  if (token_seqs.size() != B) {
    throw std::invalid_argument("decode_teacher_forcing: " + std::to_string(token_seqs.size()) +
                                " sequences for batch of " + std::to_string(B));
  }
  std::size_t steps = 0;
  for (const auto& seq : token_seqs) {
    if (seq.empty() || seq.size() > config_.max_len) {
      throw std::invalid_argument("decode_teacher_forcing: sequence length " +
                                  std::to_string(seq.size()) + " outside [1, " +
                                  std::to_string(config_.max_len) + "]");
    }
    for (std::size_t t : seq) {
      if (t >= alphabet_.size()) {
        throw std::invalid_argument("decode_teacher_forcing: token " + std::to_string(t) +
                                    " outside alphabet of " + std::to_string(alphabet_.size()));
      }
    }
    if (seq.back() != alphabet_.eos() && seq.size() != config_.max_len) {
      throw std::invalid_argument("decode_teacher_forcing: sequence not EOS-terminated");
    }
    steps = std::max(steps, seq.size());
  }

  DecoderState s = start(model, features);
  BatchTrace trace;
  trace.tokens.assign(token_seqs.begin(), token_seqs.end());
  std::vector<std::size_t> prev(B, alphabet_.bos());
  for (std::size_t t = 0; t < steps; ++t) {
    auto [logits, glimpse] = step(model, s, gather_rows(model.at(kEmbed), prev));
    trace.logits.push_back(logits);
    trace.log_probs.push_back(log_softmax(logits, 1));
    trace.glimpses.push_back(glimpse);
    for (std::size_t b = 0; b < B; ++b) {
      prev[b] = t < token_seqs[b].size() ? token_seqs[b][t] : alphabet_.pad();
    }
  }
  return trace;
}

BatchTrace Recognizer::decode_greedy(const BoundModel& model, Var features,
                                     const GreedyOptions& options) const {
  if (options.max_len == 0) throw std::invalid_argument("decode_greedy: max_len must be >= 1");
  if (options.mode != Feedback::Argmax && options.rng == nullptr && !options.zero_noise) {
    throw std::invalid_argument("decode_greedy: sampling modes need an rng");
  }
  if (options.mode == Feedback::Sample && options.rng == nullptr) {
    throw std::invalid_argument("decode_greedy: sample mode needs an rng");
  }
  const std::size_t B = features.shape().at(0);
  const std::size_t V = alphabet_.size();
  DecoderState s = start(model, features);
  BatchTrace trace;
  trace.tokens.assign(B, {});
  std::vector<bool> done(B, false);
  std::vector<std::size_t> prev(B, alphabet_.bos());
  Var prev_embed = gather_rows(model.at(kEmbed), prev);

  for (std::size_t t = 0; t < options.max_len; ++t) {
    auto [logits, glimpse] = step(model, s, prev_embed);
    Var logp = log_softmax(logits, 1);
    trace.logits.push_back(logits);
    trace.log_probs.push_back(logp);
    trace.glimpses.push_back(glimpse);
    const Tensor& lp = logp.value();

    std::vector<std::size_t> chosen(B);
    if (options.mode == Feedback::StGumbel) {
      Tensor noise = options.zero_noise ? Tensor({B, V}, 0.0)
                                        : gumbel_noise({B, V}, *options.rng);
      Var onehot = st_gumbel(logits, options.temperature, noise);
      for (std::size_t b = 0; b < B; ++b) {
        auto row = onehot.value().row(b);
        chosen[b] = static_cast<std::size_t>(
            std::max_element(row.begin(), row.end()) - row.begin());
      }
      prev_embed = matmul(onehot, model.at(kEmbed));
    } else {
      for (std::size_t b = 0; b < B; ++b) {
        auto row = lp.row(b);
        if (options.mode == Feedback::Argmax) {
          chosen[b] = static_cast<std::size_t>(
              std::max_element(row.begin(), row.end()) - row.begin());
        } else {
          const double u = uniform01(*options.rng);
          double c = 0.0;
          chosen[b] = V - 1;
          for (std::size_t v = 0; v < V; ++v) {
            c += std::exp(row[v]);
            if (u < c) {
              chosen[b] = v;
              break;
            }
          }
        }
      }
      prev_embed = gather_rows(model.at(kEmbed), chosen);
    }

    bool all_done = true;
    for (std::size_t b = 0; b < B; ++b) {
      if (!done[b]) {
        trace.tokens[b].push_back(chosen[b]);
        if (chosen[b] == alphabet_.eos()) done[b] = true;
      }
      all_done = all_done && done[b];
    }
    if (all_done) break;
  }
  return trace;
}

std::vector<DecodeTrace> Recognizer::predict(const ModelState& state,
                                             std::span<const Tensor> images) const {
  constexpr std::size_t kChunk = 128;
  std::vector<DecodeTrace> out;
  out.reserve(images.size());
  for (std::size_t begin = 0; begin < images.size(); begin += kChunk) {
    const std::size_t n = std::min(kChunk, images.size() - begin);
    Tape tape;
    BoundModel m = bind(tape, state, false);
    Var f = encode(tape, m, images.subspan(begin, n));
    GreedyOptions opts;
    opts.max_len = config_.max_len;
    BatchTrace trace = decode_greedy(m, f, opts);
    for (std::size_t b = 0; b < n; ++b) out.push_back(trace.sample(b));
  }
  return out;
}

// ---- checkpoints ----------------------------------------------------------------------

namespace {
constexpr std::string_view kCheckpointMagic = "SQCK";
constexpr std::uint32_t kCheckpointVersion = 1;

void write_state(ByteWriter& w, const ModelState& s) {
  w.u32(static_cast<std::uint32_t>(s.size()));
  for (std::size_t i = 0; i < s.size(); ++i) {
    w.u16(static_cast<std::uint16_t>(s.name(i).size()));
    w.raw(s.name(i));
    const Tensor& t = s[i];
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) w.f64(v);
  }
}

ModelState read_state(ByteReader& r) {
  ModelState s;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.raw(r.u16());
    const std::uint8_t rank = r.u8();
    Shape shape;
    for (std::uint8_t d = 0; d < rank; ++d) {
      shape.push_back(r.u32());
      if (shape.back() == 0) r.fail("zero dimension in parameter '" + name + "'");
    }
    std::vector<double> data(numel(shape));
    for (double& v : data) v = r.f64();
    s.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return s;
}
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u64(ckpt.config_digest);
  w.u32(static_cast<std::uint32_t>(ckpt.config_text.size()));
  w.raw(ckpt.config_text);
  w.u32(ckpt.teacher ? 2 : 1);
  write_state(w, ckpt.student);
  if (ckpt.teacher) write_state(w, *ckpt.teacher);
  w.write_file(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  ByteReader r = ByteReader::from_file(path);
  if (r.raw(4) != kCheckpointMagic) throw FormatError("bad checkpoint magic", 0);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    r.fail("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.config_digest = r.u64();
  c.config_text = r.raw(r.u32());
  const std::uint32_t blocks = r.u32();
  if (blocks < 1 || blocks > 2) r.fail("bad block count " + std::to_string(blocks));
  c.student = read_state(r);
  if (blocks == 2) {
    c.teacher = read_state(r);
    if (!c.teacher->same_layout(c.student)) r.fail("teacher layout differs from student");
  }
  if (!r.at_end()) r.fail("trailing bytes");
  return c;
}

}  // namespace seqcr
