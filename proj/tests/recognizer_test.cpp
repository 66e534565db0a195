#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "seqcr/binary_io.hpp"
#include "seqcr/objective.hpp"
#include "seqcr/recognizer.hpp"
#include "seqcr/rng.hpp"

namespace seqcr {
namespace {

ModelConfig tiny_config() {
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
  c.max_len = 4;
  c.characters = "abc";
  return c;
}

Tensor random_image(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  Tensor t({h, w});
  for (double& v : t.data()) v = uniform(rng, 0.05, 1.0);
  return t;
}

// Initial state with every bias and the location filter drawn at random, so
// no unit sits exactly at a relu kink and no two attention energies tie.
ModelState jittered_state(const ModelConfig& c, std::uint64_t seed) {
  ModelState s = ModelState::initialize(c, seed);
  std::mt19937_64 rng(seed + 77);
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (double& v : s[i].data()) v += uniform(rng, -0.3, 0.3);
  }
  return s;
}

Var encode_one(const Recognizer& rec, Tape& tape, const ModelState& s, const Tensor& img) {
  BoundModel m = rec.bind(tape, s, false);
  const Tensor imgs[] = {img};
  return rec.encode(tape, m, imgs);
}

TEST(Alphabet, DefaultHasThirtyNineTokens) {
  Alphabet a;
  EXPECT_EQ(a.num_chars(), 36u);
  EXPECT_EQ(a.size(), 39u);
  EXPECT_EQ(a.eos(), a.bos() + 1);
}

TEST(Alphabet, EncodeDecodeRoundTripFoldsCase) {
  Alphabet a;
  const auto tokens = a.encode("Ab0");
  ASSERT_EQ(tokens.size(), 4u);
  EXPECT_EQ(tokens.back(), a.eos());
  EXPECT_EQ(a.decode(tokens), "ab0");
}

TEST(Alphabet, RejectsUnknownCharacter) {
  Alphabet a;
  EXPECT_THROW(a.encode("a-b"), std::invalid_argument);
}

TEST(Alphabet, DecodeStopsAtEosAndSkipsControls) {
  Alphabet a("ab");
  const std::vector<std::size_t> t = {a.bos(), 0, a.pad(), 1, a.eos(), 0};
  EXPECT_EQ(a.decode(t), "ab");
}

TEST(ModelState, ParameterCountFixedByConfig) {
  const ModelConfig c = tiny_config();
  const auto s1 = ModelState::initialize(c, 1);
  const auto s2 = ModelState::initialize(c, 2);
  EXPECT_EQ(s1.size(), static_cast<std::size_t>(Recognizer::kNumParams));
  EXPECT_EQ(s1.parameter_count(), s2.parameter_count());
  EXPECT_TRUE(s1.same_layout(s2));
  EXPECT_FALSE(s1 == s2);
  EXPECT_TRUE(s1 == ModelState::initialize(c, 1));
  EXPECT_TRUE(s1.all_finite());
}

TEST(Encoder, DefaultOutputIsSixteenColumnsOfSixtyFour) {
  ModelConfig c;
  Recognizer rec(c);
  ModelState s = ModelState::initialize(c, 3);
  std::mt19937_64 rng(5);
  Tape tape;
  Var f = encode_one(rec, tape, s, random_image(16, 64, rng));
  EXPECT_EQ(f.shape(), (Shape{1, 16, 64}));
}

TEST(Encoder, RejectsWrongImageSize) {
  ModelConfig c;
  Recognizer rec(c);
  ModelState s = ModelState::initialize(c, 3);
  Tape tape;
  EXPECT_THROW(encode_one(rec, tape, s, Tensor({16, 60})), std::invalid_argument);
}

// Features of an all-zero image, computed directly from the parameters:
// every column sees only the filter bias, so all columns share one value.
std::vector<double> blank_pathway(const ModelConfig& c, const ModelState& s) {
  const std::size_t C = c.filter_channels, F = c.feature_dim, w = c.column_window;
  std::vector<double> e(C);
  for (std::size_t k = 0; k < C; ++k) e[k] = std::max(0.0, s[Recognizer::kEncConvB][k]);
  auto layer = [&](const std::vector<double>& in, const Tensor& W, const Tensor& b, bool act) {
    std::vector<double> out(F);
    for (std::size_t j = 0; j < F; ++j) {
      double acc = b[j];
      for (std::size_t k = 0; k < w; ++k) {
        for (std::size_t i = 0; i < in.size(); ++i) acc += in[i] * W.at(k * in.size() + i, j);
      }
      out[j] = act ? std::max(0.0, acc) : acc;
    }
    return out;
  };
  auto h1 = layer(e, s[Recognizer::kEncW1], s[Recognizer::kEncB1], true);
  return layer(h1, s[Recognizer::kEncW2], s[Recognizer::kEncB2], false);
}

TEST(Encoder, ZeroImageGivesBiasPathwayInEveryColumn) {
  ModelConfig c;
  Recognizer rec(c);
  ModelState s = jittered_state(c, 4);
  Tape tape;
  const Tensor f = encode_one(rec, tape, s, Tensor({16, 64}, 0.0)).value();
  const auto expect = blank_pathway(c, s);
  for (std::size_t j = 0; j < c.columns(); ++j) {
    for (std::size_t d = 0; d < c.feature_dim; ++d) {
      EXPECT_NEAR(f[j * c.feature_dim + d], expect[d], 1e-12);
      EXPECT_EQ(f[j * c.feature_dim + d], f[d]);
    }
  }
}

// Output columns whose receptive field covers pixel column x: the filter
// reaches filter_width/2 each way, each perceptron layer column_window/2
// each way, and each pooling stage divides positions by the pool size.
std::set<std::size_t> receptive_columns(const ModelConfig& c, std::size_t x) {
  const long pool = static_cast<long>(c.column_pool());
  const long fr = static_cast<long>(c.filter_width / 2);
  const long wr = static_cast<long>(c.column_window / 2);
  long lo = static_cast<long>(x) - fr - wr;
  long hi = static_cast<long>(x) + fr + wr;
  lo = std::max(lo, 0L) / pool;
  hi = std::min(hi, static_cast<long>(c.image_width) - 1) / pool;
  lo = std::max(lo - wr, 0L) / pool;
  hi = std::min(hi + wr, static_cast<long>(c.image_width / pool) - 1) / pool;
  std::set<std::size_t> out;
  for (long j = lo; j <= hi; ++j) out.insert(static_cast<std::size_t>(j));
  return out;
}

TEST(Encoder, OneColumnChangeStaysInsideReceptiveField) {
  ModelConfig c;
  Recognizer rec(c);
  ModelState s = jittered_state(c, 6);
  std::mt19937_64 rng(7);
  const Tensor base = random_image(16, 64, rng);
  Tape tape;
  const Tensor f0 = encode_one(rec, tape, s, base).value();
  for (std::size_t x : {0u, 1u, 17u, 30u, 63u}) {
    Tensor img = base;
    for (std::size_t y = 0; y < 16; ++y) img.at(y, x) = 1.0 - img.at(y, x);
    Tape t2;
    const Tensor f1 = encode_one(rec, t2, s, img).value();
    const auto field = receptive_columns(c, x);
    bool changed_inside = false;
    for (std::size_t j = 0; j < c.columns(); ++j) {
      bool same = true;
      for (std::size_t d = 0; d < c.feature_dim; ++d) {
        same = same && f0[j * c.feature_dim + d] == f1[j * c.feature_dim + d];
      }
      if (!field.contains(j)) {
        EXPECT_TRUE(same) << "column " << j << " changed for pixel column " << x;
      } else if (!same) {
        changed_inside = true;
      }
    }
    EXPECT_TRUE(changed_inside) << "pixel column " << x;
  }
}

TEST(Encoder, BatchRowsAreIndependent) {
  ModelConfig c;
  Recognizer rec(c);
  ModelState s = jittered_state(c, 8);
  std::mt19937_64 rng(9);
  const Tensor a = random_image(16, 64, rng), b = random_image(16, 64, rng);
  Tape tape;
  BoundModel m = rec.bind(tape, s, false);
  const Tensor both[] = {a, b};
  const Tensor fb = rec.encode(tape, m, both).value();
  Tape t2;
  const Tensor fa = encode_one(rec, t2, s, b).value();
  const std::size_t n = c.columns() * c.feature_dim;
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(fb[n + i], fa[i], 1e-12);
}

std::vector<DecodeTrace> decode(const Recognizer& rec, const ModelState& s,
                                std::span<const Tensor> imgs, const GreedyOptions& o) {
  Tape tape;
  BoundModel m = rec.bind(tape, s, false);
  Var f = rec.encode(tape, m, imgs);
  BatchTrace tr = rec.decode_greedy(m, f, o);
  std::vector<DecodeTrace> out;
  for (std::size_t b = 0; b < tr.batch_size(); ++b) out.push_back(tr.sample(b));
  return out;
}

TEST(Decoder, ArgmaxIsDeterministic) {
  ModelConfig c;
  Recognizer rec(c);
  ModelState s = jittered_state(c, 10);
  std::mt19937_64 rng(11);
  const std::vector<Tensor> imgs = {random_image(16, 64, rng), random_image(16, 64, rng)};
  GreedyOptions o;
  auto a = decode(rec, s, imgs, o);
  auto b = decode(rec, s, imgs, o);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].tokens, b[i].tokens);
    EXPECT_EQ(a[i].probs, b[i].probs);
    EXPECT_EQ(a[i].glimpses, b[i].glimpses);
  }
}

TEST(Decoder, TeacherForcingWithGreedyTokensReproducesGreedyTrace) {
  ModelConfig c;
  Recognizer rec(c);
  ModelState s = jittered_state(c, 12);
  std::mt19937_64 rng(13);
  std::vector<Tensor> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(random_image(16, 64, rng));

  Tape tape;
  BoundModel m = rec.bind(tape, s, false);
  Var f = rec.encode(tape, m, imgs);
  BatchTrace greedy = rec.decode_greedy(m, f, {});
  std::vector<std::vector<std::size_t>> tokens = greedy.tokens;
  BatchTrace forced = rec.decode_teacher_forcing(m, f, tokens);
  for (std::size_t b = 0; b < imgs.size(); ++b) {
    const DecodeTrace g = greedy.sample(b), t = forced.sample(b);
    ASSERT_EQ(g.length(), t.length());
    EXPECT_EQ(g.probs, t.probs);
    EXPECT_EQ(g.glimpses, t.glimpses);
    EXPECT_EQ(g.token_log_probs, t.token_log_probs);
  }
}

TEST(Decoder, TeacherForcedTraceLengthMatchesSequence) {
  ModelConfig c = tiny_config();
  Recognizer rec(c);
  ModelState s = jittered_state(c, 14);
  std::mt19937_64 rng(15);
  const std::vector<Tensor> imgs = {random_image(8, 16, rng), random_image(8, 16, rng)};
  const std::vector<std::vector<std::size_t>> seqs = {rec.alphabet().encode("ab"),
                                                      rec.alphabet().encode("c")};
  Tape tape;
  BoundModel m = rec.bind(tape, s, false);
  BatchTrace tr = rec.decode_teacher_forcing(m, rec.encode(tape, m, imgs), seqs);
  EXPECT_EQ(tr.sample(0).length(), 3u);
  EXPECT_EQ(tr.sample(1).length(), 2u);
  EXPECT_EQ(tr.steps(), 3u);
}

TEST(Decoder, TeacherForcingRejectsBadSequences) {
  ModelConfig c = tiny_config();
  Recognizer rec(c);
  ModelState s = jittered_state(c, 16);
  std::mt19937_64 rng(17);
  const std::vector<Tensor> imgs = {random_image(8, 16, rng)};
  Tape tape;
  BoundModel m = rec.bind(tape, s, false);
  Var f = rec.encode(tape, m, imgs);
  const std::vector<std::vector<std::size_t>> outside = {{99, rec.alphabet().eos()}};
  const std::vector<std::vector<std::size_t>> open = {{0, 1}};
  const std::vector<std::vector<std::size_t>> too_long = {{0, 1, 2, 0, rec.alphabet().eos()}};
  EXPECT_THROW(rec.decode_teacher_forcing(m, f, outside), std::invalid_argument);
  EXPECT_THROW(rec.decode_teacher_forcing(m, f, open), std::invalid_argument);
  EXPECT_THROW(rec.decode_teacher_forcing(m, f, too_long), std::invalid_argument);
}

TEST(Decoder, StopsAtEosOrMaxLen) {
  ModelConfig c;
  Recognizer rec(c);
  ModelState s = jittered_state(c, 18);
  std::mt19937_64 rng(19);
  std::vector<Tensor> imgs;
  for (int i = 0; i < 8; ++i) imgs.push_back(random_image(16, 64, rng));
  GreedyOptions o;
  o.max_len = 5;
  for (const auto& t : decode(rec, s, imgs, o)) {
    ASSERT_GE(t.length(), 1u);
    ASSERT_LE(t.length(), 5u);
    const auto eos_at = std::find(t.tokens.begin(), t.tokens.end(), rec.alphabet().eos());
    if (t.length() < 5) EXPECT_EQ(eos_at, t.tokens.end() - 1);
    else EXPECT_TRUE(eos_at == t.tokens.end() || eos_at == t.tokens.end() - 1);
  }
}

TEST(Decoder, StGumbelWithZeroNoiseMatchesArgmax) {
  ModelConfig c;
  Recognizer rec(c);
  ModelState s = jittered_state(c, 20);
  std::mt19937_64 rng(21);
  std::vector<Tensor> imgs;
  for (int i = 0; i < 4; ++i) imgs.push_back(random_image(16, 64, rng));
  GreedyOptions argmax;
  GreedyOptions gumbel;
  gumbel.mode = Feedback::StGumbel;
  gumbel.zero_noise = true;
  auto a = decode(rec, s, imgs, argmax);
  auto g = decode(rec, s, imgs, gumbel);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].tokens, g[i].tokens);
    EXPECT_LT(max_abs_diff(a[i].probs, g[i].probs), 1e-12);
  }
}

TEST(Decoder, SamplingModesRequireRng) {
  ModelConfig c = tiny_config();
  Recognizer rec(c);
  ModelState s = jittered_state(c, 22);
  std::mt19937_64 rng(23);
  const std::vector<Tensor> imgs = {random_image(8, 16, rng)};
  GreedyOptions o;
  o.mode = Feedback::Sample;
  EXPECT_THROW(decode(rec, s, imgs, o), std::invalid_argument);
  o.max_len = 0;
  o.mode = Feedback::Argmax;
  EXPECT_THROW(decode(rec, s, imgs, o), std::invalid_argument);
}

TEST(Decoder, SampleModeOnNearOneHotMatchesArgmaxAtProductBound) {
  ModelConfig c = tiny_config();
  c.max_len = 6;
  Recognizer rec(c);
  ModelState s = jittered_state(c, 24);
  // Output layer reduced to a bias: every step puts 0.995 on token 'b'.
  const std::size_t V = rec.alphabet().size();
  s[Recognizer::kOutW].fill(0.0);
  Tensor& bias = s[Recognizer::kOutB];
  bias.fill(0.0);
  bias[1] = std::log(0.995 * static_cast<double>(V - 1) / 0.005);
  std::mt19937_64 rng(25);
  const std::vector<Tensor> imgs(200, random_image(8, 16, rng));
  GreedyOptions argmax;
  argmax.max_len = c.max_len;
  const auto ref = decode(rec, s, imgs, argmax)[0];
  ASSERT_EQ(ref.tokens, std::vector<std::size_t>(6, 1));
  GreedyOptions sample = argmax;
  sample.mode = Feedback::Sample;
  std::size_t match = 0, total = 0;
  for (int rep = 0; rep < 10; ++rep) {
    sample.rng = &rng;
    for (const auto& t : decode(rec, s, imgs, sample)) {
      match += t.tokens == ref.tokens;
      ++total;
    }
  }
  const double p = std::pow(0.99, 6);
  const double sd = std::sqrt(p * (1 - p) / static_cast<double>(total));
  EXPECT_GE(static_cast<double>(match) / static_cast<double>(total), p - 3 * sd);
}

TEST(Decoder, SampleModeRecordsLogProbOfDrawnToken) {
  ModelConfig c;
  Recognizer rec(c);
  ModelState s = jittered_state(c, 26);
  std::mt19937_64 rng(27);
  const std::vector<Tensor> imgs = {random_image(16, 64, rng), random_image(16, 64, rng)};
  GreedyOptions o;
  o.mode = Feedback::Sample;
  o.rng = &rng;
  for (const auto& t : decode(rec, s, imgs, o)) {
    for (std::size_t i = 0; i < t.length(); ++i) {
      EXPECT_NEAR(std::exp(t.token_log_probs[i]), t.probs.at(i, t.tokens[i]), 1e-12);
    }
  }
}

TEST(Trace, RowsAreProbabilityVectors) {
  ModelConfig c;
  Recognizer rec(c);
  ModelState s = jittered_state(c, 28);
  std::mt19937_64 rng(29);
  std::vector<Tensor> imgs;
  for (int i = 0; i < 4; ++i) imgs.push_back(random_image(16, 64, rng));
  for (const auto& t : rec.predict(s, imgs)) {
    ASSERT_EQ(t.probs.dim(0), t.length());
    ASSERT_EQ(t.glimpses.dim(0), t.length());
    ASSERT_EQ(t.glimpses.dim(1), 64u);
    for (std::size_t i = 0; i < t.length(); ++i) {
      double sum = 0;
      for (double p : t.probs.row(i)) {
        EXPECT_GE(p, 0.0);
        sum += p;
      }
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

TEST(Trace, GlimpsesLieInSpanOfFeatures) {
  ModelConfig c;
  Recognizer rec(c);
  ModelState s = jittered_state(c, 30);
  std::mt19937_64 rng(31);
  const std::vector<Tensor> imgs = {random_image(16, 64, rng)};
  Tape tape;
  BoundModel m = rec.bind(tape, s, false);
  Var f = rec.encode(tape, m, imgs);
  const DecodeTrace t = rec.decode_greedy(m, f, {}).sample(0);
  const std::size_t J = c.columns(), D = c.feature_dim;
  Eigen::MatrixXd F(D, J);
  for (std::size_t j = 0; j < J; ++j) {
    for (std::size_t d = 0; d < D; ++d) F(d, j) = f.value()[j * D + d];
  }
  for (std::size_t i = 0; i < t.length(); ++i) {
    Eigen::VectorXd z(D);
    for (std::size_t d = 0; d < D; ++d) z(d) = t.glimpses.at(i, d);
    const Eigen::VectorXd a = F.colPivHouseholderQr().solve(z);
    EXPECT_LT((F * a - z).norm(), 1e-8);
  }
}

TEST(Confidence, ProductOfStepMaxima) {
  const Tensor p = Tensor::matrix(2, 3, {0.9, 0.05, 0.05, 0.1, 0.8, 0.1});
  EXPECT_NEAR(confidence(p), 0.72, 1e-15);
}

TEST(Confidence, OneHotStepsGiveOne) {
  const Tensor p = Tensor::matrix(3, 2, {1, 0, 0, 1, 1, 0});
  EXPECT_EQ(confidence(p), 1.0);
}

TEST(Confidence, UniformOverThirtyNineTokensForThreeSteps) {
  const Tensor p({3, 39}, 1.0 / 39.0);
  EXPECT_NEAR(confidence(p), std::pow(1.0 / 39.0, 3), 1e-18);
}

TEST(Confidence, NonIncreasingOverPrefixes) {
  ModelConfig c;
  Recognizer rec(c);
  ModelState s = jittered_state(c, 32);
  std::mt19937_64 rng(33);
  const std::vector<Tensor> imgs = {random_image(16, 64, rng)};
  const DecodeTrace t = rec.predict(s, imgs)[0];
  double prev = 1.0;
  for (std::size_t n = 1; n <= t.length(); ++n) {
    Tensor prefix({n, t.probs.dim(1)});
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(t.probs.row(i).begin(), t.probs.row(i).end(), prefix.row(i).begin());
    }
    const double cur = confidence(prefix);
    EXPECT_LE(cur, prev);
    EXPECT_GT(cur, 0.0);
    prev = cur;
  }
  EXPECT_DOUBLE_EQ(prev, t.confidence);
}

TEST(GradCheck, CrossEntropyThroughTeacherForcing) {
  ModelConfig c = tiny_config();
  Recognizer rec(c);
  ModelState s = jittered_state(c, 34);
  std::mt19937_64 rng(35);
  const std::vector<Tensor> imgs = {random_image(8, 16, rng), random_image(8, 16, rng)};
  const std::vector<std::vector<std::size_t>> labels = {rec.alphabet().encode("abc"),
                                                        rec.alphabet().encode("b")};
  std::vector<Tensor> params;
  for (std::size_t i = 0; i < s.size(); ++i) params.push_back(s[i]);
  const ScalarFn f = [&](Tape& tape, std::span<const Var> vars) {
    BoundModel m{std::vector<Var>(vars.begin(), vars.end())};
    BatchTrace tr = rec.decode_teacher_forcing(m, rec.encode(tape, m, imgs), labels);
    return ce_loss(tr, labels);
  };
  GradCheckOptions o;
  o.max_coords_per_param = 8;
  const GradCheckResult r = grad_check(f, params, o);
  EXPECT_TRUE(r.passed(1e-4)) << r.message << " rel " << r.max_rel_error;
}

class CheckpointTest : public ::testing::Test {
 protected:
  std::filesystem::path dir = std::filesystem::temp_directory_path() / "seqcr_ckpt_test";
  void SetUp() override { std::filesystem::create_directories(dir); }
  void TearDown() override { std::filesystem::remove_all(dir); }
};

TEST_F(CheckpointTest, RoundTripIsExact) {
  ModelConfig c = tiny_config();
  Checkpoint ck;
  ck.config_digest = 0x1234abcdULL;
  ck.config_text = "a = 1\n";
  ck.student = jittered_state(c, 36);
  ck.teacher = jittered_state(c, 37);
  save_checkpoint(dir / "m.sqck", ck);
  const Checkpoint back = load_checkpoint(dir / "m.sqck");
  EXPECT_EQ(back.config_digest, ck.config_digest);
  EXPECT_EQ(back.config_text, ck.config_text);
  EXPECT_TRUE(back.student == ck.student);
  ASSERT_TRUE(back.teacher.has_value());
  EXPECT_TRUE(*back.teacher == *ck.teacher);
}

TEST_F(CheckpointTest, BadMagicAndTruncationRejected) {
  ModelConfig c = tiny_config();
  Checkpoint ck;
  ck.student = ModelState::initialize(c, 1);
  save_checkpoint(dir / "m.sqck", ck);
  std::vector<char> bytes;
  {
    std::ifstream in(dir / "m.sqck", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::vector<char>& b) {
    std::ofstream out(dir / "bad.sqck", std::ios::binary);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  auto bad = bytes;
  bad[0] = 'X';
  write(bad);
  EXPECT_THROW(load_checkpoint(dir / "bad.sqck"), FormatError);
  bad = bytes;
  bad.resize(bytes.size() - 3);
  write(bad);
  EXPECT_THROW(load_checkpoint(dir / "bad.sqck"), FormatError);
}

}  // namespace
}  // namespace seqcr
