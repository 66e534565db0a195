#include <gtest/gtest.h>

#include <cmath>

#include "seqcr/rng.hpp"
#include "seqcr/semantics.hpp"

namespace seqcr {
namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  return dot(a, b) / (l2_norm(a) * l2_norm(b));
}

ModelConfig tiny_config(std::string chars, std::size_t max_len) {
  ModelConfig c;
  c.image_height = 8;
  c.image_width = 16;
  c.filter_height = 3;
  c.filter_width = 3;
  c.filter_channels = 3;
  c.column_stride = 4;
  c.column_window = 1;
  c.feature_dim = 4;
  c.embed_dim = 3;
  c.hidden_dim = 4;
  c.attention_dim = 3;
  c.max_len = max_len;
  c.characters = std::move(chars);
  return c;
}

Tensor random_image(const ModelConfig& c, std::mt19937_64& rng) {
  Tensor t({c.image_height, c.image_width});
  for (double& v : t.data()) v = uniform(rng, 0.05, 1.0);
  return t;
}

ModelState jittered_state(const ModelConfig& c, std::uint64_t seed, double spread = 0.3) {
  ModelState s = ModelState::initialize(c, seed);
  std::mt19937_64 rng(seed + 101);
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (double& v : s[i].data()) v += uniform(rng, -spread, spread);
  }
  return s;
}

TEST(Embedder, DeterministicAndUnitNorm) {
  NGramEmbedder e;
  const auto a = e.embed("abc");
  EXPECT_EQ(a, e.embed("abc"));
  EXPECT_EQ(a, NGramEmbedder().embed("abc"));
  EXPECT_EQ(a.size(), 64u);
  for (const char* w : {"a", "abc", "0o0o0o0o0o", "zz9"}) {
    EXPECT_NEAR(l2_norm(e.embed(w)), 1.0, 1e-12) << w;
  }
}

TEST(Embedder, EmptyWordIsZeroVector) {
  NGramEmbedder e;
  for (double v : e.embed("")) EXPECT_EQ(v, 0.0);
}

TEST(Embedder, FoldsCaseAndDropsUnknownCharacters) {
  NGramEmbedder e;
  EXPECT_EQ(e.embed("AbC"), e.embed("abc"));
  EXPECT_EQ(e.dropped_characters(), 0u);
  EXPECT_EQ(e.embed("a-b!"), e.embed("ab"));
  EXPECT_EQ(e.dropped_characters(), 2u);
}

TEST(Embedder, DifferentSeedsGiveDifferentVectors) {
  EXPECT_NE(NGramEmbedder(1).embed("abc"), NGramEmbedder(2).embed("abc"));
}

TEST(Embedder, SpellingNeighboursAreCloser) {
  NGramEmbedder e;
  EXPECT_GT(cosine(e.embed("cool"), e.embed("coo1")), cosine(e.embed("cool"), e.embed("zzzz")));
}

TEST(Reward, SelfIsOneEmptyIsZero) {
  NGramEmbedder e;
  EXPECT_NEAR(reward(e, "text", "text"), 1.0, 1e-12);
  EXPECT_EQ(reward(e, "", "text"), 0.0);
  EXPECT_EQ(reward(e, "text", ""), 0.0);
}

TEST(Reward, ConfusableIsPartialAndBeatsUnrelated) {
  NGramEmbedder e;
  const double near = reward(e, "o0o", "ooo");
  EXPECT_GT(near, 0.0);
  EXPECT_LT(near, 1.0);
  EXPECT_GT(near, reward(e, "xyz", "ooo"));
}

TEST(Reward, SymmetricAndBounded) {
  NGramEmbedder e;
  const char* words[] = {"a", "ab", "hello", "0l1i", "wor1d", "q"};
  for (const char* a : words) {
    for (const char* b : words) {
      const double r = reward(e, a, b);
      EXPECT_EQ(r, reward(e, b, a));
      EXPECT_GE(r, -1.0);
      EXPECT_LE(r, 1.0);
    }
  }
}

TEST(RewardRecord, AdvantageIsDifference) {
  RewardRecord r{0.75, 0.5};
  EXPECT_EQ(r.advantage(), 0.25);
  EXPECT_EQ(scst_weight(r, false, 4), -0.0625);
  EXPECT_EQ(scst_weight(r, true, 4), 0.0);
}

struct SampledBatch {
  Tape tape;
  BoundModel model;
  BatchTrace trace;
};

void sample_batch(SampledBatch& out, const Recognizer& rec, const ModelState& s,
                  const std::vector<Tensor>& imgs, std::mt19937_64& rng) {
  out.model = rec.bind(out.tape, s, true);
  Var f = rec.encode(out.tape, out.model, imgs);
  GreedyOptions o;
  o.mode = Feedback::Sample;
  o.max_len = rec.config().max_len;
  o.rng = &rng;
  out.trace = rec.decode_greedy(out.model, f, o);
}

TEST(ScstLoss, ValueMatchesPerRowFormula) {
  const ModelConfig c = tiny_config("abc", 4);
  Recognizer rec(c);
  ModelState s = jittered_state(c, 1, 1.0);
  std::mt19937_64 rng(2);
  std::vector<Tensor> imgs;
  for (int i = 0; i < 6; ++i) imgs.push_back(random_image(c, rng));
  SampledBatch sb;
  sample_batch(sb, rec, s, imgs, rng);
  NGramEmbedder e(NGramEmbedder::kDefaultSeed, 64, 1, 3, "abc");
  const std::vector<std::size_t> rows = {0, 2, 3, 5};
  const std::vector<std::string> base = {"ab", "c", "", "abc"};
  const std::vector<std::string> pseudo = {"abc", "cc", "a", "b"};
  const ScstBatch r = scst_loss(sb.trace, base, pseudo, rows, rec.alphabet(), e);

  double expect = 0.0;
  std::size_t empties = 0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const DecodeTrace t = sb.trace.sample(rows[k]);
    const std::string text = rec.alphabet().decode(t.tokens);
    const double adv = reward(e, text, pseudo[k]) - reward(e, base[k], pseudo[k]);
    EXPECT_EQ(r.rewards[k].advantage(), adv);
    if (text.empty()) {
      ++empties;
      continue;
    }
    double sum_lp = 0.0;
    for (double lp : t.token_log_probs) sum_lp += lp;
    expect += -adv * sum_lp / static_cast<double>(t.length()) / 4.0;
  }
  EXPECT_EQ(r.empty_samples, empties);
  EXPECT_NEAR(r.loss.value().item(), expect, 1e-12);
}

TEST(ScstLoss, ZeroAdvantageGivesExactlyZeroGradient) {
  const ModelConfig c = tiny_config("abc", 4);
  Recognizer rec(c);
  ModelState s = jittered_state(c, 3, 1.0);
  std::mt19937_64 rng(4);
  std::vector<Tensor> imgs;
  for (int i = 0; i < 4; ++i) imgs.push_back(random_image(c, rng));
  SampledBatch sb;
  sample_batch(sb, rec, s, imgs, rng);
  std::vector<std::string> base;
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < imgs.size(); ++b) {
    rows.push_back(b);
    base.push_back(rec.alphabet().decode(sb.trace.tokens[b]));
  }
  NGramEmbedder e(NGramEmbedder::kDefaultSeed, 64, 1, 3, "abc");
  const std::vector<std::string> pseudo(imgs.size(), "ab");
  const ScstBatch r = scst_loss(sb.trace, base, pseudo, rows, rec.alphabet(), e);
  EXPECT_EQ(r.loss.value().item(), 0.0);
  const Gradients g = sb.tape.backward(r.loss);
  for (const Var& p : sb.model.params) {
    if (!g.contains(p.id())) continue;
    for (double v : g[p].data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(ScstLoss, PositiveAdvantageStepRaisesSampledLogProb) {
  const ModelConfig c = tiny_config("abc", 3);
  Recognizer rec(c);
  ModelState s = jittered_state(c, 5, 1.0);
  std::mt19937_64 rng(6);
  const std::vector<Tensor> imgs = {random_image(c, rng)};
  NGramEmbedder e(NGramEmbedder::kDefaultSeed, 64, 1, 3, "abc");
  for (int attempt = 0; attempt < 50; ++attempt) {
    SampledBatch sb;
    sample_batch(sb, rec, s, imgs, rng);
    const std::string text = rec.alphabet().decode(sb.trace.tokens[0]);
    if (text.empty()) continue;
    // Pseudo label equal to the sample and an unrelated baseline: advantage > 0.
    const std::vector<std::string> base = {"zzz"};
    const std::vector<std::string> pseudo = {text};
    const std::vector<std::size_t> rows = {0};
    const ScstBatch r = scst_loss(sb.trace, base, pseudo, rows, rec.alphabet(), e);
    ASSERT_GT(r.rewards[0].advantage(), 0.0);
    const Gradients g = sb.tape.backward(r.loss);
    ModelState stepped = s;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!g.contains(sb.model.at(i).id())) continue;
      const Tensor& gi = g[sb.model.at(i)];
      for (std::size_t k = 0; k < gi.size(); ++k) stepped[i][k] -= 1e-2 * gi[k];
    }
    auto log_prob = [&](const ModelState& st) {
      Tape t;
      BoundModel m = rec.bind(t, st, false);
      const std::vector<std::size_t> seqs[] = {sb.trace.tokens[0]};
      return rec.decode_teacher_forcing(m, rec.encode(t, m, imgs), seqs).sample(0);
    };
    double before = 0, after = 0;
    for (double v : log_prob(s).token_log_probs) before += v;
    for (double v : log_prob(stepped).token_log_probs) after += v;
    EXPECT_GT(after, before);
    return;
  }
  FAIL() << "no non-empty sample drawn";
}

TEST(ExactScstGradient, RejectsLargeSpaces) {
  const ModelConfig c = tiny_config("abcde", 2);
  Recognizer rec(c);
  ModelState s = ModelState::initialize(c, 1);
  std::mt19937_64 rng(7);
  EXPECT_THROW(exact_expected_scst_gradient(rec, s, random_image(c, rng), "a", NGramEmbedder()),
               std::invalid_argument);
}

// One decoding step: the expectation is over a single categorical, so the
// gradient with respect to the output bias has the closed form
// p * (w - <p, w>) with w_v the per-token loss weight.
TEST(ExactScstGradient, SingleStepMatchesScoreFunctionClosedForm) {
  const ModelConfig c = tiny_config("abc", 1);
  Recognizer rec(c);
  ModelState s = jittered_state(c, 8, 1.0);
  std::mt19937_64 rng(9);
  const Tensor img = random_image(c, rng);
  NGramEmbedder e(NGramEmbedder::kDefaultSeed, 64, 1, 3, "abc");
  const std::string pseudo = "b";
  const auto exact = exact_expected_scst_gradient(rec, s, img, pseudo, e);

  const std::span<const Tensor> imgs(&img, 1);
  const DecodeTrace greedy = rec.predict(s, imgs)[0];
  const std::string base = rec.alphabet().decode(greedy.tokens);
  const std::size_t V = rec.alphabet().size();
  std::vector<double> p(V), w(V, 0.0);
  double pw = 0.0;
  for (std::size_t v = 0; v < V; ++v) {
    p[v] = greedy.probs.at(0, v);
    if (rec.alphabet().is_char(v)) {
      const std::string text(1, rec.alphabet().char_of(v));
      w[v] = -(reward(e, text, pseudo) - reward(e, base, pseudo));
    }
    pw += p[v] * w[v];
  }
  const Tensor& gb = exact[Recognizer::kOutB];
  for (std::size_t v = 0; v < V; ++v) EXPECT_NEAR(gb[v], p[v] * (w[v] - pw), 1e-12) << v;
}

TEST(ExactScstGradient, MonteCarloMeanAgrees) {
  const ModelConfig c = tiny_config("ab", 2);
  Recognizer rec(c);
  ModelState s = jittered_state(c, 10, 1.0);
  std::mt19937_64 rng(11);
  const Tensor img = random_image(c, rng);
  NGramEmbedder e(NGramEmbedder::kDefaultSeed, 64, 1, 3, "ab");
  const std::string pseudo = "ab";
  const auto exact = exact_expected_scst_gradient(rec, s, img, pseudo, e);

  const std::span<const Tensor> one(&img, 1);
  const std::string base = rec.alphabet().decode(rec.predict(s, one)[0].tokens);
  const std::size_t N = 4000;
  const std::vector<Tensor> imgs(N, img);
  SampledBatch sb;
  sample_batch(sb, rec, s, imgs, rng);
  std::vector<std::size_t> rows(N);
  for (std::size_t b = 0; b < N; ++b) rows[b] = b;
  const std::vector<std::string> bases(N, base), pseudos(N, pseudo);
  const ScstBatch r = scst_loss(sb.trace, bases, pseudos, rows, rec.alphabet(), e);
  const Gradients g = sb.tape.backward(r.loss);
  double num = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!g.contains(sb.model.at(i).id())) continue;
    const Tensor& mc = g[sb.model.at(i)];
    for (std::size_t k = 0; k < mc.size(); ++k) {
      num += mc[k] * exact[i][k];
      na += mc[k] * mc[k];
      nb += exact[i][k] * exact[i][k];
    }
  }
  ASSERT_GT(nb, 0.0);
  EXPECT_GT(num / std::sqrt(na * nb), 0.95);
}

}  // namespace
}  // namespace seqcr
