#include <gtest/gtest.h>

#include <cmath>

#include "seqcr/meanteacher.hpp"
#include "seqcr/rng.hpp"

namespace seqcr {
namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.image_height = 8;
  c.image_width = 16;
  c.filter_height = 3;
  c.filter_channels = 4;
  c.feature_dim = 6;
  c.embed_dim = 4;
  c.hidden_dim = 5;
  c.attention_dim = 5;
  c.characters = "abcd";
  return c;
}

Tensor random_image(const ModelConfig& c, std::mt19937_64& rng) {
  Tensor t({c.image_height, c.image_width});
  for (double& v : t.data()) v = uniform(rng, 0.0, 1.0);
  return t;
}

TEST(Ema, TeacherEqualToStudentIsFixedPoint) {
  const ModelState s = ModelState::initialize(small_config(), 1);
  ModelState t = s;
  ema_update(t, s, 0.9);
  EXPECT_TRUE(t == s);
}

TEST(Ema, ZeroRetentionCopiesStudent) {
  const ModelState s = ModelState::initialize(small_config(), 1);
  ModelState t = ModelState::initialize(small_config(), 2);
  ema_update(t, s, 0.0);
  EXPECT_TRUE(t == s);
}

TEST(Ema, ElementwiseFormula) {
  const ModelState s = ModelState::initialize(small_config(), 1);
  const ModelState t0 = ModelState::initialize(small_config(), 2);
  ModelState t = t0;
  ema_update(t, s, 0.75);
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t k = 0; k < s[i].size(); ++k) {
      EXPECT_DOUBLE_EQ(t[i][k], 0.75 * t0[i][k] + 0.25 * s[i][k]);
    }
  }
}

TEST(Ema, GeometricContractionWithConstantStudent) {
  const ModelState s = ModelState::initialize(small_config(), 3);
  ModelState t = ModelState::initialize(small_config(), 4);
  const double d0 = parameter_distance(t, s);
  const double gamma = 0.9;
  for (int k = 1; k <= 100; ++k) {
    ema_update(t, s, gamma);
    const double expect = std::pow(gamma, k) * d0;
    EXPECT_NEAR(parameter_distance(t, s), expect, 1e-12 * std::max(1.0, d0)) << k;
  }
}

TEST(Ema, RejectsBadRetentionAndLayout) {
  const ModelState s = ModelState::initialize(small_config(), 1);
  ModelState t = s;
  EXPECT_THROW(ema_update(t, s, 1.0), std::invalid_argument);
  EXPECT_THROW(ema_update(t, s, -0.1), std::invalid_argument);
  ModelConfig other = small_config();
  other.hidden_dim = 7;
  ModelState u = ModelState::initialize(other, 1);
  EXPECT_THROW(ema_update(u, s, 0.5), std::invalid_argument);
  EXPECT_THROW(parameter_distance(u, s), std::invalid_argument);
}

TEST(TeacherPredict, DeterministicAndMatchesStudentAtInitialization) {
  const ModelConfig c = small_config();
  Recognizer rec(c);
  const ModelState student = ModelState::initialize(c, 5);
  const ModelState teacher = student;
  std::mt19937_64 rng(6);
  std::vector<Tensor> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(random_image(c, rng));
  const auto a = teacher_predict(rec, teacher, imgs);
  const auto b = teacher_predict(rec, teacher, imgs);
  const auto s = rec.predict(student, imgs);
  ASSERT_EQ(a.size(), imgs.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].tokens, b[i].tokens);
    EXPECT_EQ(a[i].probs, s[i].probs);
    EXPECT_GT(a[i].confidence, 0.0);
    EXPECT_LE(a[i].confidence, 1.0);
  }
}

}  // namespace
}  // namespace seqcr
