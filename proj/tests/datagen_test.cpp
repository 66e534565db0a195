#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "seqcr/binary_io.hpp"
#include "seqcr/datagen.hpp"
#include "seqcr/rng.hpp"

namespace seqcr {
namespace {

std::uint64_t hash_pixels(const Tensor& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : t.data()) {
    h ^= static_cast<std::uint64_t>(std::llround(v * 1e9));
    h *= 0x100000001b3ULL;
  }
  return h;
}

DataConfig small_data() {
  DataConfig c;
  c.lexicon_size = 100;
  c.labeled = 40;
  c.unlabeled = 60;
  c.test_per_split = 20;
  return c;
}

TEST(GlyphFont, EveryAlphabetCharacterHasABitmap) {
  for (auto style : {FontStyle::Clean, FontStyle::SlantedNoisy}) {
    GlyphFont f(style);
    for (char c : std::string_view("abcdefghijklmnopqrstuvwxyz0123456789")) {
      EXPECT_TRUE(f.has(c)) << c;
      bool any = false;
      for (const auto& row : f.glyph(c)) {
        for (bool b : row) any = any || b;
      }
      EXPECT_TRUE(any) << c;
    }
    EXPECT_FALSE(f.has('-'));
    EXPECT_THROW(f.glyph('-'), std::invalid_argument);
  }
}

TEST(GlyphFont, ConfusablesHaveDistinctBitmaps) {
  GlyphFont f(FontStyle::Clean);
  const std::string_view conf = "o01li";
  for (std::size_t i = 0; i < conf.size(); ++i) {
    for (std::size_t j = i + 1; j < conf.size(); ++j) {
      EXPECT_NE(f.glyph(conf[i]), f.glyph(conf[j])) << conf[i] << conf[j];
    }
  }
}

TEST(RenderWord, Deterministic) {
  for (auto style : {FontStyle::Clean, FontStyle::SlantedNoisy}) {
    GlyphFont f(style);
    std::mt19937_64 a(7), b(7);
    EXPECT_EQ(render_word("hello", f, a), render_word("hello", f, b));
  }
}

TEST(RenderWord, CleanFontPlacesBitmapsWithOnePixelSpacing) {
  GlyphFont f(FontStyle::Clean);
  std::mt19937_64 rng(1);
  const Tensor img = render_word("ab", f, rng);
  ASSERT_EQ(img.shape(), (Shape{16, 64}));
  const std::size_t y0 = (16 - kGlyphHeight) / 2;
  const std::size_t x0 = 2;
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& bm = f.glyph("ab"[k]);
    for (std::size_t r = 0; r < kGlyphHeight; ++r) {
      for (std::size_t c = 0; c < kGlyphWidth; ++c) {
        EXPECT_EQ(img.at(y0 + r, x0 + k * kGlyphAdvance + c), bm[r][c] ? 1.0 : 0.0);
      }
    }
  }
  for (std::size_t y = 0; y < 16; ++y) EXPECT_EQ(img.at(y, x0 + kGlyphWidth), 0.0);
}

TEST(RenderWord, ColumnsRightOfLastGlyphAreBackground) {
  for (auto style : {FontStyle::Clean, FontStyle::SlantedNoisy}) {
    GlyphFont f(style);
    std::mt19937_64 rng(2);
    const Tensor img = render_word("abc", f, rng);
    const std::size_t last = 2 + 3 * kGlyphAdvance;
    for (std::size_t x = last; x < 64; ++x) {
      for (std::size_t y = 0; y < 16; ++y) EXPECT_EQ(img.at(y, x), 0.0);
    }
  }
}

TEST(RenderWord, ChangingMiddleGlyphChangesOnlyItsColumns) {
  for (auto style : {FontStyle::Clean, FontStyle::SlantedNoisy}) {
    GlyphFont f(style);
    std::mt19937_64 a(3), b(3);
    const Tensor x = render_word("o0o", f, a);
    const Tensor y = render_word("ooo", f, b);
    const std::size_t lo = 2 + kGlyphAdvance, hi = lo + kGlyphAdvance;
    bool differs = false;
    for (std::size_t r = 0; r < 16; ++r) {
      for (std::size_t c = 0; c < 64; ++c) {
        if (x.at(r, c) == y.at(r, c)) continue;
        EXPECT_TRUE(c >= lo && c < hi) << "column " << c;
        differs = true;
      }
    }
    EXPECT_TRUE(differs);
  }
}

TEST(RenderWord, RealFontDiffersAndKeepsBackgroundZero) {
  GlyphFont clean(FontStyle::Clean), real(FontStyle::SlantedNoisy);
  std::mt19937_64 a(4), b(4);
  const Tensor c = render_word("word", clean, a);
  const Tensor r = render_word("word", real, b);
  EXPECT_NE(c, r);
  for (double v : r.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(r.at(0, 0), 0.0);
  EXPECT_EQ(r.at(15, 63), 0.0);
}

TEST(RenderWord, RejectsBadWords) {
  GlyphFont f(FontStyle::Clean);
  std::mt19937_64 rng(5);
  EXPECT_THROW(render_word("", f, rng), std::invalid_argument);
  EXPECT_THROW(render_word("abcdefghijk", f, rng), std::invalid_argument);
  EXPECT_THROW(render_word("abcdefghij", f, rng, 16, 40), std::invalid_argument);
  EXPECT_THROW(render_word("a-b", f, rng), std::invalid_argument);
}

Tensor rendered(std::uint64_t seed) {
  GlyphFont f(FontStyle::SlantedNoisy);
  std::mt19937_64 rng(seed);
  return render_word("sample", f, rng);
}

TEST(WeakAugment, UnitContrastZeroBrightnessIsIdentity) {
  const Tensor img = rendered(6);
  EXPECT_EQ(apply_brightness_contrast(img, 1.0, 0.0), img);
}

TEST(WeakAugment, MatchesClampedAffineAndKeepsArgmaxAndInkSet) {
  const Tensor img = rendered(7);
  std::mt19937_64 rng(8), replay(8);
  for (int i = 0; i < 50; ++i) {
    const Tensor out = weak_augment(img, rng);
    const double a = uniform(replay, 0.8, 1.2), b = uniform(replay, -0.1, 0.1);
    ASSERT_GE(a, 0.8);
    for (std::size_t k = 0; k < img.size(); ++k) {
      EXPECT_DOUBLE_EQ(out[k], std::clamp(a * img[k] + b, 0.0, 1.0));
    }
    const auto argmax = [](const Tensor& t) {
      return std::max_element(t.data().begin(), t.data().end()) - t.data().begin();
    };
    EXPECT_EQ(out[static_cast<std::size_t>(argmax(out))], out[static_cast<std::size_t>(argmax(img))]);
  }
}

TEST(WeakAugment, SeededDrawReproducible) {
  const Tensor img = rendered(9);
  std::mt19937_64 a(10), b(10);
  EXPECT_EQ(weak_augment(img, a), weak_augment(img, b));
}

TEST(StrongAugment, NoneIsIdentity) {
  const Tensor img = rendered(11);
  std::mt19937_64 rng(12);
  EXPECT_EQ(strong_augment(img, rng, StrongAugmentSpec::none()), img);
}

TEST(StrongAugment, OcclusionIsContiguousFilledRectangleWithinBound) {
  const Tensor img = rendered(13);
  const auto box = ink_bounding_box(img);
  ASSERT_TRUE(box.has_value());
  StrongAugmentSpec spec = StrongAugmentSpec::none();
  spec.occlusion_probability = 1.0;
  std::mt19937_64 rng(14);
  for (int i = 0; i < 50; ++i) {
    const StrongAugmentDraw d = draw_strong(img, rng, spec);
    ASSERT_TRUE(d.occlusion.has_value());
    const Occlusion& o = *d.occlusion;
    EXPECT_LE(static_cast<double>(o.w * o.h), 0.3 * static_cast<double>(box->w * box->h) + 1e-9);
    EXPECT_GE(o.x, box->x);
    EXPECT_LE(o.x + o.w, box->x + box->w);
    const Tensor out = apply_strong(img, d);
    for (std::size_t y = 0; y < 16; ++y) {
      for (std::size_t x = 0; x < 64; ++x) {
        const bool inside = x >= o.x && x < o.x + o.w && y >= o.y && y < o.y + o.h;
        if (inside) EXPECT_EQ(out.at(y, x), o.fill);
        else EXPECT_EQ(out.at(y, x), img.at(y, x));
      }
    }
  }
}

TEST(StrongAugment, DrawsRespectBounds) {
  const Tensor img = rendered(15);
  StrongAugmentSpec spec;
  std::mt19937_64 rng(16);
  std::size_t occluded = 0;
  for (int i = 0; i < 2000; ++i) {
    const StrongAugmentDraw d = draw_strong(img, rng, spec);
    EXPECT_LE(std::abs(d.rotation_deg), 10.0);
    EXPECT_LE(std::abs(d.tx), 2.0);
    EXPECT_LE(std::abs(d.ty), 2.0);
    EXPECT_LE(std::abs(d.shear), spec.max_shear);
    EXPECT_LE(d.noise_sigma, 0.1);
    occluded += d.occlusion.has_value();
  }
  const double rate = static_cast<double>(occluded) / 2000.0;
  EXPECT_NEAR(rate, 0.3, 3 * std::sqrt(0.3 * 0.7 / 2000.0));
}

TEST(StrongAugment, OutputClampedToUnitInterval) {
  const Tensor img = rendered(17);
  std::mt19937_64 rng(18);
  for (int i = 0; i < 50; ++i) {
    for (double v : strong_augment(img, rng).data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(StrongAugment, DifferentSeedsGiveDifferentOutputs) {
  const Tensor img = rendered(19);
  std::size_t same = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    std::mt19937_64 a(2 * s + 1000), b(2 * s + 1001);
    same += hash_pixels(strong_augment(img, a)) == hash_pixels(strong_augment(img, b));
  }
  EXPECT_EQ(same, 0u);
}

TEST(Lexicon, DistinctWordsOfValidLength) {
  const auto lex = make_lexicon(1000, 1);
  EXPECT_EQ(lex.size(), 1000u);
  EXPECT_EQ(std::set<std::string>(lex.begin(), lex.end()).size(), 1000u);
  GlyphFont f(FontStyle::Clean);
  for (const auto& w : lex) {
    EXPECT_GE(w.size(), 1u);
    EXPECT_LE(w.size(), kMaxWordLength);
    for (char c : w) EXPECT_TRUE(f.has(c)) << w;
  }
  EXPECT_EQ(lex, make_lexicon(1000, 1));
}

TEST(MakeDatasets, SizesMatchConfigAndLexiconsAreDisjoint) {
  const DataConfig c = small_data();
  const DatasetBundle b = make_datasets(c);
  EXPECT_EQ(b.labeled_train.size(), c.labeled);
  EXPECT_EQ(b.unlabeled_train.size(), c.unlabeled);
  EXPECT_EQ(b.test_clean.size(), c.test_per_split);
  EXPECT_EQ(b.test_distorted.size(), c.test_per_split);
  EXPECT_EQ(b.test_occluded.size(), c.test_per_split);
  EXPECT_EQ(b.test_lexicon.size(), 20u);
  EXPECT_EQ(b.train_lexicon.size(), 80u);
  const std::set<std::string> test(b.test_lexicon.begin(), b.test_lexicon.end());
  for (const auto& w : b.train_lexicon) EXPECT_FALSE(test.contains(w)) << w;
  for (auto name : {"test_clean", "test_distorted", "test_occluded"}) {
    for (const auto& s : b.split(name).samples) {
      EXPECT_TRUE(test.contains(EvaluationAccess::ground_truth(s)));
    }
  }
  for (const auto& s : b.unlabeled_train.samples) {
    EXPECT_FALSE(test.contains(EvaluationAccess::ground_truth(s)));
  }
}

TEST(MakeDatasets, DomainsConditionsAndSealedLabels) {
  const DatasetBundle b = make_datasets(small_data());
  for (const auto& s : b.labeled_train.samples) {
    EXPECT_EQ(s.domain(), Domain::Synthetic);
    EXPECT_EQ(s.condition(), Condition::Clean);
    ASSERT_TRUE(s.label().has_value());
    EXPECT_FALSE(s.label()->empty());
  }
  std::set<Condition> seen;
  for (const auto& s : b.unlabeled_train.samples) {
    EXPECT_EQ(s.domain(), Domain::Real);
    EXPECT_FALSE(s.label().has_value());
    EXPECT_FALSE(EvaluationAccess::ground_truth(s).empty());
    seen.insert(s.condition());
  }
  EXPECT_EQ(seen.size(), 3u);
  for (const auto& s : b.test_distorted.samples) EXPECT_EQ(s.condition(), Condition::Distorted);
  for (const auto& s : b.test_occluded.samples) EXPECT_EQ(s.condition(), Condition::Occluded);
  for (const auto& s : b.test_clean.samples) {
    EXPECT_EQ(s.condition(), Condition::Clean);
    EXPECT_FALSE(s.label().has_value());
  }
}

TEST(MakeDatasets, PixelsAreQuantizedAndInRange) {
  const DatasetBundle b = make_datasets(small_data());
  for (auto name : DatasetBundle::kSplitNames) {
    for (const auto& s : b.split(name).samples) {
      ASSERT_EQ(s.image().shape(), (Shape{16, 64}));
      for (double v : s.image().data()) {
        const double q = v * 255.0;
        EXPECT_NEAR(q, std::round(q), 1e-9);
      }
    }
  }
}

TEST(MakeDatasets, PureFunctionOfConfigIndependentOfThreads) {
  const DataConfig c = small_data();
  const DatasetBundle a = make_datasets(c, 1);
  const DatasetBundle b = make_datasets(c, 4);
  for (auto name : DatasetBundle::kSplitNames) EXPECT_EQ(a.split(name), b.split(name)) << name;
  DataConfig other = c;
  other.seed = 2;
  EXPECT_FALSE(make_datasets(other).labeled_train == a.labeled_train);
}

TEST(MakeDatasets, DefaultTestWordsAreRichInConfusables) {
  const DatasetBundle b = make_datasets(DataConfig{.labeled = 1, .unlabeled = 1, .test_per_split = 1});
  std::size_t n = 0;
  for (const auto& w : b.test_lexicon) n += has_confusable(w);
  EXPECT_GE(static_cast<double>(n), 0.3 * static_cast<double>(b.test_lexicon.size()));
}

TEST(MakeDatasets, RejectsUnsatisfiableLexicon) {
  DataConfig c = small_data();
  c.lexicon_size = 1;
  EXPECT_THROW(make_datasets(c), std::invalid_argument);
  c = small_data();
  c.test_lexicon_fraction = 1.0;
  EXPECT_THROW(make_datasets(c), std::invalid_argument);
}

class DatasetFileTest : public ::testing::Test {
 protected:
  std::filesystem::path dir = std::filesystem::temp_directory_path() / "seqcr_datagen_test";
  void SetUp() override { std::filesystem::create_directories(dir); }
  void TearDown() override { std::filesystem::remove_all(dir); }

  static std::vector<std::uint8_t> read(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
  }
};

TEST_F(DatasetFileTest, SaveLoadSaveIsByteIdentical) {
  const DatasetBundle b = make_datasets(small_data());
  for (auto name : DatasetBundle::kSplitNames) {
    const auto p1 = dir / "a.sqcd", p2 = dir / "b.sqcd";
    save_dataset(p1, b.split(name));
    const Dataset back = load_dataset(p1);
    EXPECT_EQ(back, b.split(name)) << name;
    save_dataset(p2, back);
    EXPECT_EQ(read(p1), read(p2)) << name;
  }
}

TEST_F(DatasetFileTest, LayoutIsLittleEndianWithFixedHeader) {
  Dataset d;
  d.height = 2;
  d.width = 3;
  d.samples.push_back(Sample::labeled(Tensor({2, 3}, 1.0), "ab", Condition::Clean));
  const auto bytes = serialize_dataset(d);
  const std::vector<std::uint8_t> head = {'S', 'Q', 'C', 'D', 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 3, 0,
                                          0, 0, 2, 'a', 'b', 255, 255, 255, 255, 255, 255};
  EXPECT_EQ(bytes, head);
}

TEST_F(DatasetFileTest, BundleRoundTrip) {
  const DatasetBundle b = make_datasets(small_data());
  save_bundle(dir / "bundle", b);
  const DatasetBundle back = load_bundle(dir / "bundle");
  for (auto name : DatasetBundle::kSplitNames) EXPECT_EQ(back.split(name), b.split(name));
  EXPECT_EQ(back.train_lexicon, b.train_lexicon);
  EXPECT_EQ(back.test_lexicon, b.test_lexicon);
}

TEST_F(DatasetFileTest, CorruptionRejectedWithOffset) {
  const DatasetBundle b = make_datasets(small_data());
  const auto bytes = serialize_dataset(b.test_clean);
  auto bad = bytes;
  bad[1] = 'X';
  try {
    deserialize_dataset(bad);
    FAIL() << "bad magic accepted";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  bad = bytes;
  bad[4] = 9;
  try {
    deserialize_dataset(bad);
    FAIL() << "bad version accepted";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
  bad = bytes;
  bad.resize(bytes.size() - 10);
  EXPECT_THROW(deserialize_dataset(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(deserialize_dataset(bad), FormatError);
  bad = bytes;
  bad[16] = 7;
  try {
    deserialize_dataset(bad);
    FAIL() << "bad domain tag accepted";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 16u);
  }
}

}  // namespace
}  // namespace seqcr
