#include "seqcr/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>
#include <stdexcept>
#include <thread>
#include <unordered_set>

#include "seqcr/binary_io.hpp"
#include "seqcr/rng.hpp"

namespace seqcr {

namespace {

struct GlyphRows {
  char c;
  std::array<const char*, kGlyphHeight> rows;
};

constexpr GlyphRows kGlyphs[] = {
#include "glyphs.inc"
};

constexpr std::string_view kConfusables = "o01li";
constexpr std::string_view kConsonants = "bcdfghjklmnprstvwz";
constexpr std::string_view kVowels = "aeiou";
constexpr std::string_view kLetters = "abcdefghijklmnopqrstuvwxyz";
constexpr std::string_view kAll = "abcdefghijklmnopqrstuvwxyz0123456789";

constexpr std::uint32_t kDatasetVersion = 1;

enum SplitTag : std::uint64_t {
  kSplitLabeled = 0,
  kSplitUnlabeled = 1,
  kSplitTestClean = 2,
  kSplitTestDistorted = 3,
  kSplitTestOccluded = 4,
  kLexiconTag = 100,
};

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

char pick(std::string_view set, std::mt19937_64& rng) {
  return set[uniform_index(rng, set.size())];
}

double bilinear(const Tensor& img, double x, double y) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  const double fx = std::floor(x), fy = std::floor(y);
  const double ax = x - fx, ay = y - fy;
  const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
  auto px = [&](long yy, long xx) -> double {
    if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) return 0.0;
    return img.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
  };
  double v = 0.0;
  if ((1 - ax) * (1 - ay) != 0.0) v += (1 - ax) * (1 - ay) * px(y0, x0);
  if (ax * (1 - ay) != 0.0) v += ax * (1 - ay) * px(y0, x0 + 1);
  if ((1 - ax) * ay != 0.0) v += (1 - ax) * ay * px(y0 + 1, x0);
  if (ax * ay != 0.0) v += ax * ay * px(y0 + 1, x0 + 1);
  return v;
}

Tensor affine(const Tensor& img, double rotation_deg, double tx, double ty, double shear) {
  if (rotation_deg == 0.0 && tx == 0.0 && ty == 0.0 && shear == 0.0) return img;
  const std::size_t h = img.dim(0), w = img.dim(1);
  const double th = rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  // forward map A = R * [[1, shear], [0, 1]]
  const double a00 = c, a01 = c * shear - s, a10 = s, a11 = s * shear + c;
  const double det = a00 * a11 - a01 * a10;
  const double i00 = a11 / det, i01 = -a01 / det, i10 = -a10 / det, i11 = a00 / det;
  const double cx = (static_cast<double>(w) - 1) / 2, cy = (static_cast<double>(h) - 1) / 2;
  Tensor out({h, w}, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double px = static_cast<double>(x) - cx - tx;
      const double py = static_cast<double>(y) - cy - ty;
      out[y * w + x] = bilinear(img, i00 * px + i01 * py + cx, i10 * px + i11 * py + cy);
    }
  }
  return out;
}

Tensor blur3(const Tensor& img, double sigma) {
  if (sigma <= 0.0) return img;
  const std::size_t h = img.dim(0), w = img.dim(1);
  const double side = std::exp(-1.0 / (2 * sigma * sigma));
  const double k[3] = {side, 1.0, side};
  Tensor out({h, w}, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0, norm = 0.0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
          const double kw = k[dy + 1] * k[dx + 1];
          acc += kw * img.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
          norm += kw;
        }
      }
      out[y * w + x] = acc / norm;
    }
  }
  return out;
}

Occlusion draw_occlusion(const Occlusion& box, double max_fraction, std::mt19937_64& rng) {
  const double frac = uniform(rng, 0.5 * max_fraction, max_fraction);
  const double area = frac * static_cast<double>(box.w * box.h);
  std::size_t oh = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::round(static_cast<double>(box.h) * uniform(rng, 0.4, 0.8))));
  oh = std::min(oh, box.h);
  std::size_t ow = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(area / static_cast<double>(oh))));
  ow = std::min(ow, box.w);
  Occlusion o;
  o.w = ow;
  o.h = oh;
  o.x = box.x + uniform_index(rng, box.w - ow + 1);
  o.y = box.y + uniform_index(rng, box.h - oh + 1);
  o.fill = uniform(rng, 0.0, 0.4);
  return o;
}

Sample make_sample(std::uint64_t split, std::size_t index, const DataConfig& config,
                   const std::vector<std::string>& lexicon, const GlyphFont& clean,
                   const GlyphFont& real) {
  const std::uint64_t seed = derive_seed(config.seed, {split, index});
  std::mt19937_64 rng(seed);
  const std::string& word = lexicon[uniform_index(rng, lexicon.size())];
  if (split == kSplitLabeled) {
    Tensor img = render_word(word, clean, rng, config.height, config.width);
    quantize_u8(img);
    return Sample::labeled(std::move(img), word, Condition::Clean, seed);
  }
  Tensor img = render_word(word, real, rng, config.height, config.width);
  Condition cond = Condition::Clean;
  if (split == kSplitUnlabeled) {
    const double u = uniform01(rng);
    cond = u < 0.5 ? Condition::Clean : u < 0.8 ? Condition::Distorted : Condition::Occluded;
  } else if (split == kSplitTestDistorted) {
    cond = Condition::Distorted;
  } else if (split == kSplitTestOccluded) {
    cond = Condition::Occluded;
  }
  if (cond == Condition::Distorted) img = distort(img, rng);
  if (cond == Condition::Occluded) img = occlude(img, rng);
  quantize_u8(img);
  return Sample::unlabeled(std::move(img), word, cond, seed);
}

Dataset generate_split(std::uint64_t split, std::size_t count, const DataConfig& config,
                       const std::vector<std::string>& lexicon, unsigned threads) {
  const GlyphFont clean(FontStyle::Clean), real(FontStyle::SlantedNoisy);
  Dataset d;
  d.height = config.height;
  d.width = config.width;
  std::vector<std::optional<Sample>> out(count);
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      out[i] = make_sample(split, i, config, lexicon, clean, real);
    }
  };
  threads = std::max(1u, threads);
  if (threads == 1 || count < 64) {
    work(0, count);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (count + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      const std::size_t b = t * chunk, e = std::min(count, b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }
  d.samples.reserve(count);
  for (auto& s : out) d.samples.push_back(std::move(*s));
  return d;
}

}  // namespace

const char* to_string(Domain d) { return d == Domain::Synthetic ? "synthetic" : "real"; }

const char* to_string(Condition c) {
  switch (c) {
    case Condition::Clean: return "clean";
    case Condition::Distorted: return "distorted";
    case Condition::Occluded: return "occluded";
  }
  return "?";
}

GlyphFont::GlyphFont(FontStyle style) : style_(style) {
  for (const auto& g : kGlyphs) {
    Bitmap bm{};
    for (std::size_t r = 0; r < kGlyphHeight; ++r) {
      for (std::size_t c = 0; c < kGlyphWidth; ++c) bm[r][c] = g.rows[r][c] == '#';
    }
    glyphs_[static_cast<unsigned char>(g.c)] = bm;
  }
}

bool GlyphFont::has(char c) const {
  const char lc = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return glyphs_[static_cast<unsigned char>(lc)].has_value();
}

const GlyphFont::Bitmap& GlyphFont::glyph(char c) const {
  const char lc = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  const auto& g = glyphs_[static_cast<unsigned char>(lc)];
  if (!g) throw std::invalid_argument(std::string("no glyph for character '") + c + "'");
  return *g;
}

Tensor render_word(std::string_view word, const GlyphFont& font, std::mt19937_64& rng,
                   std::size_t height, std::size_t width) {
  if (word.empty()) throw std::invalid_argument("render_word: empty word");
  if (word.size() > kMaxWordLength) {
    throw std::invalid_argument("render_word: word longer than " +
                                std::to_string(kMaxWordLength) + " characters");
  }
  if (height < kGlyphHeight) throw std::invalid_argument("render_word: canvas too short");
  const bool real = font.style() == FontStyle::SlantedNoisy;
  const double slant = real ? kRealSlant : 0.0;
  const std::size_t extent =
      word.size() * kGlyphAdvance - 1 + static_cast<std::size_t>(std::ceil(slant));
  if (extent > width) {
    throw std::invalid_argument("render_word: \"" + std::string(word) + "\" needs " +
                                std::to_string(extent) + " px but the canvas is " +
                                std::to_string(width) + " px wide");
  }
  const std::size_t x0 = std::min<std::size_t>(2, width - extent);
  const std::size_t y0 = (height - kGlyphHeight) / 2;
  Tensor img({height, width}, 0.0);
  for (std::size_t k = 0; k < word.size(); ++k) {
    const auto& bm = font.glyph(word[k]);
    const double ink = real ? uniform(rng, kRealInkMin, 1.0) : 1.0;
    for (std::size_t r = 0; r < kGlyphHeight; ++r) {
      // Italic shear: the top row moves right by `slant`, the bottom row stays.
      const double shift = slant * static_cast<double>(kGlyphHeight - 1 - r) /
                           static_cast<double>(kGlyphHeight - 1);
      const auto whole = static_cast<std::size_t>(shift);
      const double frac = shift - static_cast<double>(whole);
      for (std::size_t c = 0; c < kGlyphWidth; ++c) {
        const double jitter = real ? uniform(rng, -kRealJitter, kRealJitter) : 0.0;
        if (!bm[r][c]) continue;
        const double v = std::clamp(ink + jitter, 0.1, 1.0);
        const std::size_t x = x0 + k * kGlyphAdvance + c + whole;
        double* row = &img[(y0 + r) * width];
        row[x] += v * (1.0 - frac);
        if (frac > 0.0) row[x + 1] += v * frac;
      }
    }
  }
  for (auto& v : img.data()) v = std::min(v, 1.0);
  return img;
}

Tensor apply_brightness_contrast(const Tensor& image, double contrast, double brightness) {
  Tensor out = image;
  for (auto& v : out.data()) v = clamp01(contrast * v + brightness);
  return out;
}

Tensor weak_augment(const Tensor& image, std::mt19937_64& rng, const WeakAugmentSpec& spec) {
  const double a = uniform(rng, spec.contrast_min, spec.contrast_max);
  const double b = uniform(rng, spec.brightness_min, spec.brightness_max);
  return apply_brightness_contrast(image, a, b);
}

StrongAugmentSpec StrongAugmentSpec::none() {
  StrongAugmentSpec s;
  s.max_rotation_deg = 0;
  s.max_translation_px = 0;
  s.max_shear = 0;
  s.max_blur_sigma = 0;
  s.max_noise_sigma = 0;
  s.occlusion_probability = 0;
  s.color_jitter = false;
  return s;
}

std::optional<Occlusion> ink_bounding_box(const Tensor& image, double threshold) {
  const std::size_t h = image.dim(0), w = image.dim(1);
  std::size_t x_lo = w, x_hi = 0, y_lo = h, y_hi = 0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (image.at(y, x) <= threshold) continue;
      x_lo = std::min(x_lo, x);
      x_hi = std::max(x_hi, x);
      y_lo = std::min(y_lo, y);
      y_hi = std::max(y_hi, y);
    }
  }
  if (x_lo > x_hi) return std::nullopt;
  return Occlusion{x_lo, y_lo, x_hi - x_lo + 1, y_hi - y_lo + 1, 0.0};
}

StrongAugmentDraw draw_strong(const Tensor& image, std::mt19937_64& rng,
                              const StrongAugmentSpec& spec) {
  StrongAugmentDraw d;
  d.rotation_deg = uniform(rng, -spec.max_rotation_deg, spec.max_rotation_deg);
  d.tx = uniform(rng, -spec.max_translation_px, spec.max_translation_px);
  d.ty = uniform(rng, -spec.max_translation_px, spec.max_translation_px);
  d.shear = uniform(rng, -spec.max_shear, spec.max_shear);
  d.blur_sigma = uniform(rng, 0.0, spec.max_blur_sigma);
  d.noise_sigma = uniform(rng, 0.0, spec.max_noise_sigma);
  if (spec.color_jitter) {
    d.contrast = uniform(rng, spec.color.contrast_min, spec.color.contrast_max);
    d.brightness = uniform(rng, spec.color.brightness_min, spec.color.brightness_max);
  }
  d.noise_seed = rng();
  if (uniform01(rng) < spec.occlusion_probability) {
    if (auto box = ink_bounding_box(image)) {
      d.occlusion = draw_occlusion(*box, spec.max_occlusion_fraction, rng);
    }
  }
  return d;
}

Tensor apply_strong(const Tensor& image, const StrongAugmentDraw& d) {
  Tensor out = affine(image, d.rotation_deg, d.tx, d.ty, d.shear);
  out = blur3(out, d.blur_sigma);
  if (d.contrast != 1.0 || d.brightness != 0.0) {
    out = apply_brightness_contrast(out, d.contrast, d.brightness);
  }
  if (d.noise_sigma > 0.0) {
    std::mt19937_64 noise(d.noise_seed);
    for (auto& v : out.data()) v += d.noise_sigma * normal01(noise);
  }
  for (auto& v : out.data()) v = clamp01(v);
  if (d.occlusion) {
    const auto& o = *d.occlusion;
    const std::size_t w = out.dim(1);
    for (std::size_t y = o.y; y < o.y + o.h; ++y) {
      for (std::size_t x = o.x; x < o.x + o.w; ++x) out[y * w + x] = o.fill;
    }
  }
  return out;
}

Tensor strong_augment(const Tensor& image, std::mt19937_64& rng, const StrongAugmentSpec& spec) {
  return apply_strong(image, draw_strong(image, rng, spec));
}

Tensor distort(const Tensor& image, std::mt19937_64& rng) {
  StrongAugmentSpec spec;
  spec.max_rotation_deg = 6.0;
  spec.max_translation_px = 1.5;
  spec.max_shear = 0.35;
  spec.max_blur_sigma = 0.9;
  spec.max_noise_sigma = 0.06;
  spec.occlusion_probability = 0.0;
  spec.color_jitter = false;
  StrongAugmentDraw d = draw_strong(image, rng, spec);
  d.blur_sigma = std::max(d.blur_sigma, 0.4);
  return apply_strong(image, d);
}

Tensor occlude(const Tensor& image, std::mt19937_64& rng) {
  const auto box = ink_bounding_box(image);
  if (!box) return image;
  Tensor out = image;
  const Occlusion o = draw_occlusion(*box, 0.3, rng);
  const std::size_t w = out.dim(1);
  for (std::size_t y = o.y; y < o.y + o.h; ++y) {
    for (std::size_t x = o.x; x < o.x + o.w; ++x) out[y * w + x] = o.fill;
  }
  return out;
}

void quantize_u8(Tensor& image) {
  for (auto& v : image.data()) v = std::round(clamp01(v) * 255.0) / 255.0;
}

const std::string& EvaluationAccess::ground_truth(const Sample& s) {
  return s.label_ ? *s.label_ : s.sealed_;
}

Sample Sample::labeled(Tensor image, std::string label, Condition condition, std::uint64_t seed) {
  if (label.empty() || label.size() > kMaxWordLength) {
    throw std::invalid_argument("labeled sample needs a label of length 1.." +
                                std::to_string(kMaxWordLength));
  }
  Sample s;
  s.image_ = std::move(image);
  s.label_ = std::move(label);
  s.domain_ = Domain::Synthetic;
  s.condition_ = condition;
  s.seed_ = seed;
  return s;
}

Sample Sample::unlabeled(Tensor image, std::string truth, Condition condition,
                         std::uint64_t seed) {
  Sample s;
  s.image_ = std::move(image);
  s.sealed_ = std::move(truth);
  s.domain_ = Domain::Real;
  s.condition_ = condition;
  s.seed_ = seed;
  return s;
}

bool Sample::operator==(const Sample& o) const {
  return image_ == o.image_ && label_ == o.label_ && sealed_ == o.sealed_ &&
         domain_ == o.domain_ && condition_ == o.condition_;
}

bool has_confusable(std::string_view word) {
  return word.find_first_of(kConfusables) != std::string_view::npos;
}

std::vector<std::string> make_lexicon(std::size_t size, std::uint64_t seed) {
  auto rng = make_rng(seed, {kLexiconTag});
  std::vector<std::string> words;
  std::unordered_set<std::string> seen;
  words.reserve(size);
  std::size_t kind = 0;
  while (words.size() < size) {
    std::string w;
    switch (kind % 3) {
      case 0: {
        const std::size_t syllables = 1 + uniform_index(rng, 4);
        for (std::size_t s = 0; s < syllables; ++s) {
          w += pick(kConsonants, rng);
          w += pick(kVowels, rng);
          if (uniform01(rng) < 0.25) w += pick(kConsonants, rng);
        }
        break;
      }
      case 1: {
        const std::size_t len = 2 + uniform_index(rng, 7);
        for (std::size_t i = 0; i < len; ++i) w += pick(kAll, rng);
        break;
      }
      default: {
        const std::size_t len = 2 + uniform_index(rng, 6);
        for (std::size_t i = 0; i < len; ++i) {
          w += uniform01(rng) < 0.5 ? pick(kConfusables, rng) : pick(kLetters, rng);
        }
        if (!has_confusable(w)) w[uniform_index(rng, w.size())] = pick(kConfusables, rng);
        break;
      }
    }
    if (w.size() > kMaxWordLength) w.resize(kMaxWordLength);
    if (seen.insert(w).second) {
      words.push_back(std::move(w));
      ++kind;
    }
  }
  return words;
}

DatasetBundle make_datasets(const DataConfig& config, unsigned threads) {
  if (config.test_lexicon_fraction <= 0.0 || config.test_lexicon_fraction >= 1.0) {
    throw std::invalid_argument("test_lexicon_fraction must be in (0, 1)");
  }
  const auto n_test = static_cast<std::size_t>(
      std::round(config.test_lexicon_fraction * static_cast<double>(config.lexicon_size)));
  if (config.lexicon_size < 2 || n_test == 0 || n_test >= config.lexicon_size) {
    throw std::invalid_argument("lexicon of " + std::to_string(config.lexicon_size) +
                                " words cannot supply disjoint train and test words");
  }
  if (config.height < kGlyphHeight ||
      config.width < kMaxWordLength * kGlyphAdvance + 1) {
    throw std::invalid_argument("canvas too small for " + std::to_string(kMaxWordLength) +
                                "-character words");
  }
  std::vector<std::string> lexicon = make_lexicon(config.lexicon_size, config.seed);
  auto shuffle_rng = make_rng(config.seed, {kLexiconTag, 1});
  for (std::size_t i = lexicon.size(); i > 1; --i) {
    std::swap(lexicon[i - 1], lexicon[uniform_index(shuffle_rng, i)]);
  }
  DatasetBundle b;
  b.test_lexicon.assign(lexicon.begin(), lexicon.begin() + static_cast<std::ptrdiff_t>(n_test));
  b.train_lexicon.assign(lexicon.begin() + static_cast<std::ptrdiff_t>(n_test), lexicon.end());

  b.labeled_train = generate_split(kSplitLabeled, config.labeled, config, b.train_lexicon, threads);
  b.unlabeled_train =
      generate_split(kSplitUnlabeled, config.unlabeled, config, b.train_lexicon, threads);
  b.test_clean =
      generate_split(kSplitTestClean, config.test_per_split, config, b.test_lexicon, threads);
  b.test_distorted =
      generate_split(kSplitTestDistorted, config.test_per_split, config, b.test_lexicon, threads);
  b.test_occluded =
      generate_split(kSplitTestOccluded, config.test_per_split, config, b.test_lexicon, threads);
  return b;
}

const Dataset& DatasetBundle::split(std::string_view name) const {
  if (name == "labeled_train") return labeled_train;
  if (name == "unlabeled_train") return unlabeled_train;
  if (name == "test_clean") return test_clean;
  if (name == "test_distorted") return test_distorted;
  if (name == "test_occluded") return test_occluded;
  throw std::invalid_argument("unknown split: " + std::string(name));
}

std::vector<std::uint8_t> serialize_dataset(const Dataset& d) {
  if (d.height > 0xffff || d.width > 0xffff) throw std::invalid_argument("image too large");
  ByteWriter w;
  w.raw("SQCD");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(d.samples.size()));
  w.u16(static_cast<std::uint16_t>(d.height));
  w.u16(static_cast<std::uint16_t>(d.width));
  for (const auto& s : d.samples) {
    if (s.image().shape() != Shape{d.height, d.width}) {
      throw std::invalid_argument("sample image " + to_string(s.image().shape()) +
                                  " does not match dataset size");
    }
    const std::string& label = EvaluationAccess::ground_truth(s);
    if (label.size() > 0xff) throw std::invalid_argument("label too long");
    w.u8(static_cast<std::uint8_t>(s.domain()));
    w.u8(static_cast<std::uint8_t>(s.condition()));
    w.u8(static_cast<std::uint8_t>(label.size()));
    w.raw(label);
    for (double v : s.image().data()) {
      w.u8(static_cast<std::uint8_t>(std::lround(clamp01(v) * 255.0)));
    }
  }
  return w.bytes();
}

Dataset deserialize_dataset(std::vector<std::uint8_t> bytes) {
  ByteReader r(std::move(bytes));
  if (r.raw(4) != "SQCD") throw FormatError("bad magic (expected SQCD)", 0);
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version), version_at);
  }
  const std::uint32_t count = r.u32();
  Dataset d;
  d.height = r.u16();
  d.width = r.u16();
  if (d.height == 0 || d.width == 0) r.fail("zero image dimension");
  d.samples.reserve(std::min<std::size_t>(count, 1u << 20));
  const std::size_t n = d.height * d.width;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t tag_at = r.offset();
    const std::uint8_t domain = r.u8();
    const std::uint8_t condition = r.u8();
    if (domain > 1) throw FormatError("bad domain tag " + std::to_string(domain), tag_at);
    if (condition > 2) throw FormatError("bad condition tag " + std::to_string(condition), tag_at + 1);
    const std::uint8_t len = r.u8();
    std::string label = r.raw(len);
    const std::string px = r.raw(n);
    std::vector<double> values(n);
    for (std::size_t k = 0; k < n; ++k) {
      values[k] = static_cast<double>(static_cast<unsigned char>(px[k])) / 255.0;
    }
    Tensor img({d.height, d.width}, std::move(values));
    const auto cond = static_cast<Condition>(condition);
    if (static_cast<Domain>(domain) == Domain::Synthetic) {
      if (label.empty() || label.size() > kMaxWordLength) {
        throw FormatError("labeled sample with label length " + std::to_string(len), tag_at + 2);
      }
      d.samples.push_back(Sample::labeled(std::move(img), std::move(label), cond));
    } else {
      d.samples.push_back(Sample::unlabeled(std::move(img), std::move(label), cond));
    }
  }
  if (!r.at_end()) r.fail("trailing bytes after " + std::to_string(count) + " samples");
  return d;
}

void save_dataset(const std::filesystem::path& path, const Dataset& d) {
  const auto bytes = serialize_dataset(d);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_dataset(std::move(bytes));
}

namespace {

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& l : lines) out << l << '\n';
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) {
    if (!l.empty()) lines.push_back(l);
  }
  return lines;
}

}  // namespace

void save_bundle(const std::filesystem::path& dir, const DatasetBundle& bundle) {
  std::filesystem::create_directories(dir);
  for (auto name : DatasetBundle::kSplitNames) {
    save_dataset(dir / (std::string(name) + ".sqcd"), bundle.split(name));
  }
  write_lines(dir / "lexicon_train.txt", bundle.train_lexicon);
  write_lines(dir / "lexicon_test.txt", bundle.test_lexicon);
}

DatasetBundle load_bundle(const std::filesystem::path& dir) {
  DatasetBundle b;
  b.labeled_train = load_dataset(dir / "labeled_train.sqcd");
  b.unlabeled_train = load_dataset(dir / "unlabeled_train.sqcd");
  b.test_clean = load_dataset(dir / "test_clean.sqcd");
  b.test_distorted = load_dataset(dir / "test_distorted.sqcd");
  b.test_occluded = load_dataset(dir / "test_occluded.sqcd");
  if (std::filesystem::exists(dir / "lexicon_train.txt")) {
    b.train_lexicon = read_lines(dir / "lexicon_train.txt");
  }
  if (std::filesystem::exists(dir / "lexicon_test.txt")) {
    b.test_lexicon = read_lines(dir / "lexicon_test.txt");
  }
  return b;
}

}  // namespace seqcr
