#pragma once

// Synthetic glyph-word images. The labeled "synthetic" domain uses a clean
// bitmap font; the unlabeled "real" domain uses a slanted, noisy variant of
// it plus distortions and occlusions.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "seqcr/tensor.hpp"

namespace seqcr {

enum class FontStyle : std::uint8_t { Clean = 0, SlantedNoisy = 1 };
enum class Domain : std::uint8_t { Synthetic = 0, Real = 1 };
enum class Condition : std::uint8_t { Clean = 0, Distorted = 1, Occluded = 2 };

const char* to_string(Domain d);
const char* to_string(Condition c);

inline constexpr std::size_t kGlyphWidth = 5;
inline constexpr std::size_t kGlyphHeight = 7;
inline constexpr std::size_t kGlyphAdvance = kGlyphWidth + 1;
inline constexpr std::size_t kMaxWordLength = 10;

class GlyphFont {
 public:
  using Bitmap = std::array<std::array<bool, kGlyphWidth>, kGlyphHeight>;

  explicit GlyphFont(FontStyle style);

  FontStyle style() const { return style_; }
  const Bitmap& glyph(char c) const;
  bool has(char c) const;

 private:
  FontStyle style_;
  std::array<std::optional<Bitmap>, 256> glyphs_;
};

inline constexpr double kRealSlant = 0.5;
inline constexpr double kRealInkMin = 0.6;
inline constexpr double kRealJitter = 0.2;

/// Places glyphs left to right with 1px spacing from x = 2 (or further left
/// if needed to fit), vertically centred, on a zero background. The
/// slanted-noisy style shears each glyph so its top row moves right by
/// kRealSlant px (ink split between neighbouring pixels), draws one ink level
/// per glyph from [kRealInkMin, 1] and jitters each ink pixel by up to
/// kRealJitter; the background stays exactly 0. Throws if the word is empty,
/// too long, or does not fit.
Tensor render_word(std::string_view word, const GlyphFont& font, std::mt19937_64& rng,
                   std::size_t height = 16, std::size_t width = 64);

struct WeakAugmentSpec {
  double contrast_min = 0.8, contrast_max = 1.2;
  double brightness_min = -0.1, brightness_max = 0.1;
};

/// clamp(a * image + b): photometric only.
Tensor weak_augment(const Tensor& image, std::mt19937_64& rng, const WeakAugmentSpec& spec = {});
Tensor apply_brightness_contrast(const Tensor& image, double contrast, double brightness);

struct StrongAugmentSpec {
  double max_rotation_deg = 10.0;
  double max_translation_px = 2.0;
  double max_shear = 0.3;
  double max_blur_sigma = 1.0;
  double max_noise_sigma = 0.1;
  double occlusion_probability = 0.3;
  /// Occluding rectangle covers at most this fraction of the ink bounding box.
  double max_occlusion_fraction = 0.3;
  WeakAugmentSpec color = {};
  bool color_jitter = true;

  /// Every magnitude zero and occlusion off.
  static StrongAugmentSpec none();
};

struct Occlusion {
  std::size_t x = 0, y = 0, w = 0, h = 0;
  double fill = 0.0;
};

/// Parameters of one strong augmentation, drawn from a StrongAugmentSpec.
struct StrongAugmentDraw {
  double rotation_deg = 0.0, tx = 0.0, ty = 0.0, shear = 0.0;
  double blur_sigma = 0.0, noise_sigma = 0.0;
  double contrast = 1.0, brightness = 0.0;
  std::optional<Occlusion> occlusion;
  std::uint64_t noise_seed = 0;
};

StrongAugmentDraw draw_strong(const Tensor& image, std::mt19937_64& rng,
                              const StrongAugmentSpec& spec);
/// Affine warp (rotation, translation, shear; bilinear, zero fill), 3x3
/// Gaussian blur, colour jitter, additive noise, then the occluding
/// rectangle; clamped to [0, 1].
Tensor apply_strong(const Tensor& image, const StrongAugmentDraw& draw);
Tensor strong_augment(const Tensor& image, std::mt19937_64& rng,
                      const StrongAugmentSpec& spec = {});

/// Bounding box of pixels above `threshold`, as (x, y, w, h); nullopt if none.
std::optional<Occlusion> ink_bounding_box(const Tensor& image, double threshold = 0.3);

/// Quantise to 8-bit levels (the on-disk precision).
void quantize_u8(Tensor& image);

class Sample;

/// The only route to a sealed ground-truth string.
struct EvaluationAccess {
  static const std::string& ground_truth(const Sample& s);
};

class Sample {
 public:
  static Sample labeled(Tensor image, std::string label, Condition condition,
                        std::uint64_t seed = 0);
  /// Real-domain sample: the truth is sealed for evaluation only.
  static Sample unlabeled(Tensor image, std::string truth, Condition condition,
                          std::uint64_t seed = 0);

  const Tensor& image() const { return image_; }
  /// Training-visible label; absent for the real domain.
  const std::optional<std::string>& label() const { return label_; }
  Domain domain() const { return domain_; }
  Condition condition() const { return condition_; }
  std::uint64_t seed() const { return seed_; }

  /// Compares pixels, label, truth and tags; the generation seed is not persisted.
  bool operator==(const Sample& o) const;

 private:
  friend struct EvaluationAccess;
  Sample() = default;
  Tensor image_;
  std::optional<std::string> label_;
  std::string sealed_;
  Domain domain_ = Domain::Synthetic;
  Condition condition_ = Condition::Clean;
  std::uint64_t seed_ = 0;
};

struct Dataset {
  std::size_t height = 16, width = 64;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool operator==(const Dataset&) const = default;
};

struct DataConfig {
  std::size_t lexicon_size = 1000;
  double test_lexicon_fraction = 0.2;
  std::size_t labeled = 2000;
  std::size_t unlabeled = 10000;
  std::size_t test_per_split = 1000;
  std::size_t height = 16, width = 64;
  std::uint64_t seed = 1;
};

struct DatasetBundle {
  Dataset labeled_train, unlabeled_train, test_clean, test_distorted, test_occluded;
  std::vector<std::string> train_lexicon, test_lexicon;

  const Dataset& split(std::string_view name) const;
  static constexpr std::array<std::string_view, 5> kSplitNames = {
      "labeled_train", "unlabeled_train", "test_clean", "test_distorted", "test_occluded"};
};

/// `size` distinct words: one third pronounceable consonant-vowel strings,
/// one third random strings over letters and digits, the rest rich in the
/// visually confusable characters {o, 0, 1, l, i}.
std::vector<std::string> make_lexicon(std::size_t size, std::uint64_t seed);

bool has_confusable(std::string_view word);

/// Pure function of `config`; each sample derives its own seed from
/// (config.seed, split, index), so the result does not depend on `threads`.
DatasetBundle make_datasets(const DataConfig& config, unsigned threads = 1);

/// Distortion used for the "distorted" condition of the real domain.
Tensor distort(const Tensor& image, std::mt19937_64& rng);
/// Occlusion patch used for the "occluded" condition.
Tensor occlude(const Tensor& image, std::mt19937_64& rng);

/// "SQCD", u32 version, u32 count, u16 H, u16 W, then per sample u8 domain,
/// u8 condition, u8 label length, label bytes, H*W u8 pixels.
std::vector<std::uint8_t> serialize_dataset(const Dataset& d);
Dataset deserialize_dataset(std::vector<std::uint8_t> bytes);
void save_dataset(const std::filesystem::path& path, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& path);

void save_bundle(const std::filesystem::path& dir, const DatasetBundle& bundle);
DatasetBundle load_bundle(const std::filesystem::path& dir);

}  // namespace seqcr
