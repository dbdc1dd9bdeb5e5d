#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "iba/rng.hpp"
#include "iba/tensor.hpp"

namespace iba {

enum class Domain : std::uint8_t { kSource = 0, kTarget = 1 };

const char* domain_name(Domain d);
Domain domain_from(const std::string& name);

struct SceneConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t num_classes = 5;

  void validate() const;  // H, W divisible by 32; at least 2 classes
};

// Rendering recipe for one domain. Scene geometry never depends on it, so the
// same rng seed yields identical label maps under any style.
struct DomainStyle {
  std::vector<std::array<double, 3>> class_colors;
  double hue_angle = 0.0;     // radians, rotation around the gray axis
  double contrast = 1.0;
  double noise_sigma = 0.02;  // additive noise; also scales texture depth
  double texture_freq = 3.0;

  static DomainStyle source_default(std::size_t num_classes);
  static DomainStyle target_default(std::size_t num_classes);
};

struct SceneSample {
  Tensor image;                      // [3,H,W], values in [0,1]
  std::vector<std::uint8_t> labels;  // H*W row-major class ids
  std::size_t height = 0, width = 0;
  Domain domain = Domain::kSource;
};

// Layered scene: background class 0, a ground band of class 1, then 1-4
// rectangles and 1-3 discs cycling through the remaining classes. The label
// map mirrors the drawn geometry exactly.
SceneSample generate_scene(Rng& rng, const SceneConfig& cfg, const DomainStyle& style,
                           Domain tag = Domain::kSource);

// Photometric-only augmentation: per-channel gain/bias jitter followed by a
// convex perturbation of the identity channel-mixing matrix, clamped to
// [0,1]. strength 0 is the exact identity. Labels are untouched by design
// since only the image is transformed.
Tensor rica_augment(const Tensor& image, Rng& rng, double strength);

struct Corpus {
  std::size_t num_classes = 0;
  std::vector<SceneSample> samples;

  std::size_t height() const;
  std::size_t width() const;

  void save(std::ostream& out) const;
  static Corpus load(std::istream& in);
  void save_file(const std::string& path) const;
  static Corpus load_file(const std::string& path);
};

// Sample i is drawn from its own stream derived from (seed, i), so the corpus
// is reproducible and order-independent.
Corpus generate_corpus(std::uint64_t seed, std::size_t count, const SceneConfig& cfg,
                       const DomainStyle& style, Domain tag);

struct Batch {
  Tensor images;            // [B,3,H,W]
  std::vector<int> labels;  // B*H*W
  std::size_t size = 0, height = 0, width = 0;
};

Batch make_batch(const Corpus& corpus, const std::vector<std::size_t>& indices);

// Uniform shuffled batches without temporal structure; reshuffles each epoch
// and drops the ragged remainder.
class Loader {
 public:
  Loader(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed);
  Batch next();
  std::size_t batches_per_epoch() const;

 private:
  void reshuffle();

  const Corpus* corpus_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace iba
