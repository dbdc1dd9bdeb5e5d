#include "iba/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

namespace iba {
namespace {

constexpr char kCorpusMagic[4] = {'I', 'B', 'A', 'D'};
constexpr std::uint8_t kCorpusVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError("corpus stream truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

// Rotation about the normalized (1,1,1) axis by angle theta (Rodrigues
// formula). Keeps gray pixels fixed while shifting hue.
std::array<std::array<double, 3>, 3> hue_matrix(double theta) {
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  const double k = 1.0 / std::sqrt(3.0);
  const double t = (1.0 - c) / 3.0;
  std::array<std::array<double, 3>, 3> m{};
  for (int i = 0; i < 3; ++i) m[i][i] = c + t;
  // Cross-product matrix entries for the unit diagonal axis.
  m[0][1] = t - s * k;
  m[0][2] = t + s * k;
  m[1][0] = t + s * k;
  m[1][2] = t - s * k;
  m[2][0] = t - s * k;
  m[2][1] = t + s * k;
  return m;
}

std::array<double, 3> base_palette(std::size_t cls) {
  static const std::array<double, 3> kBackground = {0.20, 0.35, 0.70};
  static const std::array<double, 3> kGround = {0.36, 0.26, 0.13};
  static const std::array<std::array<double, 3>, 6> kShapes = {{
      {0.82, 0.15, 0.15},
      {0.15, 0.75, 0.22},
      {0.88, 0.82, 0.16},
      {0.78, 0.20, 0.75},
      {0.15, 0.72, 0.78},
      {0.90, 0.55, 0.12},
  }};
  if (cls == 0) return kBackground;
  if (cls == 1) return kGround;
  return kShapes[(cls - 2) % kShapes.size()];
}

std::vector<std::array<double, 3>> palette(std::size_t num_classes) {
  std::vector<std::array<double, 3>> colors(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) colors[c] = base_palette(c);
  return colors;
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace

const char* domain_name(Domain d) { return d == Domain::kSource ? "source" : "target"; }

Domain domain_from(const std::string& name) {
  if (name == "source") return Domain::kSource;
  if (name == "target") return Domain::kTarget;
  throw ValueError("unknown domain: " + name);
}

void SceneConfig::validate() const {
  if (height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0)
    throw ValueError("scene height and width must be positive multiples of 32");
  if (num_classes < 2) throw ValueError("scene needs at least 2 classes");
}

DomainStyle DomainStyle::source_default(std::size_t num_classes) {
  DomainStyle s;
  s.class_colors = palette(num_classes);
  s.hue_angle = 0.0;
  s.contrast = 1.0;
  s.noise_sigma = 0.02;
  s.texture_freq = 3.0;
  return s;
}

DomainStyle DomainStyle::target_default(std::size_t num_classes) {
  DomainStyle s;
  s.class_colors = palette(num_classes);
  s.hue_angle = 0.6;
  s.contrast = 0.85;
  s.noise_sigma = 0.05;
  s.texture_freq = 7.0;
  return s;
}

SceneSample generate_scene(Rng& rng, const SceneConfig& cfg, const DomainStyle& style,
                           Domain tag) {
  cfg.validate();
  if (style.class_colors.size() < cfg.num_classes)
    throw ValueError("style palette smaller than class count");
  const std::size_t h = cfg.height;
  const std::size_t w = cfg.width;
  const std::size_t m = std::min(h, w);

  // --- Geometry. Every draw below happens before any photometric draw so
  // that two styles rendered from equal seeds share the exact label map. ---
  std::vector<std::uint8_t> labels(h * w, 0);

  const double band_frac = rng.uniform(0.20, 0.35);
  const std::size_t band_rows =
      std::min(h, static_cast<std::size_t>(std::lround(band_frac * static_cast<double>(h))));
  for (std::size_t y = h - band_rows; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) labels[y * w + x] = 1;

  const std::size_t n_rect = rng.uniform_int(1, 4);
  const std::size_t n_disc = rng.uniform_int(1, 3);
  const std::size_t shape_classes = cfg.num_classes > 2 ? cfg.num_classes - 2 : 1;
  const std::size_t class_offset = rng.uniform_below(shape_classes);
  auto shape_class = [&](std::size_t k) -> std::uint8_t {
    if (cfg.num_classes == 2) return 1;  // two-class scenes reuse the band class
    return static_cast<std::uint8_t>(2 + (class_offset + k) % shape_classes);
  };

  std::size_t shape_index = 0;
  for (std::size_t r = 0; r < n_rect; ++r) {
    const std::size_t rw = rng.uniform_int(m / 4, m / 2);
    const std::size_t rh = rng.uniform_int(m / 4, m / 2);
    const std::size_t x0 = rng.uniform_below(w - rw + 1);
    const std::size_t y0 = rng.uniform_below(h - rh + 1);
    const std::uint8_t cls = shape_class(shape_index++);
    for (std::size_t y = y0; y < y0 + rh; ++y)
      for (std::size_t x = x0; x < x0 + rw; ++x) labels[y * w + x] = cls;
  }
  for (std::size_t d = 0; d < n_disc; ++d) {
    const std::size_t radius = rng.uniform_int(m / 8, m / 4);
    const std::size_t cx = rng.uniform_int(radius, w - 1 - radius);
    const std::size_t cy = rng.uniform_int(radius, h - 1 - radius);
    const std::uint8_t cls = shape_class(shape_index++);
    const double r2 = static_cast<double>(radius) * static_cast<double>(radius);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - static_cast<double>(cy);
        const double dx = static_cast<double>(x) - static_cast<double>(cx);
        if (dy * dy + dx * dx <= r2) labels[y * w + x] = cls;
      }
    }
  }

  // --- Photometrics. ---
  const auto hue = hue_matrix(style.hue_angle);
  // Texture depth rides on the noise level so a noise-free style renders
  // perfectly flat class colors.
  const double tex_amp = std::min(0.5, 4.0 * style.noise_sigma);
  std::vector<double> img(3 * h * w, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto& base = style.class_colors[labels[y * w + x]];
      std::array<double, 3> v{};
      for (int c = 0; c < 3; ++c)
        v[c] = hue[c][0] * base[0] + hue[c][1] * base[1] + hue[c][2] * base[2];
      const double phase = style.texture_freq * 2.0 * M_PI *
                           (static_cast<double>(x) / static_cast<double>(w) +
                            static_cast<double>(y) / static_cast<double>(h));
      const double tex = 1.0 + tex_amp * std::sin(phase);
      for (int c = 0; c < 3; ++c) {
        double p = style.contrast * (v[c] - 0.5) + 0.5;
        p *= tex;
        img[static_cast<std::size_t>(c) * h * w + y * w + x] = p;
      }
    }
  }
  if (style.noise_sigma > 0.0) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          img[c * h * w + y * w + x] += style.noise_sigma * rng.normal();
  }
  for (double& p : img) p = clamp01(p);

  SceneSample s;
  s.image = Tensor({3, h, w}, std::move(img));
  s.labels = std::move(labels);
  s.height = h;
  s.width = w;
  s.domain = tag;
  return s;
}

Tensor rica_augment(const Tensor& image, Rng& rng, double strength) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("rica_augment expects [3,H,W], got " + shape_str(image.shape()));
  if (strength < 0.0 || strength > 1.0) throw ValueError("rica strength must be in [0,1]");
  const std::size_t hw = image.dim(1) * image.dim(2);

  // Fixed draw order regardless of strength: 3 gains, 3 biases, 9 mixing
  // weights, 1 mixing amount.
  std::array<double, 3> gain{}, bias{};
  for (int c = 0; c < 3; ++c) gain[c] = rng.uniform(1.0 - 0.4 * strength, 1.0 + 0.4 * strength);
  for (int c = 0; c < 3; ++c) bias[c] = rng.uniform(-0.2 * strength, 0.2 * strength);
  std::array<std::array<double, 3>, 3> raw{};
  for (int i = 0; i < 3; ++i) {
    double row_sum = 0.0;
    for (int j = 0; j < 3; ++j) {
      raw[i][j] = rng.uniform(0.05, 1.0);
      row_sum += raw[i][j];
    }
    for (int j = 0; j < 3; ++j) raw[i][j] /= row_sum;
  }
  const double alpha = 0.3 * strength * rng.uniform();

  std::array<std::array<double, 3>, 3> mix{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) mix[i][j] = (1.0 - alpha) * (i == j ? 1.0 : 0.0) + alpha * raw[i][j];

  const auto& in = image.values();
  std::vector<double> out(in.size(), 0.0);
  for (std::size_t p = 0; p < hw; ++p) {
    std::array<double, 3> v{};
    for (int c = 0; c < 3; ++c) v[c] = gain[c] * in[static_cast<std::size_t>(c) * hw + p] + bias[c];
    for (int c = 0; c < 3; ++c) {
      const double mixed = mix[c][0] * v[0] + mix[c][1] * v[1] + mix[c][2] * v[2];
      out[static_cast<std::size_t>(c) * hw + p] = clamp01(mixed);
    }
  }
  return Tensor(image.shape(), std::move(out));
}

std::size_t Corpus::height() const {
  if (samples.empty()) throw ValueError("empty corpus has no height");
  return samples.front().height;
}

std::size_t Corpus::width() const {
  if (samples.empty()) throw ValueError("empty corpus has no width");
  return samples.front().width;
}

void Corpus::save(std::ostream& out) const {
  out.write(kCorpusMagic, 4);
  out.put(static_cast<char>(kCorpusVersion));
  write_u32(out, static_cast<std::uint32_t>(samples.size()));
  write_u32(out, static_cast<std::uint32_t>(num_classes));
  for (const auto& s : samples) {
    if (s.labels.size() != s.height * s.width)
      throw ValueError("sample label map does not match its dimensions");
    s.image.save(out);
    out.write(reinterpret_cast<const char*>(s.labels.data()),
              static_cast<std::streamsize>(s.labels.size()));
    out.put(static_cast<char>(static_cast<std::uint8_t>(s.domain)));
  }
  if (!out) throw IoError("failed writing corpus stream");
}

Corpus Corpus::load(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCorpusMagic, 4) != 0)
    throw IoError("bad corpus magic; expected IBAD");
  const int version = in.get();
  if (version != kCorpusVersion)
    throw IoError("unsupported corpus version " + std::to_string(version));
  const std::uint32_t count = read_u32(in);
  const std::uint32_t classes = read_u32(in);
  if (classes < 2) throw IoError("corpus class count must be at least 2");

  Corpus corpus;
  corpus.num_classes = classes;
  corpus.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    SceneSample s;
    s.image = Tensor::load(in);
    if (s.image.rank() != 3 || s.image.dim(0) != 3)
      throw IoError("corpus image must be [3,H,W], got " + shape_str(s.image.shape()));
    s.height = s.image.dim(1);
    s.width = s.image.dim(2);
    s.labels.resize(s.height * s.width);
    in.read(reinterpret_cast<char*>(s.labels.data()),
            static_cast<std::streamsize>(s.labels.size()));
    const int dom = in.get();
    if (!in) throw IoError("corpus stream truncated");
    if (dom != 0 && dom != 1) throw IoError("corpus domain tag must be 0 or 1");
    for (std::uint8_t l : s.labels)
      if (l >= classes) throw IoError("corpus label out of range");
    s.domain = static_cast<Domain>(dom);
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

void Corpus::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path);
  save(out);
  if (!out) throw IoError("failed writing: " + path);
}

Corpus Corpus::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("corpus not found: " + path);
  return load(in);
}

Corpus generate_corpus(std::uint64_t seed, std::size_t count, const SceneConfig& cfg,
                       const DomainStyle& style, Domain tag) {
  cfg.validate();
  Corpus corpus;
  corpus.num_classes = cfg.num_classes;
  corpus.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(Rng::derive(seed, i));
    corpus.samples.push_back(generate_scene(rng, cfg, style, tag));
  }
  return corpus;
}

Batch make_batch(const Corpus& corpus, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ValueError("batch needs at least one sample");
  const std::size_t h = corpus.height();
  const std::size_t w = corpus.width();
  const std::size_t b = indices.size();
  std::vector<double> images(b * 3 * h * w);
  std::vector<int> labels(b * h * w);
  for (std::size_t i = 0; i < b; ++i) {
    if (indices[i] >= corpus.samples.size()) throw ValueError("batch index out of range");
    const auto& s = corpus.samples[indices[i]];
    if (s.height != h || s.width != w) throw ValueError("corpus samples disagree on size");
    std::copy(s.image.values().begin(), s.image.values().end(), images.begin() + i * 3 * h * w);
    for (std::size_t p = 0; p < h * w; ++p) labels[i * h * w + p] = s.labels[p];
  }
  Batch batch;
  batch.images = Tensor({b, 3, h, w}, std::move(images));
  batch.labels = std::move(labels);
  batch.size = b;
  batch.height = h;
  batch.width = w;
  return batch;
}

Loader::Loader(const Corpus& corpus, std::size_t batch_size, std::uint64_t seed)
    : corpus_(&corpus), batch_size_(batch_size), rng_(seed) {
  if (batch_size == 0) throw ValueError("batch size must be positive");
  if (batch_size > corpus.samples.size())
    throw ValueError("batch size " + std::to_string(batch_size) + " exceeds corpus size " +
                     std::to_string(corpus.samples.size()));
  order_.resize(corpus.samples.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  reshuffle();
}

void Loader::reshuffle() {
  for (std::size_t i = order_.size(); i > 1; --i) {
    const std::size_t j = rng_.uniform_below(i);
    std::swap(order_[i - 1], order_[j]);
  }
  pos_ = 0;
}

std::size_t Loader::batches_per_epoch() const { return corpus_->samples.size() / batch_size_; }

Batch Loader::next() {
  if (pos_ + batch_size_ > order_.size()) reshuffle();
  std::vector<std::size_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                               order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_size_));
  pos_ += batch_size_;
  return make_batch(*corpus_, idx);
}

}  // namespace iba
