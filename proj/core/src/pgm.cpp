#include "iba/pgm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace iba {

void write_pgm(const std::string& path, const std::vector<std::uint8_t>& pixels,
               std::size_t width, std::size_t height) {
  if (pixels.size() != width * height) {
    throw ShapeError("pgm: pixel count " + std::to_string(pixels.size()) + " != " +
                     std::to_string(width) + "x" + std::to_string(height));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("pgm write failed: " + path);
}

void write_pgm_rescaled(const std::string& path, const double* values, std::size_t width,
                        std::size_t height) {
  const std::size_t n = width * height;
  double lo = values[0], hi = values[0];
  for (std::size_t i = 1; i < n; ++i) {
    lo = std::min(lo, values[i]);
    hi = std::max(hi, values[i]);
  }
  std::vector<std::uint8_t> px(n, 0);
  if (hi > lo) {
    const double s = 255.0 / (hi - lo);
    for (std::size_t i = 0; i < n; ++i) {
      px[i] = static_cast<std::uint8_t>(std::lround((values[i] - lo) * s));
    }
  }
  write_pgm(path, px, width, height);
}

}  // namespace iba
