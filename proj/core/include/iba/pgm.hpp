#pragma once

#include <string>

#include "iba/tensor.hpp"

namespace iba {

// Binary PGM (P5), one byte per pixel.
void write_pgm(const std::string& path, const std::vector<std::uint8_t>& pixels,
               std::size_t width, std::size_t height);

// Rescales a [H,W]-shaped slice of values to 0..255 (min -> 0, max -> 255;
// constant input -> all zeros) and writes it as PGM.
void write_pgm_rescaled(const std::string& path, const double* values, std::size_t width,
                        std::size_t height);

}  // namespace iba
