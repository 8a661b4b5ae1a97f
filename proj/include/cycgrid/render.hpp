#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "cycgrid/world.hpp"

namespace cycgrid {

// Fixed 7-color palette, class 0 (background) first. Published in the README
// so renders are reproducible byte-for-byte.
extern const std::array<std::array<uint8_t, 3>, 7> kPalette;

// Binary P6 PPM, width = height = 16·scale, nearest-neighbor upscaling.
void render_ppm(const GridImage& img, const std::string& path, int scale);

}  // namespace cycgrid
