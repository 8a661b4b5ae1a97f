#include "cycgrid/render.hpp"

#include <fstream>
#include <stdexcept>

namespace cycgrid {

const std::array<std::array<uint8_t, 3>, 7> kPalette = {{
    {255, 255, 255},  // 0 background
    {230, 57, 70},    // 1 red
    {29, 53, 87},     // 2 navy
    {42, 157, 143},   // 3 teal
    {244, 162, 97},   // 4 orange
    {142, 68, 173},   // 5 purple
    {233, 196, 106},  // 6 sand
}};

void render_ppm(const GridImage& img, const std::string& path, int scale) {
    if (scale < 1) throw std::runtime_error("render: scale must be >= 1");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    const int side = kGrid * scale;
    out << "P6\n" << side << " " << side << "\n255\n";
    std::string row;
    row.reserve(static_cast<size_t>(side) * 3);
    for (int y = 0; y < side; ++y) {
        row.clear();
        for (int x = 0; x < side; ++x) {
            const auto& rgb = kPalette[img.at(x / scale, y / scale)];
            row.push_back(static_cast<char>(rgb[0]));
            row.push_back(static_cast<char>(rgb[1]));
            row.push_back(static_cast<char>(rgb[2]));
        }
        out.write(row.data(), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw std::runtime_error("render write failed: " + path);
}

}  // namespace cycgrid
