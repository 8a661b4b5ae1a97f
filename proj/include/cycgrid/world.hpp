#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cycgrid/rng.hpp"

namespace cycgrid {

constexpr int kGrid = 16;
constexpr int kNumClasses = 6;  // cell classes are 1..6, 0 is background
constexpr int kMaxSceneBoxes = 5;

enum class Difficulty { Simple, Regular, Complex };

const char* to_string(Difficulty d);
Difficulty difficulty_from_string(const std::string& s);

// Axis-aligned box on the integer grid, half-open: cells x0..x1-1 × y0..y1-1.
struct BoxSpec {
    int cls = 1;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    int area() const { return width() * height(); }
    bool operator==(const BoxSpec&) const = default;
};

// Ordered box list; list order is z-order, later boxes occlude earlier ones.
struct Scene {
    int64_t id = 0;
    int grid = kGrid;
    std::vector<BoxSpec> boxes;
    Difficulty difficulty = Difficulty::Simple;
};

struct GridImage {
    std::array<uint8_t, kGrid * kGrid> cells{};

    uint8_t at(int x, int y) const { return cells[static_cast<size_t>(y) * kGrid + x]; }
    uint8_t& at(int x, int y) { return cells[static_cast<size_t>(y) * kGrid + x]; }
    bool operator==(const GridImage&) const = default;
};

// Unordered multiset of box instances; comparison elsewhere ignores order.
struct Layout {
    std::vector<BoxSpec> instances;
};

struct WorldConfig {
    int grid = kGrid;
    int num_classes = kNumClasses;
    int min_box = 2;
    int max_box = 8;
    int max_boxes = kMaxSceneBoxes;
    int attempt_cap = 10000;
};

// Fraction of covered cells that are covered by two or more boxes; 0 for an
// empty scene. Difficulty bands: Simple == 0, Regular in (0, 0.25),
// Complex in [0.25, 1].
double overlap_score(const Scene& scene);

bool in_difficulty_band(double score, Difficulty d);

// Rejection-samples a scene whose overlap_score lands in the tier band.
// Throws std::runtime_error after cfg.attempt_cap failed attempts.
Scene sample_scene(Rng& rng, Difficulty difficulty, const WorldConfig& cfg);

GridImage rasterize(const Scene& scene);

Layout layout_of(const Scene& scene);

// Exact inverse of rasterize for non-overlapping scenes: one box per maximal
// 4-connected monochromatic region, box = the region's bounding rectangle.
Layout oracle_parse(const GridImage& img);

void write_dataset(const std::string& path, const std::vector<Scene>& scenes);
std::vector<Scene> read_dataset(const std::string& path);

}  // namespace cycgrid
