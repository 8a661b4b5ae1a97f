#include "cycgrid/world.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace cycgrid {

using nlohmann::json;

const char* to_string(Difficulty d) {
    switch (d) {
        case Difficulty::Simple: return "simple";
        case Difficulty::Regular: return "regular";
        case Difficulty::Complex: return "complex";
    }
    return "simple";
}

Difficulty difficulty_from_string(const std::string& s) {
    if (s == "simple") return Difficulty::Simple;
    if (s == "regular") return Difficulty::Regular;
    if (s == "complex") return Difficulty::Complex;
    throw std::runtime_error("unknown difficulty: " + s);
}

double overlap_score(const Scene& scene) {
    std::array<uint8_t, kGrid * kGrid> cover{};
    for (const auto& b : scene.boxes)
        for (int y = b.y0; y < b.y1; ++y)
            for (int x = b.x0; x < b.x1; ++x) {
                auto& c = cover[static_cast<size_t>(y) * kGrid + x];
                if (c < 2) ++c;
            }
    int covered = 0, multi = 0;
    for (uint8_t c : cover) {
        if (c >= 1) ++covered;
        if (c >= 2) ++multi;
    }
    return covered == 0 ? 0.0 : static_cast<double>(multi) / covered;
}

bool in_difficulty_band(double score, Difficulty d) {
    switch (d) {
        case Difficulty::Simple: return score == 0.0;
        case Difficulty::Regular: return score > 0.0 && score < 0.25;
        case Difficulty::Complex: return score >= 0.25;
    }
    return false;
}

namespace {

// 4-adjacent contact between two non-overlapping same-class rectangles; the
// rasterized regions would merge and the oracle could not separate them
bool same_class_touch(const BoxSpec& a, const BoxSpec& b) {
    if (a.cls != b.cls) return false;
    const bool x_overlap = a.x0 < b.x1 && b.x0 < a.x1;
    const bool y_overlap = a.y0 < b.y1 && b.y0 < a.y1;
    if ((a.x1 == b.x0 || b.x1 == a.x0) && y_overlap) return true;
    if ((a.y1 == b.y0 || b.y1 == a.y0) && x_overlap) return true;
    return false;
}

}  // namespace

Scene sample_scene(Rng& rng, Difficulty difficulty, const WorldConfig& cfg) {
    if (cfg.grid != kGrid) throw std::runtime_error("world config: grid must be 16");
    if (cfg.min_box < 1 || cfg.max_box > cfg.grid || cfg.min_box > cfg.max_box ||
        cfg.max_boxes < 1 || cfg.max_boxes > kMaxSceneBoxes || cfg.num_classes != kNumClasses)
        throw std::runtime_error("world config: invalid bounds");

    for (int attempt = 0; attempt < cfg.attempt_cap; ++attempt) {
        Scene s;
        s.difficulty = difficulty;
        const int n = rng.uniform_int(1, cfg.max_boxes);
        s.boxes.reserve(n);
        for (int i = 0; i < n; ++i) {
            BoxSpec b;
            b.cls = rng.uniform_int(1, cfg.num_classes);
            const int w = rng.uniform_int(cfg.min_box, cfg.max_box);
            const int h = rng.uniform_int(cfg.min_box, cfg.max_box);
            b.x0 = rng.uniform_int(0, cfg.grid - w);
            b.y0 = rng.uniform_int(0, cfg.grid - h);
            b.x1 = b.x0 + w;
            b.y1 = b.y0 + h;
            s.boxes.push_back(b);
        }
        if (!in_difficulty_band(overlap_score(s), difficulty)) continue;
        if (difficulty == Difficulty::Simple) {
            // keep same-class boxes non-adjacent so oracle_parse∘rasterize is exact
            bool touch = false;
            for (size_t i = 0; i + 1 < s.boxes.size() && !touch; ++i)
                for (size_t j = i + 1; j < s.boxes.size() && !touch; ++j)
                    touch = same_class_touch(s.boxes[i], s.boxes[j]);
            if (touch) continue;
        }
        return s;
    }
    throw std::runtime_error("generation error: no scene in tier band '" +
                             std::string(to_string(difficulty)) + "' after " +
                             std::to_string(cfg.attempt_cap) + " attempts");
}

GridImage rasterize(const Scene& scene) {
    GridImage img;
    for (const auto& b : scene.boxes)
        for (int y = b.y0; y < b.y1; ++y)
            for (int x = b.x0; x < b.x1; ++x) img.at(x, y) = static_cast<uint8_t>(b.cls);
    return img;
}

Layout layout_of(const Scene& scene) {
    return Layout{scene.boxes};
}

Layout oracle_parse(const GridImage& img) {
    Layout out;
    std::array<bool, kGrid * kGrid> seen{};
    std::vector<int> stack;
    for (int y = 0; y < kGrid; ++y)
        for (int x = 0; x < kGrid; ++x) {
            const size_t idx = static_cast<size_t>(y) * kGrid + x;
            const uint8_t cls = img.cells[idx];
            if (cls == 0 || seen[idx]) continue;
            // flood fill this region, tracking the bounding rectangle
            int minx = x, maxx = x, miny = y, maxy = y;
            stack.assign(1, static_cast<int>(idx));
            seen[idx] = true;
            while (!stack.empty()) {
                const int cur = stack.back();
                stack.pop_back();
                const int cx = cur % kGrid, cy = cur / kGrid;
                minx = std::min(minx, cx);
                maxx = std::max(maxx, cx);
                miny = std::min(miny, cy);
                maxy = std::max(maxy, cy);
                const int nbr[4][2] = {{cx - 1, cy}, {cx + 1, cy}, {cx, cy - 1}, {cx, cy + 1}};
                for (auto [nx, ny] : nbr) {
                    if (nx < 0 || nx >= kGrid || ny < 0 || ny >= kGrid) continue;
                    const size_t nidx = static_cast<size_t>(ny) * kGrid + nx;
                    if (!seen[nidx] && img.cells[nidx] == cls) {
                        seen[nidx] = true;
                        stack.push_back(static_cast<int>(nidx));
                    }
                }
            }
            out.instances.push_back(BoxSpec{cls, minx, miny, maxx + 1, maxy + 1});
        }
    return out;
}

namespace {

json box_to_json(const BoxSpec& b) {
    return json{{"cls", b.cls}, {"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}};
}

BoxSpec box_from_json(const json& j) {
    BoxSpec b;
    b.cls = j.at("cls").get<int>();
    b.x0 = j.at("x0").get<int>();
    b.y0 = j.at("y0").get<int>();
    b.x1 = j.at("x1").get<int>();
    b.y1 = j.at("y1").get<int>();
    if (b.cls < 1 || b.cls > kNumClasses)
        throw std::runtime_error("schema error: cls out of range 1..6");
    if (b.x0 < 0 || b.y0 < 0 || b.x1 > kGrid || b.y1 > kGrid || b.x0 >= b.x1 || b.y0 >= b.y1)
        throw std::runtime_error("schema error: box coordinates out of range");
    return b;
}

}  // namespace

void write_dataset(const std::string& path, const std::vector<Scene>& scenes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const auto& s : scenes) {
        json j{{"id", s.id},
               {"grid", s.grid},
               {"difficulty", to_string(s.difficulty)},
               {"boxes", json::array()}};
        for (const auto& b : s.boxes) j["boxes"].push_back(box_to_json(b));
        out << j.dump() << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<Scene> read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::vector<Scene> scenes;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error("parse error at line " + std::to_string(lineno) + ": " +
                                     e.what());
        }
        try {
            Scene s;
            s.id = j.at("id").get<int64_t>();
            s.grid = j.at("grid").get<int>();
            if (s.grid != kGrid) throw std::runtime_error("schema error: grid must be 16");
            s.difficulty = difficulty_from_string(j.at("difficulty").get<std::string>());
            const auto& boxes = j.at("boxes");
            if (!boxes.is_array() || boxes.empty() || boxes.size() > kMaxSceneBoxes)
                throw std::runtime_error("schema error: boxes must have 1..5 entries");
            for (const auto& bj : boxes) s.boxes.push_back(box_from_json(bj));
            scenes.push_back(std::move(s));
        } catch (const json::exception& e) {
            throw std::runtime_error("schema error at line " + std::to_string(lineno) + ": " +
                                     e.what());
        } catch (const std::runtime_error& e) {
            throw std::runtime_error(std::string(e.what()) + " (line " + std::to_string(lineno) +
                                     ")");
        }
    }
    return scenes;
}

}  // namespace cycgrid
