#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cycgrid/model.hpp"
#include "cycgrid/rewards.hpp"
#include "cycgrid/world.hpp"

namespace cycgrid {

// Understanding / generation are evaluated through these closures so oracle
// and degenerate fixtures can stand in for a trained policy.
using UndFn = std::function<Layout(const GridImage&)>;
using GenFn = std::function<GridImage(const Layout&)>;

UndFn policy_und_fn(const Policy& policy);
GenFn policy_gen_fn(const Policy& policy);

UndFn oracle_und_fn();
GenFn rasterize_gen_fn();            // renders the layout exactly (list order as given)
UndFn empty_layout_und_fn();
GenFn background_gen_fn();           // always emits the all-background image

struct UndMetrics {
    double mean_matched_iou = 0.0;
    double precision50 = 0.0, recall50 = 0.0, f1_50 = 0.0;
    double precision75 = 0.0, recall75 = 0.0, f1_75 = 0.0;
    double mean_count_error = 0.0;
    int n = 0;
};

struct GenMetrics {
    double pixel_iou = 0.0;                    // per-class pixel IoU vs rasterized prompt
    std::optional<double> overlap_pixel_iou;   // restricted to GT multi-covered cells
    double mean_hps = 0.0;
    double cycle_miou = 0.0;                   // own-parse of generated image vs prompt layout
    int n = 0;
};

struct CycleMetrics {
    double mean_r1 = 0.0;
    double mean_r2 = 0.0;
    int n = 0;
};

struct EvalSlice {
    UndMetrics und;
    GenMetrics gen;
    CycleMetrics cycle;
};

struct EvalReport {
    EvalSlice pooled;
    std::map<std::string, EvalSlice> tiers;
    std::string header;

    nlohmann::json to_json() const;
};

EvalReport evaluate(const UndFn& und, const GenFn& gen, const std::vector<Scene>& scenes,
                    const RewardWeights& weights, int threads);

}  // namespace cycgrid
