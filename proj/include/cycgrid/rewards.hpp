#pragma once

#include <optional>
#include <vector>

#include "cycgrid/world.hpp"

namespace cycgrid {

struct RewardWeights {
    double lambda_iou = 1.0;
    double lambda_clip = 1.0;
    double lambda_hps = 2.0;
};

// Per-sample reward components; absent components carry no weight.
struct RewardBreakdown {
    double iou = 0.0;
    std::optional<double> clip_proxy;
    std::optional<double> hps_proxy;
    double total = 0.0;
};

struct Matching {
    std::vector<std::pair<int, int>> pairs;  // (pred index, gt index)
    std::vector<double> pair_iou;
    double mean_iou = 0.0;  // summed matched IoU / max(|pred|, |gt|, 1)
};

constexpr int kMatcherCap = 8;

double box_iou(const BoxSpec& a, const BoxSpec& b);

// Exact optimal one-to-one same-class assignment maximizing summed IoU.
// Only pairs with IoU > 0 are matched. Empty vs empty scores 1.0.
Matching match_layouts(const Layout& pred, const Layout& gt);

// Deterministic stand-in for a semantic image-similarity score:
// 0.5·cell agreement + 0.5·cosine of 7-bin class histograms.
double clip_proxy(const GridImage& pred, const GridImage& ref);

// Deterministic stand-in for a perceptual quality score: mean solidity of
// connected non-background regions, gated by min(1, painted/16) so an empty
// image scores 0 rather than vacuously 1.
double hps_proxy(const GridImage& img);

RewardBreakdown reward_r1(const Layout& l_pred, const Layout& l_gt, const GridImage& i_pred,
                          const GridImage& i_gt, const RewardWeights& w);

RewardBreakdown reward_r2(const Layout& l_parsed, const Layout& l_prompt,
                          const GridImage& i_pred, const RewardWeights& w);

}  // namespace cycgrid
