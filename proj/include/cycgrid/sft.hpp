#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cycgrid/metrics.hpp"
#include "cycgrid/model.hpp"
#include "cycgrid/world.hpp"

namespace cycgrid {

struct SftConfig {
    int steps = 15000;
    double lr = 3e-4;
    int batch = 8;
    int warmup_gt = 3000;  // steps conditioned on the GT layout before switching to predictions
    uint64_t seed = 0;
    int threads = 1;
    int metrics_interval = 25;
    int checkpoint_interval = 0;  // 0 = final checkpoint only
};

struct SftLosses {
    double l_und = 0.0;
    double l_gen = 0.0;
    double l_sft() const { return l_und + l_gen; }
};

// Greedy constrained decode of the understanding direction; always yields a
// strict-parseable layout. No gradients flow through this decode.
Layout predict_layout_greedy(const Policy& policy, const GridImage& img);

// Instrumentation hook payload: which conditioning was used this step and
// the exact layout tokens fed to each generation prompt.
struct SftStepInfo {
    int step = 0;
    bool used_predicted = false;
    std::vector<std::vector<int>> gen_prompt_layout_tokens;
};
using SftObserver = std::function<void(const SftStepInfo&)>;

// One optimizer step over l_und + l_gen (all parameter groups). Generation
// sequences condition on the model's own greedy layout prediction once
// step >= cfg.warmup_gt, on the GT layout before that.
SftLosses sft_step(Policy& policy, OptimState& opt, const std::vector<Scene>& batch,
                   const SftConfig& cfg, int step, const SftObserver& observer = {});

// Full warm-up loop over seeded shuffled batches. Writes metrics every
// metrics_interval steps and a checkpoint at the end (plus intervals when
// configured). Returns the trained policy.
Policy run_sft(const std::vector<Scene>& dataset, const SftConfig& cfg, const ModelConfig& mcfg,
               MetricsWriter* metrics, const std::string& checkpoint_path);

}  // namespace cycgrid
