#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "cycgrid/cycle_grpo.hpp"
#include "cycgrid/model.hpp"
#include "cycgrid/sft.hpp"
#include "cycgrid/world.hpp"

namespace cycgrid {

// Flat run configuration; one JSON file covers world, model, SFT and RL.
// Unknown keys are errors so typos fail loudly.
struct RunConfig {
    // world
    int grid = 16;
    int num_classes = 6;
    int min_box = 2;
    int max_box = 8;
    int max_boxes = 5;
    int sample_attempt_cap = 10000;
    // model
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int context = 320;
    // sft
    int sft_steps = 15000;
    double sft_lr = 3e-4;
    int sft_batch = 8;
    int sft_warmup_gt = 3000;
    int sft_metrics_interval = 25;
    int sft_checkpoint_interval = 0;
    // rl
    int rl_steps = 1000;
    double rl_lr = 1e-5;
    int group_size = 4;
    double clip_eps = 0.2;
    double kl_beta = 0.01;
    double temperature = 1.0;
    int inner_epochs = 1;
    double adv_eps = 1e-8;
    std::string baseline = "group-mean";  // or "zero"
    std::string loss_mode = "clipped";    // or "reinforce-baseline"
    std::string ratio_mode = "token";     // or "sequence"
    int interleave_und = 1;
    int interleave_gen = 1;
    int rl_eval_interval = 0;
    int rl_eval_subset = 32;
    // rewards
    double lambda_iou = 1.0;
    double lambda_clip = 1.0;
    double lambda_hps = 2.0;
    // misc
    uint64_t seed = 0;
    int threads = 0;  // 0 = hardware concurrency

    WorldConfig world() const;
    ModelConfig model() const;
    SftConfig sft() const;
    GrpoConfig grpo() const;
    RewardWeights weights() const;
    int effective_threads() const;
};

RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::string& path);
void validate(const RunConfig& cfg);

}  // namespace cycgrid
