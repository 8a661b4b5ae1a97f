#pragma once

#include <string>
#include <vector>

#include "cycgrid/metrics.hpp"
#include "cycgrid/model.hpp"
#include "cycgrid/rewards.hpp"
#include "cycgrid/world.hpp"

namespace cycgrid {

enum class RlMode { Cycle, NoCycle, UndOnly, GenOnly };
enum class RlDirection { UndToGen, GenToUnd };

const char* to_string(RlMode m);
const char* to_string(RlDirection d);
RlMode rl_mode_from_string(const std::string& s);

struct GrpoConfig {
    int group_size = 4;
    double clip_eps = 0.2;
    double kl_beta = 0.01;
    double temperature = 1.0;
    int inner_epochs = 1;
    double adv_eps = 1e-8;
    enum class Baseline { GroupMean, Zero } baseline = Baseline::GroupMean;
    enum class LossMode { Clipped, ReinforceBaseline } loss_mode = LossMode::Clipped;
    enum class RatioMode { Token, Sequence } ratio_mode = RatioMode::Token;
    int interleave_und = 1;
    int interleave_gen = 1;
    double lr = 1e-5;
    int steps = 1000;
    RewardWeights weights;
    uint64_t seed = 0;
    int threads = 1;
    int eval_interval = 0;  // 0 = no periodic eval
    int eval_subset = 32;

    void validate() const;
};

// a_i = (r_i - mean) / (population std + adv_eps)
std::vector<double> advantages(const std::vector<double>& rewards, double adv_eps);

// One sampled output plus everything needed to re-evaluate it under the
// updated and reference policies.
struct Candidate {
    RolloutTrajectory traj;
    std::vector<std::vector<double>> ref_logp;  // per token, dense over vocab
    RewardBreakdown reward;
};

struct RolloutGroup {
    std::vector<int> prompt;
    RlDirection direction = RlDirection::UndToGen;
    std::vector<Candidate> candidates;
};

// Token-level view of a rollout group for the loss. `row` indexes the stacked
// new-policy logits tensor.
struct GrpoTokenRef {
    int candidate = 0;
    int chosen = 0;
    double logp_old = 0.0;
    const TokenMask* mask = nullptr;
    const double* ref_logp = nullptr;
};

struct GrpoLossOut {
    double loss = 0.0;
    double kl = 0.0;
};

// Clipped / reinforce-baseline GRPO surrogate over restricted supports.
// new_logits holds one row per entry of tokens; dlogits (same shape, may be
// null) receives dLoss/dlogits ready for backward().
GrpoLossOut grpo_loss_and_grads(const Tensor& new_logits, const std::vector<GrpoTokenRef>& tokens,
                                int n_candidates, const std::vector<double>& adv,
                                const std::vector<double>& rewards, const GrpoConfig& cfg,
                                Tensor* dlogits);

struct RlStepMetrics {
    RlDirection direction = RlDirection::UndToGen;
    std::vector<RewardBreakdown> rewards;
    std::vector<double> adv;
    double loss = 0.0;
    double kl = 0.0;
    double grad_norm = 0.0;
    bool degenerate = false;
};

// Und→Gen: rollout G layout candidates from the image prompt, greedily render
// each into an image, reward with R1, update {Backbone, Und}.
RlStepMetrics step_und_to_gen(Policy& policy, const Policy& ref, OptimState& opt,
                              const Scene& scene, const GrpoConfig& cfg, RlMode mode,
                              uint64_t step_seed);

// Gen→Und: rollout G image candidates from the layout prompt, parse each with
// the policy's own understanding branch, reward with R2, update {Backbone, Gen}.
RlStepMetrics step_gen_to_und(Policy& policy, const Policy& ref, OptimState& opt,
                              const Scene& scene, const GrpoConfig& cfg, RlMode mode,
                              uint64_t step_seed);

// Full RL phase: freezes the reference policy at entry, alternates directions
// per the interleave ratio, emits one metrics record per step.
Policy train_rl(const Policy& sft_policy, const std::vector<Scene>& dataset, const GrpoConfig& cfg,
                RlMode mode, MetricsWriter* metrics);

}  // namespace cycgrid
