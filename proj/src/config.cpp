#include "cycgrid/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>
#include <thread>

namespace cycgrid {

using nlohmann::json;

WorldConfig RunConfig::world() const {
    WorldConfig w;
    w.grid = grid;
    w.num_classes = num_classes;
    w.min_box = min_box;
    w.max_box = max_box;
    w.max_boxes = max_boxes;
    w.attempt_cap = sample_attempt_cap;
    return w;
}

ModelConfig RunConfig::model() const {
    ModelConfig m;
    m.d_model = d_model;
    m.n_layers = n_layers;
    m.n_heads = n_heads;
    m.context = context;
    return m;
}

SftConfig RunConfig::sft() const {
    SftConfig s;
    s.steps = sft_steps;
    s.lr = sft_lr;
    s.batch = sft_batch;
    s.warmup_gt = sft_warmup_gt;
    s.seed = seed;
    s.threads = effective_threads();
    s.metrics_interval = sft_metrics_interval;
    s.checkpoint_interval = sft_checkpoint_interval;
    return s;
}

GrpoConfig RunConfig::grpo() const {
    GrpoConfig g;
    g.group_size = group_size;
    g.clip_eps = clip_eps;
    g.kl_beta = kl_beta;
    g.temperature = temperature;
    g.inner_epochs = inner_epochs;
    g.adv_eps = adv_eps;
    if (baseline == "group-mean") g.baseline = GrpoConfig::Baseline::GroupMean;
    else if (baseline == "zero") g.baseline = GrpoConfig::Baseline::Zero;
    else throw std::runtime_error("config: baseline must be group-mean|zero");
    if (loss_mode == "clipped") g.loss_mode = GrpoConfig::LossMode::Clipped;
    else if (loss_mode == "reinforce-baseline")
        g.loss_mode = GrpoConfig::LossMode::ReinforceBaseline;
    else throw std::runtime_error("config: loss_mode must be clipped|reinforce-baseline");
    if (ratio_mode == "token") g.ratio_mode = GrpoConfig::RatioMode::Token;
    else if (ratio_mode == "sequence") g.ratio_mode = GrpoConfig::RatioMode::Sequence;
    else throw std::runtime_error("config: ratio_mode must be token|sequence");
    g.interleave_und = interleave_und;
    g.interleave_gen = interleave_gen;
    g.lr = rl_lr;
    g.steps = rl_steps;
    g.weights = weights();
    g.seed = seed;
    g.threads = effective_threads();
    g.eval_interval = rl_eval_interval;
    g.eval_subset = rl_eval_subset;
    return g;
}

RewardWeights RunConfig::weights() const {
    return RewardWeights{lambda_iou, lambda_clip, lambda_hps};
}

int RunConfig::effective_threads() const {
    if (threads > 0) return threads;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

RunConfig config_from_json(const json& j) {
    RunConfig c;
    std::set<std::string> known;
    auto geti = [&](const char* key, int& out) {
        known.insert(key);
        if (j.contains(key)) out = j.at(key).get<int>();
    };
    auto getd = [&](const char* key, double& out) {
        known.insert(key);
        if (j.contains(key)) out = j.at(key).get<double>();
    };
    auto gets = [&](const char* key, std::string& out) {
        known.insert(key);
        if (j.contains(key)) out = j.at(key).get<std::string>();
    };
    auto getu = [&](const char* key, uint64_t& out) {
        known.insert(key);
        if (j.contains(key)) out = j.at(key).get<uint64_t>();
    };

    geti("grid", c.grid);
    geti("num_classes", c.num_classes);
    geti("min_box", c.min_box);
    geti("max_box", c.max_box);
    geti("max_boxes", c.max_boxes);
    geti("sample_attempt_cap", c.sample_attempt_cap);
    geti("d_model", c.d_model);
    geti("n_layers", c.n_layers);
    geti("n_heads", c.n_heads);
    geti("context", c.context);
    geti("sft_steps", c.sft_steps);
    getd("sft_lr", c.sft_lr);
    geti("sft_batch", c.sft_batch);
    geti("sft_warmup_gt", c.sft_warmup_gt);
    geti("sft_metrics_interval", c.sft_metrics_interval);
    geti("sft_checkpoint_interval", c.sft_checkpoint_interval);
    geti("rl_steps", c.rl_steps);
    getd("rl_lr", c.rl_lr);
    geti("group_size", c.group_size);
    getd("clip_eps", c.clip_eps);
    getd("kl_beta", c.kl_beta);
    getd("temperature", c.temperature);
    geti("inner_epochs", c.inner_epochs);
    getd("adv_eps", c.adv_eps);
    gets("baseline", c.baseline);
    gets("loss_mode", c.loss_mode);
    gets("ratio_mode", c.ratio_mode);
    geti("interleave_und", c.interleave_und);
    geti("interleave_gen", c.interleave_gen);
    geti("rl_eval_interval", c.rl_eval_interval);
    geti("rl_eval_subset", c.rl_eval_subset);
    getd("lambda_iou", c.lambda_iou);
    getd("lambda_clip", c.lambda_clip);
    getd("lambda_hps", c.lambda_hps);
    getu("seed", c.seed);
    geti("threads", c.threads);

    for (const auto& [key, value] : j.items())
        if (!known.count(key))
            throw std::runtime_error("config: unknown key '" + key + "'");

    validate(c);
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("config parse error in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

void validate(const RunConfig& cfg) {
    if (cfg.grid != kGrid) throw std::runtime_error("config: grid must be 16");
    if (cfg.num_classes != kNumClasses) throw std::runtime_error("config: num_classes must be 6");
    if (cfg.context != kContext) throw std::runtime_error("config: context must be 320");
    if (cfg.min_box < 1 || cfg.max_box > cfg.grid || cfg.min_box > cfg.max_box)
        throw std::runtime_error("config: box size bounds invalid");
    if (cfg.max_boxes < 1 || cfg.max_boxes > kMaxSceneBoxes)
        throw std::runtime_error("config: max_boxes must lie in 1..5");
    if (cfg.d_model <= 0 || cfg.n_layers <= 0 || cfg.n_heads <= 0 ||
        cfg.d_model % cfg.n_heads != 0)
        throw std::runtime_error("config: invalid model shape");
    if (cfg.sft_steps <= 0 || cfg.sft_batch <= 0 || cfg.sft_warmup_gt < 0 ||
        cfg.sft_warmup_gt > cfg.sft_steps)
        throw std::runtime_error("config: invalid sft schedule");
    if (cfg.sft_lr <= 0 || cfg.rl_lr <= 0) throw std::runtime_error("config: lr must be > 0");
    if (cfg.sft_metrics_interval <= 0)
        throw std::runtime_error("config: sft_metrics_interval must be > 0");
    // the rest of the RL fields are validated by GrpoConfig::validate
    RunConfig copy = cfg;
    copy.grpo().validate();
}

}  // namespace cycgrid
