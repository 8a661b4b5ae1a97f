#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cycgrid/checkpoint.hpp"
#include "cycgrid/config.hpp"
#include "cycgrid/cycle_grpo.hpp"
#include "cycgrid/eval.hpp"
#include "cycgrid/metrics.hpp"
#include "cycgrid/model.hpp"
#include "cycgrid/render.hpp"
#include "cycgrid/sft.hpp"
#include "cycgrid/world.hpp"

namespace {

using namespace cycgrid;

RunConfig resolve_config(const std::string& config_path, std::optional<uint64_t> seed,
                         std::optional<int> threads) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    validate(cfg);
    return cfg;
}

int cmd_gen_data(const std::string& tier, int count, const std::string& out, const RunConfig& cfg) {
    std::vector<Scene> scenes;
    scenes.reserve(static_cast<size_t>(count));
    Rng rng(mix_seed(cfg.seed, 0x67656e64617461ULL));
    const std::vector<Difficulty> tiers =
        tier == "mixed" ? std::vector<Difficulty>{Difficulty::Simple, Difficulty::Regular,
                                                  Difficulty::Complex}
                        : std::vector<Difficulty>{difficulty_from_string(tier)};
    for (int i = 0; i < count; ++i) {
        Scene s = sample_scene(rng, tiers[static_cast<size_t>(i) % tiers.size()], cfg.world());
        s.id = i;
        scenes.push_back(std::move(s));
    }
    write_dataset(out, scenes);
    std::cout << "wrote " << scenes.size() << " scenes to " << out << "\n";
    return 0;
}

int cmd_sft(const std::string& data, const std::string& out_ckpt, const std::string& metrics_path,
            const RunConfig& cfg) {
    const auto dataset = read_dataset(data);
    std::optional<MetricsWriter> metrics;
    if (!metrics_path.empty()) metrics.emplace(metrics_path);
    run_sft(dataset, cfg.sft(), cfg.model(), metrics ? &*metrics : nullptr, out_ckpt);
    std::cout << "sft done, checkpoint at " << out_ckpt << "\n";
    return 0;
}

int cmd_rl(const std::string& sft_ckpt, const std::string& data, const std::string& mode_str,
           const std::string& out_ckpt, const std::string& metrics_path, const RunConfig& cfg) {
    const auto dataset = read_dataset(data);
    const RlMode mode = rl_mode_from_string(mode_str);
    const Policy sft_policy = load_checkpoint(sft_ckpt).policy;
    std::optional<MetricsWriter> metrics;
    if (!metrics_path.empty()) metrics.emplace(metrics_path);
    const Policy trained =
        train_rl(sft_policy, dataset, cfg.grpo(), mode, metrics ? &*metrics : nullptr);
    if (!out_ckpt.empty()) save_checkpoint(trained, nullptr, out_ckpt);
    std::cout << "rl done (" << mode_str << "), checkpoint at " << out_ckpt << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& report_path,
             const RunConfig& cfg) {
    const auto dataset = read_dataset(data);
    const Policy policy = load_checkpoint(ckpt).policy;
    const EvalReport rep = evaluate(policy_und_fn(policy), policy_gen_fn(policy), dataset,
                                    cfg.weights(), cfg.effective_threads());
    const std::string text = rep.to_json().dump(2);
    if (report_path.empty()) {
        std::cout << text << "\n";
    } else {
        std::ofstream out(report_path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open report path: " + report_path);
        out << text << "\n";
        std::cout << "report written to " << report_path << "\n";
    }
    return 0;
}

int cmd_render(const std::string& ckpt, const std::string& data, const std::string& out_dir,
               int scale, int count, const RunConfig& cfg) {
    auto dataset = read_dataset(data);
    if (count > 0 && static_cast<size_t>(count) < dataset.size())
        dataset.resize(static_cast<size_t>(count));
    std::filesystem::create_directories(out_dir);
    std::optional<Policy> policy;
    if (!ckpt.empty()) policy = load_checkpoint(ckpt).policy;
    for (const auto& scene : dataset) {
        const std::string base = out_dir + "/scene_" + std::to_string(scene.id);
        render_ppm(rasterize(scene), base + "_gt.ppm", scale);
        if (policy) {
            const GridImage gen = policy_gen_fn(*policy)(layout_of(scene));
            render_ppm(gen, base + "_gen.ppm", scale);
            const Layout parsed = policy_und_fn(*policy)(rasterize(scene));
            Scene pred;
            pred.boxes = parsed.instances;
            render_ppm(rasterize(pred), base + "_pred_layout.ppm", scale);
        }
    }
    std::cout << "rendered " << dataset.size() << " scenes into " << out_dir << "\n";
    (void)cfg;
    return 0;
}

int cmd_grad_check(double tolerance, const RunConfig& cfg) {
    ModelConfig mc;
    mc.d_model = 32;
    mc.n_layers = 2;
    mc.n_heads = 4;
    const GradCheckReport rep = grad_check(mc, 256, 1e-6, tolerance, cfg.seed);
    std::cout << "grad-check: max_rel=" << rep.max_rel << " mean_rel=" << rep.mean_rel
              << " checked=" << rep.n_checked << " worst=" << rep.worst_param
              << (rep.pass ? " PASS" : " FAIL") << "\n";
    return rep.pass ? 0 : 1;
}

int cmd_vocab(const std::string& out) {
    std::ofstream f(out, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + out);
    f << vocab_tsv();
    std::cout << "vocab table written to " << out << " (hash " << vocab_hash() << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cycgrid: cycle-consistent layout/image training on a 16x16 rectangle world"};
    app.require_subcommand(1);
    app.fallthrough();  // --seed/--config/--threads may follow the subcommand

    std::string config_path;
    std::optional<uint64_t> seed;
    std::optional<int> threads;
    app.add_option("--config", config_path, "JSON config file")->capture_default_str();
    app.add_option("--seed", seed, "override config seed");
    app.add_option("--threads", threads, "worker threads (0 = hardware)");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "sample scenes into a JSONL dataset");
    std::string tier = "mixed", gen_out = "scenes.jsonl";
    int count = 100;
    gen->add_option("--tier", tier, "simple|regular|complex|mixed")->capture_default_str();
    gen->add_option("--count", count, "number of scenes")->capture_default_str();
    gen->add_option("--out", gen_out, "output JSONL path")->capture_default_str();

    // sft
    auto* sft = app.add_subcommand("sft", "cycle-consistent supervised warm-up");
    std::string sft_data, sft_out = "sft.cycg", sft_metrics;
    sft->add_option("--data", sft_data, "training dataset JSONL")->required();
    sft->add_option("--out-checkpoint", sft_out, "checkpoint path")->capture_default_str();
    sft->add_option("--metrics", sft_metrics, "metrics JSONL path");

    // rl
    auto* rl = app.add_subcommand("rl", "bidirectional CycleGRPO training");
    std::string rl_ckpt, rl_data, rl_mode = "cycle", rl_out = "rl.cycg", rl_metrics;
    rl->add_option("--sft-checkpoint", rl_ckpt, "SFT checkpoint to start from")->required();
    rl->add_option("--data", rl_data, "training dataset JSONL")->required();
    rl->add_option("--mode", rl_mode, "cycle|no-cycle|und-only|gen-only")->capture_default_str();
    rl->add_option("--out-checkpoint", rl_out, "checkpoint path")->capture_default_str();
    rl->add_option("--metrics", rl_metrics, "metrics JSONL path");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string ev_ckpt, ev_data, ev_report;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--data", ev_data, "dataset JSONL")->required();
    ev->add_option("--report", ev_report, "output JSON report path (stdout if omitted)");

    // render
    auto* rd = app.add_subcommand("render", "write PPM images for scenes (and model outputs)");
    std::string rd_ckpt, rd_data, rd_out = "renders";
    int rd_scale = 16, rd_count = 16;
    rd->add_option("--checkpoint", rd_ckpt, "optional checkpoint for model renders");
    rd->add_option("--data", rd_data, "dataset JSONL")->required();
    rd->add_option("--out-dir", rd_out, "output directory")->capture_default_str();
    rd->add_option("--scale", rd_scale, "pixels per cell")->capture_default_str();
    rd->add_option("--count", rd_count, "max scenes to render (0 = all)")->capture_default_str();

    // grad-check
    auto* gc = app.add_subcommand("grad-check", "finite-difference check of the backward pass");
    double tolerance = 1e-6;
    gc->add_option("--tolerance", tolerance, "max relative error")->capture_default_str();

    // vocab
    auto* vc = app.add_subcommand("vocab", "export the vocabulary table");
    std::string vocab_out = "vocab.tsv";
    vc->add_option("--out", vocab_out, "output TSV path")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        const RunConfig cfg = resolve_config(config_path, seed, threads);
        if (gen->parsed()) return cmd_gen_data(tier, count, gen_out, cfg);
        if (sft->parsed()) return cmd_sft(sft_data, sft_out, sft_metrics, cfg);
        if (rl->parsed()) return cmd_rl(rl_ckpt, rl_data, rl_mode, rl_out, rl_metrics, cfg);
        if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_report, cfg);
        if (rd->parsed()) return cmd_render(rd_ckpt, rd_data, rd_out, rd_scale, rd_count, cfg);
        if (gc->parsed()) return cmd_grad_check(tolerance, cfg);
        if (vc->parsed()) return cmd_vocab(vocab_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
