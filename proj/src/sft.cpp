#include "cycgrid/sft.hpp"

#include <cmath>
#include <stdexcept>

#include "cycgrid/checkpoint.hpp"

namespace cycgrid {

Layout predict_layout_greedy(const Policy& policy, const GridImage& img) {
    std::vector<int> prompt;
    prompt.reserve(2 + kImageTokens + 1);
    prompt.push_back(tok::BOS);
    prompt.push_back(tok::TASK_UND);
    const auto img_tokens = encode_image(img);
    prompt.insert(prompt.end(), img_tokens.begin(), img_tokens.end());
    prompt.push_back(tok::SEP);

    RolloutTrajectory traj = rollout(policy, prompt, GrammarState::layout_start(), 1.0, nullptr);
    traj.tokens.pop_back();  // trailing EOS
    return decode_layout(traj.tokens, DecodeMode::Strict);
}

SftLosses sft_step(Policy& policy, OptimState& opt, const std::vector<Scene>& batch,
                   const SftConfig& cfg, int step, const SftObserver& observer) {
    if (batch.empty()) throw std::runtime_error("sft_step: empty batch");
    const bool use_predicted = step >= cfg.warmup_gt;
    const int n = static_cast<int>(batch.size());

    // target counts are known from sequence structure, so per-item gradients
    // can be scaled before the ordered reduction
    long total_u = 0, total_g = 0;
    std::vector<std::vector<int>> img_tokens(batch.size());
    for (int i = 0; i < n; ++i) {
        const auto& s = batch[static_cast<size_t>(i)];
        img_tokens[static_cast<size_t>(i)] = encode_image(rasterize(s));
        total_u += 6 * static_cast<long>(s.boxes.size()) + 1;
        total_g += kImageTokens + 1;
    }

    // per-block gradient accumulators; the static partition makes the sum
    // deterministic for any thread count
    const int n_blocks = parallel_num_blocks(n, cfg.threads);
    std::vector<Params> grads(static_cast<size_t>(n_blocks));
    for (auto& g : grads) g = zeros_like(policy);
    std::vector<double> nll_u(batch.size(), 0.0), nll_g(batch.size(), 0.0);
    std::vector<std::vector<int>> gen_prompt_layouts(batch.size());

    parallel_for(n, cfg.threads, [&](int i) {
        const auto& scene = batch[static_cast<size_t>(i)];
        const auto& img = img_tokens[static_cast<size_t>(i)];
        Params& g = grads[static_cast<size_t>(parallel_block_of(i, n, cfg.threads))];

        thread_local Trace tr;
        const auto gt_layout_tokens = encode_layout(layout_of(scene));
        TokenSeq und = build_sequence(Direction::Und, img, gt_layout_tokens);
        {
            forward_into(policy, und.ids, tr);
            LogitGrads lg;
            nll_u[static_cast<size_t>(i)] = ce_nll_sum(policy, tr, und, &lg);
            for (auto& x : lg.grad.v) x /= static_cast<double>(total_u);
            backward(policy, tr, {lg}, g);
        }

        std::vector<int> cond_tokens = gt_layout_tokens;
        if (use_predicted) {
            const GridImage raster = rasterize(scene);
            cond_tokens = encode_layout(predict_layout_greedy(policy, raster));
        }
        gen_prompt_layouts[static_cast<size_t>(i)] = cond_tokens;
        TokenSeq gen = build_sequence(Direction::Gen, img, cond_tokens);
        {
            forward_into(policy, gen.ids, tr);
            LogitGrads lg;
            nll_g[static_cast<size_t>(i)] = ce_nll_sum(policy, tr, gen, &lg);
            for (auto& x : lg.grad.v) x /= static_cast<double>(total_g);
            backward(policy, tr, {lg}, g);
        }
    });

    Params total = zeros_like(policy);
    for (int b = 0; b < n_blocks; ++b) {
        std::vector<const Tensor*> src;
        grads[static_cast<size_t>(b)].for_each(
            [&](const std::string&, const Tensor& t) { src.push_back(&t); });
        size_t k = 0;
        total.for_each([&](const std::string&, Tensor& t) {
            const Tensor& s = *src[k++];
            for (size_t j = 0; j < t.v.size(); ++j) t.v[j] += s.v[j];
        });
    }

    SftLosses losses;
    for (int i = 0; i < n; ++i) {
        losses.l_und += nll_u[static_cast<size_t>(i)];
        losses.l_gen += nll_g[static_cast<size_t>(i)];
    }
    losses.l_und /= static_cast<double>(total_u);
    losses.l_gen /= static_cast<double>(total_g);
    if (!std::isfinite(losses.l_und) || !std::isfinite(losses.l_gen))
        throw std::runtime_error("sft: non-finite loss at step " + std::to_string(step));

    AdamConfig adam;
    adam.lr = cfg.lr;
    adam_step(policy, total, opt, adam, GroupSet::all());

    if (observer) {
        SftStepInfo info;
        info.step = step;
        info.used_predicted = use_predicted;
        info.gen_prompt_layout_tokens = std::move(gen_prompt_layouts);
        observer(info);
    }
    return losses;
}

Policy run_sft(const std::vector<Scene>& dataset, const SftConfig& cfg, const ModelConfig& mcfg,
               MetricsWriter* metrics, const std::string& checkpoint_path) {
    if (dataset.empty()) throw std::runtime_error("run_sft: empty dataset");
    if (cfg.steps <= 0 || cfg.warmup_gt > cfg.steps)
        throw std::runtime_error("run_sft: bad schedule (steps > 0, warmup <= steps)");

    Policy policy = init_policy(mcfg, cfg.seed);
    OptimState opt = make_optim_state(policy);
    Rng shuffle_rng(mix_seed(cfg.seed, 0x73687566ULL));

    std::vector<size_t> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size();  // trigger shuffle on first use

    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<Scene> batch;
        batch.reserve(static_cast<size_t>(cfg.batch));
        for (int b = 0; b < cfg.batch; ++b) {
            if (cursor == order.size()) {
                for (size_t i = order.size(); i > 1; --i) {
                    const size_t j = static_cast<size_t>(
                        shuffle_rng.uniform_int(0, static_cast<int>(i) - 1));
                    std::swap(order[i - 1], order[j]);
                }
                cursor = 0;
            }
            batch.push_back(dataset[order[cursor++]]);
        }
        const SftLosses losses = sft_step(policy, opt, batch, cfg, step);
        if (metrics &&
            (step % cfg.metrics_interval == 0 || step == 1 || step == cfg.steps)) {
            metrics->write({{"phase", "sft"},
                            {"step", step},
                            {"seed", cfg.seed},
                            {"l_und", losses.l_und},
                            {"l_gen", losses.l_gen},
                            {"l_sft", losses.l_sft()}});
        }
        if (!checkpoint_path.empty() && cfg.checkpoint_interval > 0 &&
            step % cfg.checkpoint_interval == 0 && step != cfg.steps) {
            save_checkpoint(policy, nullptr, checkpoint_path + ".step" + std::to_string(step));
        }
    }
    if (!checkpoint_path.empty()) save_checkpoint(policy, nullptr, checkpoint_path);
    return policy;
}

}  // namespace cycgrid
