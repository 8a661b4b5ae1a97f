#include "cycgrid/cycle_grpo.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cycgrid/eval.hpp"

namespace cycgrid {

const char* to_string(RlMode m) {
    switch (m) {
        case RlMode::Cycle: return "cycle";
        case RlMode::NoCycle: return "no-cycle";
        case RlMode::UndOnly: return "und-only";
        case RlMode::GenOnly: return "gen-only";
    }
    return "cycle";
}

const char* to_string(RlDirection d) {
    return d == RlDirection::UndToGen ? "und_to_gen" : "gen_to_und";
}

RlMode rl_mode_from_string(const std::string& s) {
    if (s == "cycle") return RlMode::Cycle;
    if (s == "no-cycle") return RlMode::NoCycle;
    if (s == "und-only") return RlMode::UndOnly;
    if (s == "gen-only") return RlMode::GenOnly;
    throw std::runtime_error("unknown rl mode: " + s + " (expected cycle|no-cycle|und-only|gen-only)");
}

void GrpoConfig::validate() const {
    if (group_size < 2) throw std::runtime_error("grpo config: group_size must be >= 2");
    if (clip_eps <= 0.0 || clip_eps >= 1.0)
        throw std::runtime_error("grpo config: clip_eps must lie in (0,1)");
    if (kl_beta < 0.0) throw std::runtime_error("grpo config: kl_beta must be >= 0");
    if (inner_epochs < 1) throw std::runtime_error("grpo config: inner_epochs must be >= 1");
    if (temperature <= 0.0) throw std::runtime_error("grpo config: temperature must be > 0");
    if (steps <= 0) throw std::runtime_error("grpo config: steps must be > 0");
    if (interleave_und < 0 || interleave_gen < 0 || interleave_und + interleave_gen == 0)
        throw std::runtime_error("grpo config: interleave ratio must be positive");
    if (weights.lambda_iou < 0 || weights.lambda_clip < 0 || weights.lambda_hps < 0)
        throw std::runtime_error("grpo config: reward weights must be >= 0");
}

std::vector<double> advantages(const std::vector<double>& rewards, double adv_eps) {
    const size_t g = rewards.size();
    if (g < 2) throw std::runtime_error("advantages: need a group of at least 2");
    double mean = 0.0;
    for (double r : rewards) {
        if (!std::isfinite(r)) throw std::runtime_error("advantages: non-finite reward");
        mean += r;
    }
    mean /= static_cast<double>(g);
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= static_cast<double>(g);  // population variance
    const double denom = std::sqrt(var) + adv_eps;
    std::vector<double> a(g);
    for (size_t i = 0; i < g; ++i) a[i] = (rewards[i] - mean) / denom;
    return a;
}

GrpoLossOut grpo_loss_and_grads(const Tensor& new_logits, const std::vector<GrpoTokenRef>& tokens,
                                int n_candidates, const std::vector<double>& adv,
                                const std::vector<double>& rewards, const GrpoConfig& cfg,
                                Tensor* dlogits) {
    const size_t nt = tokens.size();
    if (static_cast<size_t>(new_logits.rows()) != nt)
        throw std::runtime_error("grpo_loss: logits/token count mismatch");
    if (dlogits) *dlogits = Tensor(static_cast<int>(nt), tok::VOCAB);

    // restricted log-probs under the updated policy, one row per token
    Tensor logp_new(static_cast<int>(nt), tok::VOCAB);
    for (size_t e = 0; e < nt; ++e) {
        const auto& t = tokens[e];
        if (!(*t.mask)[static_cast<size_t>(t.chosen)])
            throw std::runtime_error("grpo_loss: support mismatch, chosen token outside mask");
        restricted_log_softmax(new_logits.row(static_cast<int>(e)), *t.mask, cfg.temperature,
                               logp_new.row(static_cast<int>(e)));
    }

    std::vector<int> cand_len(static_cast<size_t>(n_candidates), 0);
    for (const auto& t : tokens) ++cand_len[static_cast<size_t>(t.candidate)];

    // per-token gradient factor on logπ(chosen)
    std::vector<double> chosen_factor(nt, 0.0);
    double surrogate = 0.0;

    const double inv_nt = 1.0 / static_cast<double>(nt);
    if (cfg.loss_mode == GrpoConfig::LossMode::ReinforceBaseline) {
        double b = 0.0;
        if (cfg.baseline == GrpoConfig::Baseline::GroupMean) {
            for (double r : rewards) b += r;
            b /= static_cast<double>(rewards.size());
        }
        double loss = 0.0;
        for (size_t e = 0; e < nt; ++e) {
            const auto& t = tokens[e];
            const double w = rewards[static_cast<size_t>(t.candidate)] - b;
            const double lp = logp_new.row(static_cast<int>(e))[t.chosen];
            loss -= lp * w /
                    (static_cast<double>(n_candidates) * cand_len[static_cast<size_t>(t.candidate)]);
            chosen_factor[e] = -w / (static_cast<double>(n_candidates) *
                                     cand_len[static_cast<size_t>(t.candidate)]);
        }
        if (dlogits) {
            for (size_t e = 0; e < nt; ++e) {
                const auto& t = tokens[e];
                const double* lp = logp_new.row(static_cast<int>(e));
                double* g = dlogits->row(static_cast<int>(e));
                for (int j = 0; j < tok::VOCAB; ++j) {
                    if (!(*t.mask)[static_cast<size_t>(j)]) continue;
                    const double p = std::exp(lp[j]);
                    g[j] = chosen_factor[e] * (((j == t.chosen) ? 1.0 : 0.0) - p) /
                           cfg.temperature;
                }
            }
        }
        return {loss, 0.0};
    }

    if (cfg.ratio_mode == GrpoConfig::RatioMode::Token) {
        for (size_t e = 0; e < nt; ++e) {
            const auto& t = tokens[e];
            const double a = adv[static_cast<size_t>(t.candidate)];
            const double rho = std::exp(logp_new.row(static_cast<int>(e))[t.chosen] - t.logp_old);
            const double clipped = std::clamp(rho, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
            const double u = rho * a;
            const double c = clipped * a;
            surrogate += std::min(u, c);
            if (u <= c) chosen_factor[e] = -a * rho * inv_nt;  // unclipped branch active
        }
        surrogate *= inv_nt;
    } else {  // sequence-level ratio, kept for study
        std::vector<double> s_new(static_cast<size_t>(n_candidates), 0.0),
            s_old(static_cast<size_t>(n_candidates), 0.0);
        for (size_t e = 0; e < nt; ++e) {
            const auto& t = tokens[e];
            s_new[static_cast<size_t>(t.candidate)] += logp_new.row(static_cast<int>(e))[t.chosen];
            s_old[static_cast<size_t>(t.candidate)] += t.logp_old;
        }
        std::vector<double> factor(static_cast<size_t>(n_candidates), 0.0);
        for (int i = 0; i < n_candidates; ++i) {
            const double a = adv[static_cast<size_t>(i)];
            const double rho = std::exp(s_new[static_cast<size_t>(i)] - s_old[static_cast<size_t>(i)]);
            const double clipped = std::clamp(rho, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
            const double u = rho * a;
            const double c = clipped * a;
            surrogate += std::min(u, c);
            if (u <= c) factor[static_cast<size_t>(i)] = -a * rho / n_candidates;
        }
        surrogate /= n_candidates;
        for (size_t e = 0; e < nt; ++e)
            chosen_factor[e] = factor[static_cast<size_t>(tokens[e].candidate)];
    }

    // exact per-token KL(π_new ‖ π_ref) over the restricted support
    double kl_sum = 0.0;
    std::vector<double> kl_tok(nt, 0.0);
    if (cfg.kl_beta != 0.0 || dlogits == nullptr) {
        for (size_t e = 0; e < nt; ++e) {
            const auto& t = tokens[e];
            const double* lp = logp_new.row(static_cast<int>(e));
            double kl = 0.0;
            for (int j = 0; j < tok::VOCAB; ++j) {
                if (!(*t.mask)[static_cast<size_t>(j)]) continue;
                const double p = std::exp(lp[j]);
                kl += p * (lp[j] - t.ref_logp[j]);
            }
            kl_tok[e] = kl;
            kl_sum += kl;
        }
    }
    const double kl_mean = kl_sum * inv_nt;
    const double loss = -surrogate + cfg.kl_beta * kl_mean;

    if (dlogits) {
        for (size_t e = 0; e < nt; ++e) {
            const auto& t = tokens[e];
            const double* lp = logp_new.row(static_cast<int>(e));
            double* g = dlogits->row(static_cast<int>(e));
            for (int j = 0; j < tok::VOCAB; ++j) {
                if (!(*t.mask)[static_cast<size_t>(j)]) continue;
                const double p = std::exp(lp[j]);
                double dz = chosen_factor[e] * (((j == t.chosen) ? 1.0 : 0.0) - p);
                if (cfg.kl_beta != 0.0)
                    dz += cfg.kl_beta * inv_nt * p * (lp[j] - t.ref_logp[j] - kl_tok[e]);
                g[j] = dz / cfg.temperature;
            }
        }
    }
    return {loss, kl_mean};
}

namespace {

std::vector<int> und_prompt(const GridImage& img) {
    std::vector<int> p;
    p.reserve(2 + kImageTokens + 1);
    p.push_back(tok::BOS);
    p.push_back(tok::TASK_UND);
    const auto t = encode_image(img);
    p.insert(p.end(), t.begin(), t.end());
    p.push_back(tok::SEP);
    return p;
}

std::vector<int> gen_prompt(const Layout& layout) {
    std::vector<int> p;
    const auto t = encode_layout(layout);
    p.reserve(2 + t.size() + 1);
    p.push_back(tok::BOS);
    p.push_back(tok::TASK_GEN);
    p.insert(p.end(), t.begin(), t.end());
    p.push_back(tok::SEP);
    return p;
}

GridImage greedy_generate(const Policy& policy, const Layout& layout) {
    RolloutTrajectory traj =
        rollout(policy, gen_prompt(layout), GrammarState::image_start(), 1.0, nullptr);
    traj.tokens.pop_back();
    return decode_image(traj.tokens);
}

Layout greedy_parse(const Policy& policy, const GridImage& img) {
    RolloutTrajectory traj =
        rollout(policy, und_prompt(img), GrammarState::layout_start(), 1.0, nullptr);
    traj.tokens.pop_back();
    return decode_layout(traj.tokens, DecodeMode::Strict);
}

// re-derives the grammar masks for a sampled output and verifies they match
// the ones recorded at sampling time
void check_support(const RolloutTrajectory& traj, GrammarState g) {
    for (size_t k = 0; k < traj.tokens.size(); ++k) {
        if (g.allowed() != traj.masks[k])
            throw std::runtime_error("rollout support mismatch at token " + std::to_string(k));
        g.advance(traj.tokens[k]);
    }
}

// fills candidate.ref_logp from a single reference-policy forward
void compute_ref_logp(const Policy& ref, const std::vector<int>& prompt, Candidate& cand,
                      double temperature) {
    std::vector<int> ids = prompt;
    ids.insert(ids.end(), cand.traj.tokens.begin(), cand.traj.tokens.end());
    thread_local Trace scratch;
    forward_into(ref, ids, scratch);
    const Trace& tr = scratch;
    const int p0 = static_cast<int>(prompt.size()) - 1;
    std::vector<int> positions(cand.traj.tokens.size());
    for (size_t k = 0; k < positions.size(); ++k) positions[k] = p0 + static_cast<int>(k);
    const Tensor logits = head_logits(ref, tr, positions, cand.traj.head);
    cand.ref_logp.resize(cand.traj.tokens.size());
    for (size_t k = 0; k < cand.traj.tokens.size(); ++k) {
        cand.ref_logp[k].resize(tok::VOCAB);
        restricted_log_softmax(logits.row(static_cast<int>(k)), cand.traj.masks[k], temperature,
                               cand.ref_logp[k].data());
    }
}

// μ epochs of clipped/reinforce updates on the given parameter groups
RlStepMetrics update_from_group(Policy& policy, OptimState& opt, const RolloutGroup& group,
                                const GrpoConfig& cfg, GroupSet groups) {
    RlStepMetrics out;
    out.direction = group.direction;

    std::vector<double> rewards;
    for (const auto& c : group.candidates) {
        rewards.push_back(c.reward.total);
        out.rewards.push_back(c.reward);
    }
    out.adv = advantages(rewards, cfg.adv_eps);
    out.degenerate = true;
    for (double a : out.adv)
        if (a != 0.0) out.degenerate = false;

    const int g = static_cast<int>(group.candidates.size());
    const int p0 = static_cast<int>(group.prompt.size()) - 1;

    for (int epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
        // new-policy traces and stacked logits, candidates in index order
        std::vector<Trace> traces(static_cast<size_t>(g));
        std::vector<Tensor> cand_logits(static_cast<size_t>(g));
        parallel_for(g, cfg.threads, [&](int i) {
            const auto& cand = group.candidates[static_cast<size_t>(i)];
            std::vector<int> ids = group.prompt;
            ids.insert(ids.end(), cand.traj.tokens.begin(), cand.traj.tokens.end());
            forward_into(policy, ids, traces[static_cast<size_t>(i)]);
            std::vector<int> positions(cand.traj.tokens.size());
            for (size_t k = 0; k < positions.size(); ++k)
                positions[k] = p0 + static_cast<int>(k);
            cand_logits[static_cast<size_t>(i)] =
                head_logits(policy, traces[static_cast<size_t>(i)], positions, cand.traj.head);
        });

        std::vector<GrpoTokenRef> tokens;
        size_t nt = 0;
        for (const auto& c : group.candidates) nt += c.traj.tokens.size();
        tokens.reserve(nt);
        Tensor new_logits(static_cast<int>(nt), tok::VOCAB);
        size_t row = 0;
        for (int i = 0; i < g; ++i) {
            const auto& cand = group.candidates[static_cast<size_t>(i)];
            for (size_t k = 0; k < cand.traj.tokens.size(); ++k) {
                GrpoTokenRef ref;
                ref.candidate = i;
                ref.chosen = cand.traj.tokens[k];
                ref.logp_old = cand.traj.logp[k];
                ref.mask = &cand.traj.masks[k];
                ref.ref_logp = cand.ref_logp[k].data();
                tokens.push_back(ref);
                std::copy(cand_logits[static_cast<size_t>(i)].row(static_cast<int>(k)),
                          cand_logits[static_cast<size_t>(i)].row(static_cast<int>(k)) + tok::VOCAB,
                          new_logits.row(static_cast<int>(row)));
                ++row;
            }
        }

        Tensor dlogits;
        const GrpoLossOut lo = grpo_loss_and_grads(new_logits, tokens, g, out.adv, rewards, cfg,
                                                   &dlogits);

        // scatter dlogits back per candidate and run backward; per-block
        // accumulators keep the reduction deterministic
        const int n_blocks = parallel_num_blocks(g, cfg.threads);
        std::vector<Params> grads(static_cast<size_t>(n_blocks));
        for (auto& gb : grads) gb = zeros_like(policy);
        std::vector<size_t> row_base(static_cast<size_t>(g) + 1, 0);
        for (int i = 0; i < g; ++i)
            row_base[static_cast<size_t>(i) + 1] =
                row_base[static_cast<size_t>(i)] +
                group.candidates[static_cast<size_t>(i)].traj.tokens.size();
        parallel_for(g, cfg.threads, [&](int i) {
            const auto& cand = group.candidates[static_cast<size_t>(i)];
            LogitGrads lg;
            lg.head = cand.traj.head;
            const size_t len = cand.traj.tokens.size();
            lg.positions.resize(len);
            lg.grad = Tensor(static_cast<int>(len), tok::VOCAB);
            for (size_t k = 0; k < len; ++k) {
                lg.positions[k] = p0 + static_cast<int>(k);
                std::copy(dlogits.row(static_cast<int>(row_base[static_cast<size_t>(i)] + k)),
                          dlogits.row(static_cast<int>(row_base[static_cast<size_t>(i)] + k)) +
                              tok::VOCAB,
                          lg.grad.row(static_cast<int>(k)));
            }
            backward(policy, traces[static_cast<size_t>(i)], {lg},
                     grads[static_cast<size_t>(parallel_block_of(i, g, cfg.threads))]);
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

        if (epoch == 0) {
            out.loss = lo.loss;
            out.kl = lo.kl;
            out.grad_norm = grad_norm(total);
        }
        AdamConfig adam;
        adam.lr = cfg.lr;
        adam_step(policy, total, opt, adam, groups);
    }
    return out;
}

}  // namespace

RlStepMetrics step_und_to_gen(Policy& policy, const Policy& ref, OptimState& opt,
                              const Scene& scene, const GrpoConfig& cfg, RlMode mode,
                              uint64_t step_seed) {
    const GridImage i_gt = rasterize(scene);
    const Layout l_gt = layout_of(scene);

    RolloutGroup group;
    group.direction = RlDirection::UndToGen;
    group.prompt = und_prompt(i_gt);
    group.candidates.resize(static_cast<size_t>(cfg.group_size));

    parallel_for(cfg.group_size, cfg.threads, [&](int i) {
        Candidate& cand = group.candidates[static_cast<size_t>(i)];
        Rng rng(mix_seed(step_seed, static_cast<uint64_t>(i)));
        cand.traj = rollout(policy, group.prompt, GrammarState::layout_start(), cfg.temperature,
                            &rng);
        check_support(cand.traj, GrammarState::layout_start());

        std::vector<int> body = cand.traj.tokens;
        body.pop_back();
        const Layout l_pred = decode_layout(body, DecodeMode::Strict);

        if (mode == RlMode::NoCycle) {
            // direct geometric reward only; the inner generation leg is dropped
            cand.reward.iou = match_layouts(l_pred, l_gt).mean_iou;
            cand.reward.total = cfg.weights.lambda_iou * cand.reward.iou;
        } else {
            const GridImage i_pred = greedy_generate(policy, l_pred);
            cand.reward = reward_r1(l_pred, l_gt, i_pred, i_gt, cfg.weights);
        }
        compute_ref_logp(ref, group.prompt, cand, cfg.temperature);
    });

    return update_from_group(policy, opt, group, cfg, GroupSet::und_direction());
}

RlStepMetrics step_gen_to_und(Policy& policy, const Policy& ref, OptimState& opt,
                              const Scene& scene, const GrpoConfig& cfg, RlMode mode,
                              uint64_t step_seed) {
    const Layout l_gt = layout_of(scene);

    RolloutGroup group;
    group.direction = RlDirection::GenToUnd;
    group.prompt = gen_prompt(l_gt);
    group.candidates.resize(static_cast<size_t>(cfg.group_size));

    parallel_for(cfg.group_size, cfg.threads, [&](int i) {
        Candidate& cand = group.candidates[static_cast<size_t>(i)];
        Rng rng(mix_seed(step_seed, 0x100 + static_cast<uint64_t>(i)));
        cand.traj = rollout(policy, group.prompt, GrammarState::image_start(), cfg.temperature,
                            &rng);
        check_support(cand.traj, GrammarState::image_start());

        std::vector<int> body = cand.traj.tokens;
        body.pop_back();
        const GridImage i_pred = decode_image(body);

        if (mode == RlMode::NoCycle) {
            // perceptual reward only; the self-introspection parse is dropped
            cand.reward.iou = 0.0;
            cand.reward.hps_proxy = hps_proxy(i_pred);
            cand.reward.total = cfg.weights.lambda_hps * *cand.reward.hps_proxy;
        } else {
            const Layout l_parsed = greedy_parse(policy, i_pred);
            cand.reward = reward_r2(l_parsed, l_gt, i_pred, cfg.weights);
        }
        compute_ref_logp(ref, group.prompt, cand, cfg.temperature);
    });

    return update_from_group(policy, opt, group, cfg, GroupSet::gen_direction());
}

namespace {

nlohmann::json reward_json(const RewardBreakdown& r) {
    nlohmann::json j{{"iou", r.iou}, {"total", r.total}};
    if (r.clip_proxy) j["clip"] = *r.clip_proxy;
    if (r.hps_proxy) j["hps"] = *r.hps_proxy;
    return j;
}

}  // namespace

Policy train_rl(const Policy& sft_policy, const std::vector<Scene>& dataset, const GrpoConfig& cfg,
                RlMode mode, MetricsWriter* metrics) {
    cfg.validate();
    if (dataset.empty()) throw std::runtime_error("train_rl: empty dataset");

    Policy policy = sft_policy;
    const Policy ref = sft_policy;  // frozen for the whole phase
    OptimState opt = make_optim_state(policy);

    Rng sched(mix_seed(cfg.seed, 0x726c736368ULL));
    std::vector<size_t> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size();

    const int cycle_len = cfg.interleave_und + cfg.interleave_gen;
    for (int step = 1; step <= cfg.steps; ++step) {
        if (cursor == order.size()) {
            for (size_t i = order.size(); i > 1; --i) {
                const size_t j =
                    static_cast<size_t>(sched.uniform_int(0, static_cast<int>(i) - 1));
                std::swap(order[i - 1], order[j]);
            }
            cursor = 0;
        }
        const Scene& scene = dataset[order[cursor++]];

        RlDirection dir;
        switch (mode) {
            case RlMode::UndOnly: dir = RlDirection::UndToGen; break;
            case RlMode::GenOnly: dir = RlDirection::GenToUnd; break;
            default:
                dir = ((step - 1) % cycle_len) < cfg.interleave_und ? RlDirection::UndToGen
                                                                    : RlDirection::GenToUnd;
        }

        const uint64_t step_seed = mix_seed(cfg.seed, 0xabcdULL + static_cast<uint64_t>(step));
        const RlStepMetrics m =
            dir == RlDirection::UndToGen
                ? step_und_to_gen(policy, ref, opt, scene, cfg, mode, step_seed)
                : step_gen_to_und(policy, ref, opt, scene, cfg, mode, step_seed);

        if (metrics) {
            nlohmann::json rewards = nlohmann::json::array();
            for (const auto& r : m.rewards) rewards.push_back(reward_json(r));
            metrics->write({{"phase", "rl"},
                            {"step", step},
                            {"seed", cfg.seed},
                            {"direction", to_string(m.direction)},
                            {"mode", to_string(mode)},
                            {"scene_id", scene.id},
                            {"rewards", rewards},
                            {"advantages", m.adv},
                            {"loss", m.loss},
                            {"kl", m.kl},
                            {"grad_norm", m.grad_norm},
                            {"degenerate", m.degenerate}});
        }

        if (cfg.eval_interval > 0 && step % cfg.eval_interval == 0 && metrics) {
            try {
                std::vector<Scene> subset(
                    dataset.begin(),
                    dataset.begin() + std::min(dataset.size(),
                                               static_cast<size_t>(cfg.eval_subset)));
                const EvalReport rep = evaluate(policy_und_fn(policy), policy_gen_fn(policy),
                                                subset, cfg.weights, cfg.threads);
                metrics->write({{"phase", "rl_eval"},
                                {"step", step},
                                {"seed", cfg.seed},
                                {"mean_r1", rep.pooled.cycle.mean_r1},
                                {"mean_r2", rep.pooled.cycle.mean_r2}});
            } catch (const std::exception& e) {
                metrics->write({{"phase", "rl_eval"},
                                {"step", step},
                                {"seed", cfg.seed},
                                {"error", e.what()}});
            }
        }
    }
    return policy;
}

}  // namespace cycgrid
