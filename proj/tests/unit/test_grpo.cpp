#include <doctest.h>

#include <cmath>

#include "cycgrid/cycle_grpo.hpp"
#include "cycgrid/rng.hpp"

using namespace cycgrid;

namespace {

// synthetic token batch over hand-built restricted distributions; no model
struct FakeGroup {
    std::vector<TokenMask> masks;
    std::vector<std::vector<double>> ref_logp;
    std::vector<GrpoTokenRef> tokens;
    Tensor old_logits, new_logits;
    std::vector<double> logp_old_store;

    // masks/choices from rng; old/new logits differ by `drift`
    FakeGroup(Rng& rng, int n_candidates, int tokens_per_candidate, double drift,
              double temperature) {
        const int nt = n_candidates * tokens_per_candidate;
        old_logits = Tensor(nt, tok::VOCAB);
        new_logits = Tensor(nt, tok::VOCAB);
        masks.resize(static_cast<size_t>(nt));
        ref_logp.resize(static_cast<size_t>(nt));
        logp_old_store.resize(static_cast<size_t>(nt));

        for (int e = 0; e < nt; ++e) {
            TokenMask& m = masks[static_cast<size_t>(e)];
            int allowed = 0;
            for (int j = 0; j < tok::VOCAB; ++j) {
                old_logits.at(e, j) = rng.gauss();
                new_logits.at(e, j) = old_logits.at(e, j) + drift * rng.gauss();
                m[static_cast<size_t>(j)] = rng.uniform01() < 0.3;
                allowed += m[static_cast<size_t>(j)];
            }
            if (allowed == 0) m[static_cast<size_t>(rng.uniform_int(0, tok::VOCAB - 1))] = true;
        }
        for (int e = 0; e < nt; ++e) {
            double old_lp[tok::VOCAB];
            restricted_log_softmax(old_logits.row(e), masks[static_cast<size_t>(e)], temperature,
                                   old_lp);
            std::vector<int> allowed_ids;
            for (int j = 0; j < tok::VOCAB; ++j)
                if (masks[static_cast<size_t>(e)][static_cast<size_t>(j)]) allowed_ids.push_back(j);
            const int chosen = allowed_ids[static_cast<size_t>(
                rng.uniform_int(0, static_cast<int>(allowed_ids.size()) - 1))];
            logp_old_store[static_cast<size_t>(e)] = old_lp[chosen];

            ref_logp[static_cast<size_t>(e)].resize(tok::VOCAB);
            // reference = old policy here; tests that need a distinct ref perturb this
            std::copy(old_lp, old_lp + tok::VOCAB, ref_logp[static_cast<size_t>(e)].begin());

            GrpoTokenRef t;
            t.candidate = e / tokens_per_candidate;
            t.chosen = chosen;
            t.logp_old = logp_old_store[static_cast<size_t>(e)];
            t.mask = &masks[static_cast<size_t>(e)];
            t.ref_logp = ref_logp[static_cast<size_t>(e)].data();
            tokens.push_back(t);
        }
    }
};

GrpoConfig base_cfg() {
    GrpoConfig c;
    c.group_size = 4;
    c.clip_eps = 0.2;
    c.kl_beta = 0.01;
    c.temperature = 1.0;
    return c;
}

}  // namespace

TEST_CASE("advantages normalize to mean zero and unit population variance") {
    CHECK(advantages({1, 1, 1, 1}, 1e-8) == std::vector<double>{0, 0, 0, 0});

    const auto two = advantages({0, 2}, 1e-8);
    CHECK(std::abs(two[0] + 1.0) <= 1e-8);
    CHECK(std::abs(two[1] - 1.0) <= 1e-8);

    Rng rng(7);
    for (int rep = 0; rep < 1000; ++rep) {
        const int g = rep % 3 == 0 ? 2 : (rep % 3 == 1 ? 4 : 8);
        std::vector<double> r(static_cast<size_t>(g));
        for (auto& x : r) x = rng.uniform01() * 3.0;
        bool degenerate = true;
        for (double x : r) degenerate = degenerate && x == r[0];
        if (degenerate) continue;
        const auto a = advantages(r, 0.0);  // exact law with zero epsilon
        double mean = 0.0, var = 0.0;
        for (double x : a) mean += x;
        mean /= g;
        for (double x : a) var += x * x;
        var /= g;
        CHECK(std::abs(mean) <= 1e-9);
        CHECK(std::abs(var - 1.0) <= 1e-9);
    }

    CHECK_THROWS(advantages({1.0}, 1e-8));
}

TEST_CASE("snapshot case: identical policies and equal lengths give zero loss") {
    Rng rng(11);
    GrpoConfig cfg = base_cfg();
    cfg.kl_beta = 0.0;
    FakeGroup fg(rng, 4, 6, 0.0, cfg.temperature);  // new == old
    const std::vector<double> rewards = {0.3, 1.7, 0.9, 1.1};
    const auto adv = advantages(rewards, cfg.adv_eps);

    Tensor dlogits;
    const GrpoLossOut out =
        grpo_loss_and_grads(fg.new_logits, fg.tokens, 4, adv, rewards, cfg, &dlogits);
    CHECK(std::abs(out.loss) <= 1e-12);
    CHECK(out.kl == 0.0);
}

TEST_CASE("degenerate rewards with zero beta give an exactly zero gradient") {
    Rng rng(13);
    GrpoConfig cfg = base_cfg();
    cfg.kl_beta = 0.0;
    FakeGroup fg(rng, 4, 5, 0.3, cfg.temperature);
    const std::vector<double> rewards = {1.0, 1.0, 1.0, 1.0};
    const auto adv = advantages(rewards, cfg.adv_eps);

    Tensor dlogits;
    grpo_loss_and_grads(fg.new_logits, fg.tokens, 4, adv, rewards, cfg, &dlogits);
    double norm = 0.0;
    for (double x : dlogits.v) norm += x * x;
    CHECK(std::sqrt(norm) < 1e-12);
}

TEST_CASE("clip identity: in-band ratios reproduce the unclipped surrogate bit-for-bit") {
    Rng rng(17);
    for (int rep = 0; rep < 50; ++rep) {
        GrpoConfig cfg = base_cfg();
        cfg.kl_beta = 0.0;
        FakeGroup fg(rng, 4, 4, 0.01, cfg.temperature);  // tiny drift keeps ratios in band
        std::vector<double> rewards = {0.2, 0.8, 1.4, 0.6};
        const auto adv = advantages(rewards, cfg.adv_eps);

        // verify the in-band precondition, computing ratios independently
        bool in_band = true;
        std::vector<double> rho(fg.tokens.size());
        for (size_t e = 0; e < fg.tokens.size(); ++e) {
            double lp[tok::VOCAB];
            restricted_log_softmax(fg.new_logits.row(static_cast<int>(e)), *fg.tokens[e].mask,
                                   cfg.temperature, lp);
            rho[e] = std::exp(lp[fg.tokens[e].chosen] - fg.tokens[e].logp_old);
            in_band = in_band && rho[e] >= 1.0 - cfg.clip_eps && rho[e] <= 1.0 + cfg.clip_eps;
        }
        REQUIRE(in_band);

        const GrpoLossOut clipped =
            grpo_loss_and_grads(fg.new_logits, fg.tokens, 4, adv, rewards, cfg, nullptr);

        // unclipped surrogate with the same accumulation order
        double surr = 0.0;
        for (size_t e = 0; e < fg.tokens.size(); ++e)
            surr += rho[e] * adv[static_cast<size_t>(fg.tokens[e].candidate)];
        surr /= static_cast<double>(fg.tokens.size());
        CHECK(clipped.loss == -surr);
    }
}

TEST_CASE("out-of-band ratios move the loss in the clipping direction") {
    Rng rng(19);
    GrpoConfig cfg = base_cfg();
    cfg.kl_beta = 0.0;
    FakeGroup fg(rng, 2, 3, 0.0, cfg.temperature);
    // push the new policy towards the chosen tokens so every ratio > 1+eps
    for (size_t e = 0; e < fg.tokens.size(); ++e)
        fg.new_logits.at(static_cast<int>(e), fg.tokens[e].chosen) += 3.0;

    const std::vector<double> rewards = {2.0, 0.0};
    const auto adv = advantages(rewards, cfg.adv_eps);

    const GrpoLossOut clipped =
        grpo_loss_and_grads(fg.new_logits, fg.tokens, 2, adv, rewards, cfg, nullptr);

    double unclipped = 0.0;
    for (size_t e = 0; e < fg.tokens.size(); ++e) {
        double lp[tok::VOCAB];
        restricted_log_softmax(fg.new_logits.row(static_cast<int>(e)), *fg.tokens[e].mask,
                               cfg.temperature, lp);
        const double rho = std::exp(lp[fg.tokens[e].chosen] - fg.tokens[e].logp_old);
        CHECK(rho > 1.0 + cfg.clip_eps);
        unclipped += rho * adv[static_cast<size_t>(fg.tokens[e].candidate)];
    }
    unclipped /= static_cast<double>(fg.tokens.size());
    // clipping caps the positive-advantage gain, so the clipped loss is larger
    CHECK(clipped.loss > -unclipped);
}

TEST_CASE("KL of identical distributions is exactly zero, and never negative") {
    Rng rng(23);
    GrpoConfig cfg = base_cfg();
    cfg.kl_beta = 1.0;
    {
        FakeGroup fg(rng, 4, 4, 0.0, cfg.temperature);  // ref == new == old
        const std::vector<double> rewards = {1, 2, 3, 4};
        const GrpoLossOut out = grpo_loss_and_grads(fg.new_logits, fg.tokens, 4,
                                                    advantages(rewards, cfg.adv_eps), rewards,
                                                    cfg, nullptr);
        CHECK(out.kl == 0.0);
    }
    for (int rep = 0; rep < 1000; ++rep) {
        FakeGroup fg(rng, 2, 2, 0.8, cfg.temperature);  // ref == old, new drifted
        const std::vector<double> rewards = {1, 2};
        const GrpoLossOut out = grpo_loss_and_grads(fg.new_logits, fg.tokens, 2,
                                                    advantages(rewards, cfg.adv_eps), rewards,
                                                    cfg, nullptr);
        CHECK(out.kl >= -1e-12);
    }
}

TEST_CASE("support mismatch is a contract violation") {
    Rng rng(29);
    GrpoConfig cfg = base_cfg();
    FakeGroup fg(rng, 2, 2, 0.1, cfg.temperature);
    // corrupt one chosen token to live outside its mask
    for (int j = 0; j < tok::VOCAB; ++j)
        if (!(*fg.tokens[0].mask)[static_cast<size_t>(j)]) {
            fg.tokens[0].chosen = j;
            break;
        }
    const std::vector<double> rewards = {1, 2};
    CHECK_THROWS_WITH_AS(grpo_loss_and_grads(fg.new_logits, fg.tokens, 2,
                                             advantages(rewards, cfg.adv_eps), rewards, cfg,
                                             nullptr),
                         doctest::Contains("support"), std::runtime_error);
}

TEST_CASE("grpo_loss gradients match central differences on the logits") {
    Rng rng(31);
    for (const char* mode : {"clipped-token", "clipped-seq", "reinforce"}) {
        GrpoConfig cfg = base_cfg();
        cfg.kl_beta = 0.05;
        if (std::string(mode) == "clipped-seq") cfg.ratio_mode = GrpoConfig::RatioMode::Sequence;
        if (std::string(mode) == "reinforce") {
            cfg.loss_mode = GrpoConfig::LossMode::ReinforceBaseline;
            cfg.kl_beta = 0.0;
        }
        cfg.temperature = 0.9;

        FakeGroup fg(rng, 3, 3, 0.05, cfg.temperature);
        const std::vector<double> rewards = {0.4, 1.9, 1.0};
        const auto adv = advantages(rewards, cfg.adv_eps);

        Tensor dlogits;
        grpo_loss_and_grads(fg.new_logits, fg.tokens, 3, adv, rewards, cfg, &dlogits);

        const double h = 1e-6;
        Rng pick(rng.u64());
        for (int probe = 0; probe < 40; ++probe) {
            const int e = pick.uniform_int(0, fg.new_logits.rows() - 1);
            const int j = pick.uniform_int(0, tok::VOCAB - 1);
            if (!(*fg.tokens[static_cast<size_t>(e)].mask)[static_cast<size_t>(j)]) continue;
            Tensor plus = fg.new_logits, minus = fg.new_logits;
            plus.at(e, j) += h;
            minus.at(e, j) -= h;
            const double lp =
                grpo_loss_and_grads(plus, fg.tokens, 3, adv, rewards, cfg, nullptr).loss;
            const double lm =
                grpo_loss_and_grads(minus, fg.tokens, 3, adv, rewards, cfg, nullptr).loss;
            const double fd = (lp - lm) / (2.0 * h);
            CHECK(dlogits.at(e, j) == doctest::Approx(fd).epsilon(1e-5));
        }
    }
}

TEST_CASE("rl mode names round-trip") {
    for (RlMode m : {RlMode::Cycle, RlMode::NoCycle, RlMode::UndOnly, RlMode::GenOnly})
        CHECK(rl_mode_from_string(to_string(m)) == m);
    CHECK_THROWS(rl_mode_from_string("bogus"));
}

// ---- integration against the toy model ----

#include "cycgrid/sft.hpp"

namespace {

ModelConfig tiny_model() {
    ModelConfig c;
    c.d_model = 32;
    c.n_layers = 2;
    c.n_heads = 4;
    return c;
}

Policy seeded_policy(uint64_t seed) {
    Policy p = init_policy(tiny_model(), seed);
    Rng rng(mix_seed(seed, 0xabc));
    for (auto* t : {&p.p.head_layout_w, &p.p.head_image_w})
        for (auto& x : t->v) x = rng.gauss() * 0.05;
    return p;
}

std::vector<Scene> simple_scenes(uint64_t seed, int n) {
    WorldConfig wc;
    Rng rng(seed);
    std::vector<Scene> out;
    for (int i = 0; i < n; ++i) {
        Scene s = sample_scene(rng, Difficulty::Simple, wc);
        s.id = i;
        out.push_back(std::move(s));
    }
    return out;
}

GrpoConfig rl_cfg() {
    GrpoConfig c;
    c.group_size = 2;
    c.lr = 1e-4;
    c.threads = 2;
    c.steps = 4;
    return c;
}

}  // namespace

TEST_CASE("und-direction steps never touch the image head, and vice versa") {
    Policy policy = seeded_policy(61);
    const Policy ref = policy;
    OptimState opt = make_optim_state(policy);
    const auto scenes = simple_scenes(67, 2);
    const GrpoConfig cfg = rl_cfg();

    const Tensor gen_w = policy.p.head_image_w;
    const RlStepMetrics m1 =
        step_und_to_gen(policy, ref, opt, scenes[0], cfg, RlMode::Cycle, 1);
    CHECK(policy.p.head_image_w.v == gen_w.v);
    CHECK(m1.rewards.size() == 2);
    CHECK(m1.adv.size() == 2);
    for (const auto& r : m1.rewards) {
        CHECK(r.total >= 0.0);
        CHECK(r.total <= 2.0);  // iou + clip with unit weights
        CHECK(r.clip_proxy.has_value());
        CHECK_FALSE(r.hps_proxy.has_value());
    }

    const Tensor und_w = policy.p.head_layout_w;
    const RlStepMetrics m2 =
        step_gen_to_und(policy, ref, opt, scenes[1], cfg, RlMode::Cycle, 2);
    CHECK(policy.p.head_layout_w.v == und_w.v);
    for (const auto& r : m2.rewards) {
        CHECK(r.total >= 0.0);
        CHECK(r.total <= 3.0);  // iou + 2*hps
        CHECK(r.hps_proxy.has_value());
        CHECK_FALSE(r.clip_proxy.has_value());
    }
}

TEST_CASE("snapshot correctness: first inner epoch sees unit ratios") {
    const Policy policy = seeded_policy(71);
    const auto scenes = simple_scenes(73, 1);
    const GrpoConfig cfg = rl_cfg();

    const GridImage img = rasterize(scenes[0]);
    std::vector<int> prompt = {tok::BOS, tok::TASK_UND};
    const auto it = encode_image(img);
    prompt.insert(prompt.end(), it.begin(), it.end());
    prompt.push_back(tok::SEP);

    for (uint64_t cand = 0; cand < 4; ++cand) {
        Rng rng(mix_seed(5, cand));
        const RolloutTrajectory traj =
            rollout(policy, prompt, GrammarState::layout_start(), cfg.temperature, &rng);
        std::vector<int> ids = prompt;
        ids.insert(ids.end(), traj.tokens.begin(), traj.tokens.end());
        const Trace tr = forward(policy, ids);
        for (size_t k = 0; k < traj.tokens.size(); ++k) {
            const int pos = static_cast<int>(prompt.size()) - 1 + static_cast<int>(k);
            const Tensor logits = head_logits(policy, tr, {pos}, traj.head);
            double logp[tok::VOCAB];
            restricted_log_softmax(logits.row(0), traj.masks[k], cfg.temperature, logp);
            const double ratio = std::exp(logp[traj.tokens[k]] - traj.logp[k]);
            CHECK(std::abs(ratio - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("train_rl: interleave schedule, metrics shape, determinism") {
    const Policy sft = seeded_policy(79);
    const auto scenes = simple_scenes(83, 4);
    GrpoConfig cfg = rl_cfg();
    cfg.steps = 6;
    cfg.seed = 4;

    auto run = [&](const std::string& path, RlMode mode) {
        MetricsWriter w(path);
        train_rl(sft, scenes, cfg, mode, &w);
    };

    const std::string m1 = "/tmp/cycgrid_rl_m1.jsonl", m2 = "/tmp/cycgrid_rl_m2.jsonl";
    run(m1, RlMode::Cycle);
    run(m2, RlMode::Cycle);

    std::ifstream f1(m1), f2(m2);
    std::stringstream s1, s2;
    s1 << f1.rdbuf();
    s2 << f2.rdbuf();
    CHECK(s1.str() == s2.str());

    int und = 0, gen = 0, step = 0;
    std::istringstream lines(s1.str());
    std::string line;
    while (std::getline(lines, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.at("phase") == "rl");
        CHECK(j.at("step").get<int>() == ++step);
        CHECK(j.at("rewards").size() == 2);
        CHECK(j.at("advantages").size() == 2);
        CHECK(j.contains("loss"));
        CHECK(j.contains("kl"));
        CHECK(j.contains("grad_norm"));
        if (j.at("direction") == "und_to_gen") ++und;
        else ++gen;
    }
    CHECK(und == 3);
    CHECK(gen == 3);
    std::remove(m1.c_str());
    std::remove(m2.c_str());
}

TEST_CASE("no-cycle mode drops the cross-branch reward components") {
    const Policy sft = seeded_policy(89);
    const auto scenes = simple_scenes(97, 2);
    GrpoConfig cfg = rl_cfg();
    cfg.steps = 4;

    const std::string path = "/tmp/cycgrid_rl_nc.jsonl";
    {
        MetricsWriter w(path);
        train_rl(sft, scenes, cfg, RlMode::NoCycle, &w);
    }
    std::ifstream f(path);
    std::string line;
    while (std::getline(f, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.at("mode") == "no-cycle");
        for (const auto& r : j.at("rewards")) {
            CHECK_FALSE(r.contains("clip"));
            if (j.at("direction") == "und_to_gen") CHECK_FALSE(r.contains("hps"));
            else CHECK(r.contains("hps"));
        }
    }
    std::remove(path.c_str());
}

TEST_CASE("single-direction modes stick to their direction") {
    const Policy sft = seeded_policy(101);
    const auto scenes = simple_scenes(103, 2);
    GrpoConfig cfg = rl_cfg();
    cfg.steps = 3;

    for (auto [mode, dir] : {std::pair{RlMode::UndOnly, std::string("und_to_gen")},
                             std::pair{RlMode::GenOnly, std::string("gen_to_und")}}) {
        const std::string path = "/tmp/cycgrid_rl_one.jsonl";
        {
            MetricsWriter w(path);
            train_rl(sft, scenes, cfg, mode, &w);
        }
        std::ifstream f(path);
        std::string line;
        int n = 0;
        while (std::getline(f, line)) {
            CHECK(nlohmann::json::parse(line).at("direction") == dir);
            ++n;
        }
        CHECK(n == 3);
        std::remove(path.c_str());
    }
}
