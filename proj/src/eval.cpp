#include "cycgrid/eval.hpp"

#include <cmath>

#include "cycgrid/tokenizer.hpp"

namespace cycgrid {

namespace {

std::vector<int> und_prompt_ids(const GridImage& img) {
    std::vector<int> p{tok::BOS, tok::TASK_UND};
    const auto t = encode_image(img);
    p.insert(p.end(), t.begin(), t.end());
    p.push_back(tok::SEP);
    return p;
}

std::vector<int> gen_prompt_ids(const Layout& layout) {
    std::vector<int> p{tok::BOS, tok::TASK_GEN};
    const auto t = encode_layout(layout);
    p.insert(p.end(), t.begin(), t.end());
    p.push_back(tok::SEP);
    return p;
}

}  // namespace

UndFn policy_und_fn(const Policy& policy) {
    return [&policy](const GridImage& img) {
        RolloutTrajectory traj =
            rollout(policy, und_prompt_ids(img), GrammarState::layout_start(), 1.0, nullptr);
        traj.tokens.pop_back();
        return decode_layout(traj.tokens, DecodeMode::Strict);
    };
}

GenFn policy_gen_fn(const Policy& policy) {
    return [&policy](const Layout& layout) {
        RolloutTrajectory traj =
            rollout(policy, gen_prompt_ids(layout), GrammarState::image_start(), 1.0, nullptr);
        traj.tokens.pop_back();
        return decode_image(traj.tokens);
    };
}

UndFn oracle_und_fn() {
    return [](const GridImage& img) { return oracle_parse(img); };
}

GenFn rasterize_gen_fn() {
    return [](const Layout& layout) {
        Scene s;
        s.boxes = layout.instances;
        return rasterize(s);
    };
}

UndFn empty_layout_und_fn() {
    return [](const GridImage&) { return Layout{}; };
}

GenFn background_gen_fn() {
    return [](const Layout&) { return GridImage{}; };
}

namespace {

// mean over classes present in either image of per-class cell IoU, optionally
// restricted to a cell subset
double class_pixel_iou(const GridImage& pred, const GridImage& gt,
                       const std::array<bool, kGrid * kGrid>* cells) {
    std::array<int, kNumClasses + 1> inter{}, uni{};
    for (size_t i = 0; i < pred.cells.size(); ++i) {
        if (cells && !(*cells)[i]) continue;
        const uint8_t p = pred.cells[i], g = gt.cells[i];
        if (p != 0 || g != 0) {
            if (p == g) {
                ++inter[p];
                ++uni[p];
            } else {
                if (p != 0) ++uni[p];
                if (g != 0) ++uni[g];
            }
        }
    }
    double sum = 0.0;
    int present = 0;
    for (int c = 1; c <= kNumClasses; ++c) {
        if (uni[static_cast<size_t>(c)] == 0) continue;
        sum += static_cast<double>(inter[static_cast<size_t>(c)]) / uni[static_cast<size_t>(c)];
        ++present;
    }
    return present == 0 ? 1.0 : sum / present;
}

struct SceneEval {
    // understanding
    double matched_iou = 0.0;
    int tp50 = 0, tp75 = 0;
    int n_pred = 0, n_gt = 0;
    int count_error = 0;
    // generation
    double pixel_iou = 0.0;
    bool has_overlap = false;
    double overlap_pixel_iou = 0.0;
    double hps = 0.0;
    double cycle_miou = 0.0;
    // cycle rewards
    double r1 = 0.0, r2 = 0.0;
};

struct Accumulator {
    double matched_iou = 0, count_error = 0;
    long tp50 = 0, tp75 = 0, n_pred = 0, n_gt = 0;
    double pixel_iou = 0, hps = 0, cycle_miou = 0;
    double overlap_iou_sum = 0;
    int overlap_n = 0;
    double r1 = 0, r2 = 0;
    int n = 0;

    void add(const SceneEval& e) {
        matched_iou += e.matched_iou;
        count_error += e.count_error;
        tp50 += e.tp50;
        tp75 += e.tp75;
        n_pred += e.n_pred;
        n_gt += e.n_gt;
        pixel_iou += e.pixel_iou;
        hps += e.hps;
        cycle_miou += e.cycle_miou;
        if (e.has_overlap) {
            overlap_iou_sum += e.overlap_pixel_iou;
            ++overlap_n;
        }
        r1 += e.r1;
        r2 += e.r2;
        ++n;
    }

    EvalSlice slice() const {
        EvalSlice s;
        if (n == 0) return s;
        s.und.n = n;
        s.und.mean_matched_iou = matched_iou / n;
        s.und.mean_count_error = count_error / static_cast<double>(n);
        auto prf = [&](long tp, double& prec, double& rec, double& f1) {
            prec = n_pred == 0 ? (n_gt == 0 ? 1.0 : 0.0)
                               : static_cast<double>(tp) / static_cast<double>(n_pred);
            rec = n_gt == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(n_gt);
            f1 = prec + rec == 0.0 ? 0.0 : 2.0 * prec * rec / (prec + rec);
        };
        prf(tp50, s.und.precision50, s.und.recall50, s.und.f1_50);
        prf(tp75, s.und.precision75, s.und.recall75, s.und.f1_75);
        s.gen.n = n;
        s.gen.pixel_iou = pixel_iou / n;
        s.gen.mean_hps = hps / n;
        s.gen.cycle_miou = cycle_miou / n;
        if (overlap_n > 0) s.gen.overlap_pixel_iou = overlap_iou_sum / overlap_n;
        s.cycle.n = n;
        s.cycle.mean_r1 = r1 / n;
        s.cycle.mean_r2 = r2 / n;
        return s;
    }
};

}  // namespace

EvalReport evaluate(const UndFn& und, const GenFn& gen, const std::vector<Scene>& scenes,
                    const RewardWeights& weights, int threads) {
    if (scenes.empty()) throw std::runtime_error("evaluate: empty dataset");

    std::vector<SceneEval> per_scene(scenes.size());
    parallel_for(static_cast<int>(scenes.size()), threads, [&](int idx) {
        const Scene& scene = scenes[static_cast<size_t>(idx)];
        SceneEval& e = per_scene[static_cast<size_t>(idx)];
        const GridImage i_gt = rasterize(scene);
        const Layout l_gt = layout_of(scene);

        // understanding: greedy parse vs GT
        const Layout l_pred = und(i_gt);
        const Matching m = match_layouts(l_pred, l_gt);
        e.matched_iou = m.mean_iou;
        for (double iou : m.pair_iou) {
            if (iou >= 0.5) ++e.tp50;
            if (iou >= 0.75) ++e.tp75;
        }
        e.n_pred = static_cast<int>(l_pred.instances.size());
        e.n_gt = static_cast<int>(l_gt.instances.size());
        e.count_error = std::abs(e.n_pred - e.n_gt);

        // generation: greedy render of the GT layout
        const GridImage i_gen = gen(l_gt);
        e.pixel_iou = class_pixel_iou(i_gen, i_gt, nullptr);
        e.hps = hps_proxy(i_gen);
        const Layout l_cycle = und(i_gen);
        e.cycle_miou = match_layouts(l_cycle, l_gt).mean_iou;

        // O-mIoU analog: cells covered by two or more GT boxes
        std::array<uint8_t, kGrid * kGrid> cover{};
        for (const auto& b : scene.boxes)
            for (int y = b.y0; y < b.y1; ++y)
                for (int x = b.x0; x < b.x1; ++x) {
                    auto& c = cover[static_cast<size_t>(y) * kGrid + x];
                    if (c < 2) ++c;
                }
        std::array<bool, kGrid * kGrid> multi{};
        bool any = false;
        for (size_t i = 0; i < cover.size(); ++i) {
            multi[i] = cover[i] >= 2;
            any = any || multi[i];
        }
        if (any) {
            e.has_overlap = true;
            e.overlap_pixel_iou = class_pixel_iou(i_gen, i_gt, &multi);
        }

        // cycle rewards at greedy temperature
        const GridImage i_r1 = gen(l_pred);
        e.r1 = weights.lambda_iou * m.mean_iou + weights.lambda_clip * clip_proxy(i_r1, i_gt);
        e.r2 = weights.lambda_iou * e.cycle_miou + weights.lambda_hps * e.hps;
    });

    Accumulator pooled;
    std::map<std::string, Accumulator> tiers;
    for (size_t i = 0; i < scenes.size(); ++i) {
        pooled.add(per_scene[i]);
        tiers[to_string(scenes[i].difficulty)].add(per_scene[i]);
    }

    EvalReport rep;
    rep.header =
        "threshold precision/recall/F1 replaces ranked AP (greedy decoding emits unranked boxes); "
        "overlap_pixel_iou restricts per-class pixel IoU to GT multi-covered cells";
    rep.pooled = pooled.slice();
    for (const auto& [name, acc] : tiers) rep.tiers[name] = acc.slice();
    return rep;
}

namespace {

nlohmann::json slice_json(const EvalSlice& s) {
    nlohmann::json und{{"mean_matched_iou", s.und.mean_matched_iou},
                       {"precision50", s.und.precision50},
                       {"recall50", s.und.recall50},
                       {"f1_50", s.und.f1_50},
                       {"precision75", s.und.precision75},
                       {"recall75", s.und.recall75},
                       {"f1_75", s.und.f1_75},
                       {"mean_count_error", s.und.mean_count_error},
                       {"n", s.und.n}};
    nlohmann::json gen{{"pixel_iou", s.gen.pixel_iou},
                       {"mean_hps", s.gen.mean_hps},
                       {"cycle_miou", s.gen.cycle_miou},
                       {"n", s.gen.n}};
    if (s.gen.overlap_pixel_iou) gen["overlap_pixel_iou"] = *s.gen.overlap_pixel_iou;
    nlohmann::json cycle{{"mean_r1", s.cycle.mean_r1}, {"mean_r2", s.cycle.mean_r2},
                         {"n", s.cycle.n}};
    return nlohmann::json{{"understanding", und}, {"generation", gen}, {"cycle", cycle}};
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j{{"header", header}, {"pooled", slice_json(pooled)}};
    nlohmann::json t;
    for (const auto& [name, s] : tiers) t[name] = slice_json(s);
    j["tiers"] = t;
    return j;
}

}  // namespace cycgrid
