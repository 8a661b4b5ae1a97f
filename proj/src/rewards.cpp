#include "cycgrid/rewards.hpp"

#include <cmath>
#include <stdexcept>

namespace cycgrid {

double box_iou(const BoxSpec& a, const BoxSpec& b) {
    const int ix = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const int iy = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const int inter = ix * iy;
    const int uni = a.area() + b.area() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

namespace {

// Depth-first search over assignments of pred boxes to unused gt boxes.
// n ≤ 8 keeps this exact search cheap.
void search(const std::vector<std::vector<double>>& iou, size_t p, uint32_t used, double acc,
            std::vector<int>& cur, double& best, std::vector<int>& best_assign) {
    if (p == iou.size()) {
        if (acc > best) {
            best = acc;
            best_assign = cur;
        }
        return;
    }
    // leave pred p unmatched
    cur[p] = -1;
    search(iou, p + 1, used, acc, cur, best, best_assign);
    for (size_t g = 0; g < iou[p].size(); ++g) {
        if (used & (1u << g)) continue;
        if (iou[p][g] <= 0.0) continue;
        cur[p] = static_cast<int>(g);
        search(iou, p + 1, used | (1u << g), acc + iou[p][g], cur, best, best_assign);
    }
    cur[p] = -1;
}

}  // namespace

Matching match_layouts(const Layout& pred, const Layout& gt) {
    const size_t np = pred.instances.size(), ng = gt.instances.size();
    if (np > kMatcherCap || ng > kMatcherCap)
        throw std::runtime_error("match_layouts: cardinality exceeds cap of 8");

    Matching m;
    if (np == 0 && ng == 0) {
        m.mean_iou = 1.0;
        return m;
    }
    std::vector<std::vector<double>> iou(np, std::vector<double>(ng, 0.0));
    for (size_t p = 0; p < np; ++p)
        for (size_t g = 0; g < ng; ++g)
            if (pred.instances[p].cls == gt.instances[g].cls)
                iou[p][g] = box_iou(pred.instances[p], gt.instances[g]);

    double best = 0.0;
    std::vector<int> cur(np, -1), best_assign(np, -1);
    search(iou, 0, 0u, 0.0, cur, best, best_assign);

    for (size_t p = 0; p < np; ++p)
        if (best_assign[p] >= 0) {
            m.pairs.emplace_back(static_cast<int>(p), best_assign[p]);
            m.pair_iou.push_back(iou[p][static_cast<size_t>(best_assign[p])]);
        }
    m.mean_iou = best / static_cast<double>(std::max({np, ng, size_t{1}}));
    return m;
}

double clip_proxy(const GridImage& pred, const GridImage& ref) {
    int equal = 0;
    std::array<double, kNumClasses + 1> hp{}, hr{};
    for (size_t i = 0; i < pred.cells.size(); ++i) {
        if (pred.cells[i] == ref.cells[i]) ++equal;
        hp[pred.cells[i]] += 1.0;
        hr[ref.cells[i]] += 1.0;
    }
    const double cell_term = static_cast<double>(equal) / static_cast<double>(pred.cells.size());

    double pp = 0.0, rr = 0.0, pr = 0.0;
    for (size_t c = 0; c < hp.size(); ++c) {
        pp += hp[c] * hp[c];
        rr += hr[c] * hr[c];
        pr += hp[c] * hr[c];
    }
    double hist_term;
    if (pp == 0.0 && rr == 0.0) hist_term = 1.0;
    else if (pp == 0.0 || rr == 0.0) hist_term = 0.0;
    else hist_term = pr / (std::sqrt(pp) * std::sqrt(rr));

    return 0.5 * cell_term + 0.5 * hist_term;
}

double hps_proxy(const GridImage& img) {
    int painted = 0;
    for (uint8_t c : img.cells)
        if (c != 0) ++painted;
    if (painted == 0) return 0.0;

    std::array<bool, kGrid * kGrid> seen{};
    std::vector<int> stack;
    double solidity_sum = 0.0;
    int regions = 0;
    for (int y = 0; y < kGrid; ++y)
        for (int x = 0; x < kGrid; ++x) {
            const int idx = y * kGrid + x;
            if (img.cells[static_cast<size_t>(idx)] == 0 || seen[static_cast<size_t>(idx)]) continue;
            const uint8_t cls = img.cells[static_cast<size_t>(idx)];
            int cells = 0, minx = x, maxx = x, miny = y, maxy = y;
            stack.assign(1, idx);
            seen[static_cast<size_t>(idx)] = true;
            while (!stack.empty()) {
                const int cur = stack.back();
                stack.pop_back();
                ++cells;
                const int cx = cur % kGrid, cy = cur / kGrid;
                minx = std::min(minx, cx);
                maxx = std::max(maxx, cx);
                miny = std::min(miny, cy);
                maxy = std::max(maxy, cy);
                const int nbr[4][2] = {{cx - 1, cy}, {cx + 1, cy}, {cx, cy - 1}, {cx, cy + 1}};
                for (auto [nx, ny] : nbr) {
                    if (nx < 0 || nx >= kGrid || ny < 0 || ny >= kGrid) continue;
                    const int nidx = ny * kGrid + nx;
                    if (!seen[static_cast<size_t>(nidx)] &&
                        img.cells[static_cast<size_t>(nidx)] == cls) {
                        seen[static_cast<size_t>(nidx)] = true;
                        stack.push_back(nidx);
                    }
                }
            }
            const int bbox_area = (maxx - minx + 1) * (maxy - miny + 1);
            solidity_sum += static_cast<double>(cells) / bbox_area;
            ++regions;
        }

    const double mean_solidity = solidity_sum / regions;
    const double gate = std::min(1.0, static_cast<double>(painted) / 16.0);
    return mean_solidity * gate;
}

RewardBreakdown reward_r1(const Layout& l_pred, const Layout& l_gt, const GridImage& i_pred,
                          const GridImage& i_gt, const RewardWeights& w) {
    RewardBreakdown r;
    r.iou = match_layouts(l_pred, l_gt).mean_iou;
    r.clip_proxy = clip_proxy(i_pred, i_gt);
    r.total = w.lambda_iou * r.iou + w.lambda_clip * *r.clip_proxy;
    return r;
}

RewardBreakdown reward_r2(const Layout& l_parsed, const Layout& l_prompt,
                          const GridImage& i_pred, const RewardWeights& w) {
    RewardBreakdown r;
    r.iou = match_layouts(l_parsed, l_prompt).mean_iou;
    r.hps_proxy = hps_proxy(i_pred);
    r.total = w.lambda_iou * r.iou + w.lambda_hps * *r.hps_proxy;
    return r;
}

}  // namespace cycgrid
