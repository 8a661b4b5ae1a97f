#include "cycgrid/model.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <thread>

namespace cycgrid {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// y = x·W + b for one row; the only matrix-product kernel used on the
// forward path, so batched and incremental evaluation agree bit-for-bit.
inline void linear_row(const double* x, const Tensor& w, const Tensor& b, double* y) {
    const int k = w.rows(), n = w.cols();
    std::copy(b.v.begin(), b.v.end(), y);
    for (int p = 0; p < k; ++p) axpy(n, x[p], w.row(p), y);
}

// batched rows with weight-row reuse; per row identical arithmetic (and
// rounding) to linear_row, only the memory traffic changes
inline void linear_rows(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& y) {
    const int rows = x.rows(), k = w.rows(), n = w.cols();
    constexpr int kBlock = 16;
    for (int t0 = 0; t0 < rows; t0 += kBlock) {
        const int t1 = std::min(rows, t0 + kBlock);
        for (int t = t0; t < t1; ++t) std::copy(b.v.begin(), b.v.end(), y.row(t));
        for (int p = 0; p < k; ++p) {
            const double* wp = w.row(p);
            for (int t = t0; t < t1; ++t) axpy(n, x.row(t)[p], wp, y.row(t));
        }
    }
}

// W (k×m) += Xᵀ D over the row range of X/D, blocked so W rows stay cached;
// per-element accumulation stays in ascending row order
inline void acc_weight_grad(const Tensor& x, const Tensor& d_out, Tensor& w) {
    const int rows = x.rows(), k = w.rows(), m = w.cols();
    constexpr int kBlock = 16;
    for (int t0 = 0; t0 < rows; t0 += kBlock) {
        const int t1 = std::min(rows, t0 + kBlock);
        for (int p = 0; p < k; ++p) {
            double* wp = w.row(p);
            for (int t = t0; t < t1; ++t) axpy(m, x.row(t)[p], d_out.row(t), wp);
        }
    }
}

// Y (rows×k) = D (rows×m) · Wᵀ (m×k stored k×m). W is transposed into
// scratch first so the inner loops are contiguous axpys.
inline void rows_times_wt(const Tensor& d_in, const Tensor& w, Tensor& y) {
    const int rows = d_in.rows(), k = w.rows(), m = w.cols();
    thread_local Tensor wt;
    wt.ensure(m, k);
    for (int p = 0; p < k; ++p) {
        const double* wp = w.row(p);
        for (int j = 0; j < m; ++j) wt.at(j, p) = wp[j];
    }
    constexpr int kBlock = 16;
    for (int t0 = 0; t0 < rows; t0 += kBlock) {
        const int t1 = std::min(rows, t0 + kBlock);
        for (int t = t0; t < t1; ++t) std::fill(y.row(t), y.row(t) + k, 0.0);
        for (int p = 0; p < m; ++p) {
            const double* wtp = wt.row(p);
            for (int t = t0; t < t1; ++t) axpy(k, d_in.row(t)[p], wtp, y.row(t));
        }
    }
}

inline void layernorm_row(const double* x, int d, const double* g, const double* b, double* xhat,
                          double* rstd_out, double* y) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += x[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
        const double c = x[j] - mean;
        var += c * c;
    }
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    for (int j = 0; j < d; ++j) {
        xhat[j] = (x[j] - mean) * rstd;
        y[j] = g[j] * xhat[j] + b[j];
    }
    *rstd_out = rstd;
}

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
}

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
    const double pdf = std::exp(-0.5 * x * x) * 0.39894228040143267794;
    return cdf + x * pdf;
}

// keys/values are cached transposed (component-major, one row per embedding
// component) so score and mix loops stream over contiguous position ranges

// softmax(scale · q·K[j]) over j ≤ t, written into probs[0..t]
inline void attn_probs_row(const double* q, const Tensor& kt, int off, int dh, int t,
                           double scale, double* probs) {
    double qs[64];
    for (int k = 0; k < dh; ++k) qs[k] = q[k] * scale;
    std::fill(probs, probs + t + 1, 0.0);
    for (int k = 0; k < dh; ++k) axpy(t + 1, qs[k], kt.row(off + k), probs);
    double mx = kNegInf;
    for (int j = 0; j <= t; ++j) mx = std::max(mx, probs[j]);
    double z = 0.0;
    for (int j = 0; j <= t; ++j) {
        probs[j] = std::exp(probs[j] - mx);
        z += probs[j];
    }
    const double inv = 1.0 / z;
    for (int j = 0; j <= t; ++j) probs[j] *= inv;
}

inline void attn_mix_row(const double* probs, const Tensor& vt, int off, int dh, int t,
                         double* out) {
    for (int k = 0; k < dh; ++k) out[k] = dot(t + 1, probs, vt.row(off + k));
}

// Runs one token row through a transformer layer given the K/V rows of all
// earlier positions. x is updated in place; k/v rows for this position are
// written into the caches at row t.
struct RowScratch {
    std::vector<double> x, xhat, a, q, probs, att, o, b, h1, g, logits;
    void resize(int d, int dff, int ctx, int vocab) {
        x.resize(d);
        xhat.resize(d);
        a.resize(d);
        q.resize(d);
        probs.resize(ctx);
        att.resize(d);
        o.resize(d);
        b.resize(d);
        h1.resize(dff);
        g.resize(dff);
        logits.resize(vocab);
    }
};

}  // namespace

namespace detail {
double gelu_backward_scale = 1.0;
}

void Params::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("tok_emb", tok_emb);
    fn("pos_emb", pos_emb);
    for (size_t i = 0; i < layers.size(); ++i) {
        const std::string p = "layer" + std::to_string(i) + ".";
        auto& l = layers[i];
        fn(p + "ln1.g", l.ln1_g);
        fn(p + "ln1.b", l.ln1_b);
        fn(p + "attn.wq", l.wq);
        fn(p + "attn.bq", l.bq);
        fn(p + "attn.wk", l.wk);
        fn(p + "attn.bk", l.bk);
        fn(p + "attn.wv", l.wv);
        fn(p + "attn.bv", l.bv);
        fn(p + "attn.wo", l.wo);
        fn(p + "attn.bo", l.bo);
        fn(p + "ln2.g", l.ln2_g);
        fn(p + "ln2.b", l.ln2_b);
        fn(p + "mlp.w1", l.w1);
        fn(p + "mlp.b1", l.b1);
        fn(p + "mlp.w2", l.w2);
        fn(p + "mlp.b2", l.b2);
    }
    fn("final_ln.g", lnf_g);
    fn("final_ln.b", lnf_b);
    fn("head_layout.w", head_layout_w);
    fn("head_layout.b", head_layout_b);
    fn("head_image.w", head_image_w);
    fn("head_image.b", head_image_b);
}

void Params::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
    const_cast<Params*>(this)->for_each(
        [&fn](const std::string& name, Tensor& t) { fn(name, t); });
}

ParamGroup group_of(const std::string& name) {
    if (name.rfind("head_layout", 0) == 0) return ParamGroup::Und;
    if (name.rfind("head_image", 0) == 0) return ParamGroup::Gen;
    return ParamGroup::Backbone;
}

namespace {

Params make_params(const ModelConfig& cfg) {
    Params p;
    p.tok_emb = Tensor(cfg.vocab, cfg.d_model);
    p.pos_emb = Tensor(cfg.context, cfg.d_model);
    p.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& l : p.layers) {
        l.ln1_g = Tensor(cfg.d_model);
        l.ln1_b = Tensor(cfg.d_model);
        l.wq = Tensor(cfg.d_model, cfg.d_model);
        l.bq = Tensor(cfg.d_model);
        l.wk = Tensor(cfg.d_model, cfg.d_model);
        l.bk = Tensor(cfg.d_model);
        l.wv = Tensor(cfg.d_model, cfg.d_model);
        l.bv = Tensor(cfg.d_model);
        l.wo = Tensor(cfg.d_model, cfg.d_model);
        l.bo = Tensor(cfg.d_model);
        l.ln2_g = Tensor(cfg.d_model);
        l.ln2_b = Tensor(cfg.d_model);
        l.w1 = Tensor(cfg.d_model, cfg.d_ff());
        l.b1 = Tensor(cfg.d_ff());
        l.w2 = Tensor(cfg.d_ff(), cfg.d_model);
        l.b2 = Tensor(cfg.d_model);
    }
    p.lnf_g = Tensor(cfg.d_model);
    p.lnf_b = Tensor(cfg.d_model);
    p.head_layout_w = Tensor(cfg.d_model, cfg.vocab);
    p.head_layout_b = Tensor(cfg.vocab);
    p.head_image_w = Tensor(cfg.d_model, cfg.vocab);
    p.head_image_b = Tensor(cfg.vocab);
    return p;
}

}  // namespace

Policy init_policy(const ModelConfig& cfg, uint64_t seed) {
    if (cfg.d_model % cfg.n_heads != 0)
        throw std::runtime_error("model config: d_model must be divisible by n_heads");
    Policy policy;
    policy.cfg = cfg;
    policy.p = make_params(cfg);
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));
    policy.p.for_each([&](const std::string& name, Tensor& t) {
        const bool is_head = group_of(name) != ParamGroup::Backbone;
        const bool is_ln_gain = name.size() >= 2 && name.substr(name.size() - 2) == ".g" &&
                                name.find("ln") != std::string::npos;
        if (is_head) {
            t.zero();  // zero heads give uniform initial distributions
        } else if (is_ln_gain) {
            std::fill(t.v.begin(), t.v.end(), 1.0);
        } else if (t.rank() == 2) {
            for (auto& x : t.v) x = rng.gauss() * 0.02;
        } else {
            t.zero();
        }
    });
    return policy;
}

Params zeros_like(const Policy& policy) {
    return make_params(policy.cfg);
}

Trace forward(const Policy& policy, const std::vector<int>& ids) {
    Trace tr;
    forward_into(policy, ids, tr);
    return tr;
}

void forward_into(const Policy& policy, const std::vector<int>& ids, Trace& tr) {
    const auto& cfg = policy.cfg;
    const int n = static_cast<int>(ids.size());
    if (n == 0 || n > cfg.context)
        throw std::runtime_error("forward: sequence length " + std::to_string(n) +
                                 " out of range 1.." + std::to_string(cfg.context));
    const int d = cfg.d_model, dh = cfg.head_dim(), nh = cfg.n_heads, dff = cfg.d_ff();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    tr.ids = ids;
    tr.n = n;
    tr.layers.resize(static_cast<size_t>(cfg.n_layers));
    Tensor& x = tr.scratch;
    x.ensure(n, d);
    for (int t = 0; t < n; ++t) {
        const double* te = policy.p.tok_emb.row(ids[static_cast<size_t>(t)]);
        const double* pe = policy.p.pos_emb.row(t);
        double* xt = x.row(t);
        for (int j = 0; j < d; ++j) xt[j] = te[j] + pe[j];
    }

    for (int li = 0; li < cfg.n_layers; ++li) {
        const auto& lp = policy.p.layers[static_cast<size_t>(li)];
        auto& lt = tr.layers[static_cast<size_t>(li)];
        lt.ln1_xhat.ensure(n, d);
        lt.ln1_out.ensure(n, d);
        lt.ln1_rstd.resize(static_cast<size_t>(n));
        lt.q.ensure(n, d);
        lt.kt.ensure(d, n);
        lt.vt.ensure(d, n);
        lt.att_probs.ensure(nh * n, n);
        lt.att_concat.ensure(n, d);

        for (int t = 0; t < n; ++t)
            layernorm_row(x.row(t), d, lp.ln1_g.v.data(), lp.ln1_b.v.data(), lt.ln1_xhat.row(t),
                          &lt.ln1_rstd[static_cast<size_t>(t)], lt.ln1_out.row(t));
        lt.kv_scratch.ensure(n, d);
        Tensor& kv = lt.kv_scratch;
        linear_rows(lt.ln1_out, lp.wq, lp.bq, lt.q);
        linear_rows(lt.ln1_out, lp.wk, lp.bk, kv);
        for (int t = 0; t < n; ++t)
            for (int k = 0; k < d; ++k) lt.kt.at(k, t) = kv.at(t, k);
        linear_rows(lt.ln1_out, lp.wv, lp.bv, kv);
        for (int t = 0; t < n; ++t)
            for (int k = 0; k < d; ++k) lt.vt.at(k, t) = kv.at(t, k);
        for (int h = 0; h < nh; ++h) {
            const int off = h * dh;
            for (int t = 0; t < n; ++t) {
                double* probs = lt.att_probs.row(h * n + t);
                attn_probs_row(lt.q.row(t) + off, lt.kt, off, dh, t, scale, probs);
                attn_mix_row(probs, lt.vt, off, dh, t, lt.att_concat.row(t) + off);
            }
        }
        Tensor& proj = lt.kv_scratch;
        linear_rows(lt.att_concat, lp.wo, lp.bo, proj);
        for (int t = 0; t < n; ++t) axpy(d, 1.0, proj.row(t), x.row(t));

        lt.ln2_xhat.ensure(n, d);
        lt.ln2_out.ensure(n, d);
        lt.ln2_rstd.resize(static_cast<size_t>(n));
        lt.mlp_pre.ensure(n, dff);
        lt.mlp_act.ensure(n, dff);
        for (int t = 0; t < n; ++t)
            layernorm_row(x.row(t), d, lp.ln2_g.v.data(), lp.ln2_b.v.data(), lt.ln2_xhat.row(t),
                          &lt.ln2_rstd[static_cast<size_t>(t)], lt.ln2_out.row(t));
        linear_rows(lt.ln2_out, lp.w1, lp.b1, lt.mlp_pre);
        {
            const size_t total = static_cast<size_t>(n) * dff;
            for (size_t j = 0; j < total; ++j) lt.mlp_act.v[j] = gelu(lt.mlp_pre.v[j]);
        }
        linear_rows(lt.mlp_act, lp.w2, lp.b2, proj);
        for (int t = 0; t < n; ++t) axpy(d, 1.0, proj.row(t), x.row(t));
    }

    tr.lnf_xhat.ensure(n, d);
    tr.lnf_rstd.resize(static_cast<size_t>(n));
    tr.hidden.ensure(n, d);
    for (int t = 0; t < n; ++t)
        layernorm_row(x.row(t), d, policy.p.lnf_g.v.data(), policy.p.lnf_b.v.data(),
                      tr.lnf_xhat.row(t), &tr.lnf_rstd[static_cast<size_t>(t)], tr.hidden.row(t));
}

Tensor head_logits(const Policy& policy, const Trace& trace, const std::vector<int>& positions,
                   Head head) {
    const Tensor& w = head == Head::Layout ? policy.p.head_layout_w : policy.p.head_image_w;
    const Tensor& b = head == Head::Layout ? policy.p.head_layout_b : policy.p.head_image_b;
    Tensor gathered(static_cast<int>(positions.size()), policy.cfg.d_model);
    for (size_t r = 0; r < positions.size(); ++r) {
        const int t = positions[r];
        if (t < 0 || t >= trace.n) throw std::runtime_error("head_logits: position out of range");
        std::copy(trace.hidden.row(t), trace.hidden.row(t) + policy.cfg.d_model,
                  gathered.row(static_cast<int>(r)));
    }
    Tensor out(static_cast<int>(positions.size()), policy.cfg.vocab);
    linear_rows(gathered, w, b, out);
    return out;
}

namespace {

// dx += layernorm backward; accumulates dg/db
void layernorm_bwd_row(const double* dy, const double* xhat, double rstd, const double* g, int d,
                       double* dx, double* dg, double* db) {
    double m1 = 0.0, m2 = 0.0;
    for (int j = 0; j < d; ++j) {
        const double dxh = dy[j] * g[j];
        m1 += dxh;
        m2 += dxh * xhat[j];
        dg[j] += dy[j] * xhat[j];
        db[j] += dy[j];
    }
    m1 /= d;
    m2 /= d;
    for (int j = 0; j < d; ++j) {
        const double dxh = dy[j] * g[j];
        dx[j] += rstd * (dxh - m1 - xhat[j] * m2);
    }
}

}  // namespace

void backward(const Policy& policy, const Trace& trace, const std::vector<LogitGrads>& logit_grads,
              Params& grads) {
    const auto& cfg = policy.cfg;
    const int n = trace.n, d = cfg.d_model, dh = cfg.head_dim(), nh = cfg.n_heads,
              dff = cfg.d_ff();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // reusable per-thread workspaces; only accumulated buffers get zeroed
    struct BwdScratch {
        Tensor dhid, dx, dq, dk, dv, da, dh1, dg_act, db_ln, dkt, dvt, datt;
        std::vector<double> dp, ds;
    };
    thread_local BwdScratch ws;

    // head gradients and dLoss/dhidden
    ws.dhid.ensure(n, d);
    Tensor& dhid = ws.dhid;
    dhid.zero();
    for (const auto& lg : logit_grads) {
        const Tensor& w = lg.head == Head::Layout ? policy.p.head_layout_w : policy.p.head_image_w;
        Tensor& dw = lg.head == Head::Layout ? grads.head_layout_w : grads.head_image_w;
        Tensor& db = lg.head == Head::Layout ? grads.head_layout_b : grads.head_image_b;
        const int rows = static_cast<int>(lg.positions.size());
        Tensor gathered(rows, d), dh_rows(rows, d);
        for (int r = 0; r < rows; ++r) {
            const int t = lg.positions[static_cast<size_t>(r)];
            std::copy(trace.hidden.row(t), trace.hidden.row(t) + d, gathered.row(r));
            axpy(cfg.vocab, 1.0, lg.grad.row(r), db.v.data());
        }
        acc_weight_grad(gathered, lg.grad, dw);
        rows_times_wt(lg.grad, w, dh_rows);
        for (int r = 0; r < rows; ++r)
            axpy(d, 1.0, dh_rows.row(r), dhid.row(lg.positions[static_cast<size_t>(r)]));
    }

    // final layer norm
    ws.dx.ensure(n, d);
    Tensor& dx = ws.dx;
    dx.zero();
    for (int t = 0; t < n; ++t)
        layernorm_bwd_row(dhid.row(t), trace.lnf_xhat.row(t), trace.lnf_rstd[static_cast<size_t>(t)],
                          policy.p.lnf_g.v.data(), d, dx.row(t), grads.lnf_g.v.data(),
                          grads.lnf_b.v.data());

    ws.dq.ensure(n, d);
    ws.dk.ensure(n, d);
    ws.dv.ensure(n, d);
    ws.da.ensure(n, d);
    ws.dh1.ensure(n, dff);
    ws.dg_act.ensure(n, dff);
    ws.db_ln.ensure(n, d);
    ws.dkt.ensure(d, n);
    ws.dvt.ensure(d, n);
    ws.dp.resize(static_cast<size_t>(n));
    ws.ds.resize(static_cast<size_t>(n));
    Tensor &dq = ws.dq, &dk = ws.dk, &dv = ws.dv, &da = ws.da, &dh1 = ws.dh1,
           &dg_act = ws.dg_act, &db_ln = ws.db_ln, &dkt_buf = ws.dkt, &dvt_buf = ws.dvt;
    std::vector<double>&dp = ws.dp, &ds_buf = ws.ds;

    for (int li = cfg.n_layers - 1; li >= 0; --li) {
        const auto& lp = policy.p.layers[static_cast<size_t>(li)];
        const auto& lt = trace.layers[static_cast<size_t>(li)];
        auto& lg = grads.layers[static_cast<size_t>(li)];

        // ---- MLP block: x2 = x1 + W2·gelu(W1·ln2(x1)) ----
        // dW2 += actᵀ·dx ; db2 += dx ; dg_act = dx·W2ᵀ
        acc_weight_grad(lt.mlp_act, dx, lg.w2);
        for (int t = 0; t < n; ++t) axpy(d, 1.0, dx.row(t), lg.b2.v.data());
        rows_times_wt(dx, lp.w2, dg_act);
        for (size_t j = 0; j < dh1.v.size(); ++j)
            dh1.v[j] = dg_act.v[j] * gelu_grad(lt.mlp_pre.v[j]) * detail::gelu_backward_scale;
        // dW1 += ln2_outᵀ·dh1 ; db1 += dh1 ; db_ln = dh1·W1ᵀ
        acc_weight_grad(lt.ln2_out, dh1, lg.w1);
        for (int t = 0; t < n; ++t) axpy(dff, 1.0, dh1.row(t), lg.b1.v.data());
        rows_times_wt(dh1, lp.w1, db_ln);
        for (int t = 0; t < n; ++t)
            layernorm_bwd_row(db_ln.row(t), lt.ln2_xhat.row(t), lt.ln2_rstd[static_cast<size_t>(t)],
                              lp.ln2_g.v.data(), d, dx.row(t), lg.ln2_g.v.data(),
                              lg.ln2_b.v.data());

        // ---- attention block: x1 = x0 + Wo·attn(ln1(x0)) ----
        dq.zero();
        dkt_buf.zero();
        dvt_buf.zero();
        da.zero();
        // dO = dx·Woᵀ ; dWo += att_concatᵀ·dx ; dbo += dx
        ws.datt.ensure(n, d);
        Tensor& datt = ws.datt;
        acc_weight_grad(lt.att_concat, dx, lg.wo);
        for (int t = 0; t < n; ++t) axpy(d, 1.0, dx.row(t), lg.bo.v.data());
        rows_times_wt(dx, lp.wo, datt);
        for (int h = 0; h < nh; ++h) {
            const int off = h * dh;
            for (int t = 0; t < n; ++t) {
                const double* probs = lt.att_probs.row(h * n + t);
                const double* doh = datt.row(t) + off;
                double* dpt = dp.data();
                std::fill(dpt, dpt + t + 1, 0.0);
                for (int k = 0; k < dh; ++k) axpy(t + 1, doh[k], lt.vt.row(off + k), dpt);
                double sum_p_dp = 0.0;
                for (int j = 0; j <= t; ++j) sum_p_dp += probs[j] * dpt[j];
                double* dst = ds_buf.data();
                for (int j = 0; j <= t; ++j) dst[j] = probs[j] * (dpt[j] - sum_p_dp) * scale;
                const double* qt = lt.q.row(t) + off;
                double* dqt = dq.row(t) + off;
                for (int k = 0; k < dh; ++k) {
                    dqt[k] += dot(t + 1, dst, lt.kt.row(off + k));
                    axpy(t + 1, qt[k], dst, dkt_buf.row(off + k));
                    axpy(t + 1, doh[k], probs, dvt_buf.row(off + k));
                }
            }
        }
        // back to row-major for the projection gradients
        for (int t = 0; t < n; ++t) {
            double* dkt_row = dk.row(t);
            double* dvt_row = dv.row(t);
            for (int k = 0; k < d; ++k) {
                dkt_row[k] = dkt_buf.at(k, t);
                dvt_row[k] = dvt_buf.at(k, t);
            }
        }
        // dA = dq·Wqᵀ + dk·Wkᵀ + dv·Wvᵀ ; weight grads from ln1_out
        acc_weight_grad(lt.ln1_out, dq, lg.wq);
        acc_weight_grad(lt.ln1_out, dk, lg.wk);
        acc_weight_grad(lt.ln1_out, dv, lg.wv);
        for (int t = 0; t < n; ++t) {
            axpy(d, 1.0, dq.row(t), lg.bq.v.data());
            axpy(d, 1.0, dk.row(t), lg.bk.v.data());
            axpy(d, 1.0, dv.row(t), lg.bv.v.data());
        }
        rows_times_wt(dq, lp.wq, da);
        rows_times_wt(dk, lp.wk, datt);  // reuse datt as scratch
        for (size_t j = 0; j < da.v.size(); ++j) da.v[j] += datt.v[j];
        rows_times_wt(dv, lp.wv, datt);
        for (size_t j = 0; j < da.v.size(); ++j) da.v[j] += datt.v[j];
        for (int t = 0; t < n; ++t)
            layernorm_bwd_row(da.row(t), lt.ln1_xhat.row(t), lt.ln1_rstd[static_cast<size_t>(t)],
                              lp.ln1_g.v.data(), d, dx.row(t), lg.ln1_g.v.data(),
                              lg.ln1_b.v.data());
    }

    for (int t = 0; t < n; ++t) {
        const double* dxt = dx.row(t);
        axpy(d, 1.0, dxt, grads.tok_emb.row(trace.ids[static_cast<size_t>(t)]));
        axpy(d, 1.0, dxt, grads.pos_emb.row(t));
    }
}

double ce_nll_sum(const Policy& policy, const Trace& trace, const TokenSeq& seq,
                  LogitGrads* dlogits) {
    if (seq.num_targets() < 1) throw std::runtime_error("loss_ce: empty target mask");
    std::vector<int> positions;
    positions.reserve(static_cast<size_t>(seq.num_targets()));
    for (int t = seq.prompt_len - 1; t < seq.size() - 1; ++t) positions.push_back(t);

    const Tensor logits = head_logits(policy, trace, positions, seq.target_head);
    const int v = policy.cfg.vocab;
    if (dlogits) {
        dlogits->head = seq.target_head;
        dlogits->positions = positions;
        dlogits->grad = Tensor(static_cast<int>(positions.size()), v);
    }
    double nll = 0.0;
    for (size_t r = 0; r < positions.size(); ++r) {
        const double* row = logits.row(static_cast<int>(r));
        const int target = seq.ids[static_cast<size_t>(positions[r] + 1)];
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
        const double lse = mx + std::log(z);
        nll += lse - row[target];
        if (dlogits) {
            double* g = dlogits->grad.row(static_cast<int>(r));
            for (int j = 0; j < v; ++j) g[j] = std::exp(row[j] - lse);
            g[target] -= 1.0;
        }
    }
    return nll;
}

double ln_vocab() {
    return std::log(static_cast<double>(tok::VOCAB));
}

OptimState make_optim_state(const Policy& policy) {
    OptimState st;
    st.m = make_params(policy.cfg);
    st.v = make_params(policy.cfg);
    return st;
}

bool grads_all_finite(const Params& grads, std::string* bad_name) {
    bool ok = true;
    grads.for_each([&](const std::string& name, const Tensor& t) {
        if (!ok) return;
        for (double x : t.v)
            if (!std::isfinite(x)) {
                ok = false;
                if (bad_name) *bad_name = name;
                return;
            }
    });
    return ok;
}

double grad_norm(const Params& grads) {
    double s = 0.0;
    grads.for_each([&](const std::string&, const Tensor& t) {
        for (double x : t.v) s += x * x;
    });
    return std::sqrt(s);
}

void adam_step(Policy& policy, const Params& grads, OptimState& opt, const AdamConfig& cfg,
               GroupSet groups) {
    if (groups.empty()) throw std::runtime_error("adam_step: empty group set");
    {
        std::string bad;
        if (!grads_all_finite(grads, &bad))
            throw std::runtime_error("adam_step: non-finite gradient in " + bad);
    }

    // groups whose gradients are all exactly zero are skipped outright
    bool zero_group[3] = {true, true, true};
    grads.for_each([&](const std::string& name, const Tensor& t) {
        auto& z = zero_group[static_cast<int>(group_of(name))];
        if (!z) return;
        for (double x : t.v)
            if (x != 0.0) {
                z = false;
                return;
            }
    });

    bool active[3] = {};
    for (ParamGroup g : {ParamGroup::Backbone, ParamGroup::Und, ParamGroup::Gen}) {
        const int gi = static_cast<int>(g);
        active[gi] = groups.contains(g) && !zero_group[gi];
        if (active[gi]) ++opt.step_for(g);
    }

    std::vector<const Tensor*> gptr;
    std::vector<Tensor*> mptr, vptr;
    std::vector<ParamGroup> tgroup;
    policy.p.for_each([&](const std::string& name, Tensor&) { tgroup.push_back(group_of(name)); });
    grads.for_each([&](const std::string&, const Tensor& t) { gptr.push_back(&t); });
    opt.m.for_each([&](const std::string&, Tensor& t) { mptr.push_back(&t); });
    opt.v.for_each([&](const std::string&, Tensor& t) { vptr.push_back(&t); });

    size_t idx = 0;
    policy.p.for_each([&](const std::string&, Tensor& theta) {
        const size_t i = idx++;
        const ParamGroup g = tgroup[i];
        if (!active[static_cast<int>(g)]) return;
        const auto t = static_cast<double>(opt.step_for(g));
        const double bc1 = 1.0 - std::pow(cfg.beta1, t);
        const double bc2 = 1.0 - std::pow(cfg.beta2, t);
        const Tensor& gr = *gptr[i];
        Tensor& m = *mptr[i];
        Tensor& v = *vptr[i];
        for (size_t j = 0; j < theta.v.size(); ++j) {
            m.v[j] = cfg.beta1 * m.v[j] + (1.0 - cfg.beta1) * gr.v[j];
            v.v[j] = cfg.beta2 * v.v[j] + (1.0 - cfg.beta2) * gr.v[j] * gr.v[j];
            const double mhat = m.v[j] / bc1;
            const double vhat = v.v[j] / bc2;
            theta.v[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    });
}

void restricted_log_softmax(const double* logits, const TokenMask& allowed, double temperature,
                            double* logp) {
    double mx = kNegInf;
    for (int j = 0; j < tok::VOCAB; ++j)
        if (allowed[static_cast<size_t>(j)]) mx = std::max(mx, logits[j] / temperature);
    double z = 0.0;
    for (int j = 0; j < tok::VOCAB; ++j)
        z += allowed[static_cast<size_t>(j)] ? std::exp(logits[j] / temperature - mx) : 0.0;
    const double lz = std::log(z);
    for (int j = 0; j < tok::VOCAB; ++j)
        logp[j] = allowed[static_cast<size_t>(j)] ? logits[j] / temperature - mx - lz : kNegInf;
}

Sampler::Sampler(const Policy& policy) : policy_(&policy) {
    const auto& cfg = policy.cfg;
    kcache_.resize(static_cast<size_t>(cfg.n_layers));
    vcache_.resize(static_cast<size_t>(cfg.n_layers));
    for (int i = 0; i < cfg.n_layers; ++i) {
        kcache_[static_cast<size_t>(i)] = Tensor(cfg.d_model, cfg.context);
        vcache_[static_cast<size_t>(i)] = Tensor(cfg.d_model, cfg.context);
    }
    last_hidden_.resize(static_cast<size_t>(cfg.d_model));
}

void Sampler::reset() {
    pos_ = 0;
}

void Sampler::feed(int id) {
    const auto& cfg = policy_->cfg;
    if (pos_ >= cfg.context) throw std::runtime_error("sampler: context overflow");
    const int d = cfg.d_model, dh = cfg.head_dim(), nh = cfg.n_heads, dff = cfg.d_ff();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const int t = pos_;

    thread_local RowScratch rs;
    rs.resize(d, dff, cfg.context, cfg.vocab);
    double* x = rs.x.data();
    double* xhat = rs.xhat.data();
    double rstd = 0.0;

    const double* te = policy_->p.tok_emb.row(id);
    const double* pe = policy_->p.pos_emb.row(t);
    for (int j = 0; j < d; ++j) x[j] = te[j] + pe[j];

    for (int li = 0; li < cfg.n_layers; ++li) {
        const auto& lp = policy_->p.layers[static_cast<size_t>(li)];
        Tensor& kc = kcache_[static_cast<size_t>(li)];
        Tensor& vc = vcache_[static_cast<size_t>(li)];

        layernorm_row(x, d, lp.ln1_g.v.data(), lp.ln1_b.v.data(), xhat, &rstd, rs.a.data());
        linear_row(rs.a.data(), lp.wq, lp.bq, rs.q.data());
        linear_row(rs.a.data(), lp.wk, lp.bk, rs.o.data());
        for (int k = 0; k < d; ++k) kc.at(k, t) = rs.o[static_cast<size_t>(k)];
        linear_row(rs.a.data(), lp.wv, lp.bv, rs.o.data());
        for (int k = 0; k < d; ++k) vc.at(k, t) = rs.o[static_cast<size_t>(k)];
        for (int h = 0; h < nh; ++h) {
            const int off = h * dh;
            attn_probs_row(rs.q.data() + off, kc, off, dh, t, scale, rs.probs.data());
            attn_mix_row(rs.probs.data(), vc, off, dh, t, rs.att.data() + off);
        }
        linear_row(rs.att.data(), lp.wo, lp.bo, rs.o.data());
        axpy(d, 1.0, rs.o.data(), x);

        layernorm_row(x, d, lp.ln2_g.v.data(), lp.ln2_b.v.data(), xhat, &rstd, rs.b.data());
        linear_row(rs.b.data(), lp.w1, lp.b1, rs.h1.data());
        for (int j = 0; j < dff; ++j) rs.g[static_cast<size_t>(j)] = gelu(rs.h1[static_cast<size_t>(j)]);
        linear_row(rs.g.data(), lp.w2, lp.b2, rs.o.data());
        axpy(d, 1.0, rs.o.data(), x);
    }
    layernorm_row(x, d, policy_->p.lnf_g.v.data(), policy_->p.lnf_b.v.data(), xhat, &rstd,
                  last_hidden_.data());
    ++pos_;
}

void Sampler::prefill(const std::vector<int>& ids) {
    if (ids.empty()) return;
    if (pos_ != 0) {
        for (int id : ids) feed(id);
        return;
    }
    // bulk path: one blocked forward, then adopt its K/V; row for row this
    // matches what repeated feed() calls would produce
    thread_local Trace tr;
    forward_into(*policy_, ids, tr);
    const int n = tr.n;
    for (int li = 0; li < policy_->cfg.n_layers; ++li) {
        const auto& lt = tr.layers[static_cast<size_t>(li)];
        Tensor& kc = kcache_[static_cast<size_t>(li)];
        Tensor& vc = vcache_[static_cast<size_t>(li)];
        for (int k = 0; k < policy_->cfg.d_model; ++k) {
            std::copy(lt.kt.row(k), lt.kt.row(k) + n, kc.row(k) + pos_);
            std::copy(lt.vt.row(k), lt.vt.row(k) + n, vc.row(k) + pos_);
        }
    }
    std::copy(tr.hidden.row(n - 1), tr.hidden.row(n - 1) + policy_->cfg.d_model,
              last_hidden_.data());
    pos_ += n;
}

int Sampler::next_token(const TokenMask& allowed, Head head, double temperature, Rng* rng,
                        double* logp_out) {
    if (pos_ == 0) throw std::runtime_error("sampler: next_token before prefill");
    const auto& p = policy_->p;
    const Tensor& w = head == Head::Layout ? p.head_layout_w : p.head_image_w;
    const Tensor& b = head == Head::Layout ? p.head_layout_b : p.head_image_b;
    std::array<double, tok::VOCAB> logits{};
    linear_row(last_hidden_.data(), w, b, logits.data());

    std::array<double, tok::VOCAB> logp{};
    restricted_log_softmax(logits.data(), allowed, temperature, logp.data());

    int chosen = -1;
    if (rng == nullptr) {
        double best = kNegInf;
        for (int j = 0; j < tok::VOCAB; ++j)
            if (allowed[static_cast<size_t>(j)] && logp[static_cast<size_t>(j)] > best) {
                best = logp[static_cast<size_t>(j)];
                chosen = j;
            }
    } else {
        const double u = rng->uniform01();
        double acc = 0.0;
        for (int j = 0; j < tok::VOCAB; ++j) {
            if (!allowed[static_cast<size_t>(j)]) continue;
            acc += std::exp(logp[static_cast<size_t>(j)]);
            chosen = j;  // last allowed token absorbs residual rounding mass
            if (u < acc) break;
        }
    }
    if (chosen < 0) throw std::runtime_error("sampler: no allowed token");
    if (logp_out) *logp_out = logp[static_cast<size_t>(chosen)];
    feed(chosen);
    return chosen;
}

RolloutTrajectory rollout(const Policy& policy, const std::vector<int>& prompt, GrammarState g,
                          double temperature, Rng* rng) {
    // per-thread sampler reuse: the KV caches are only ever read up to the
    // current position, so resetting the cursor is enough
    thread_local std::unique_ptr<Sampler> cached;
    thread_local const Policy* cached_policy = nullptr;
    if (!cached || cached_policy != &policy ||
        !(cached->config() == policy.cfg)) {
        cached = std::make_unique<Sampler>(policy);
        cached_policy = &policy;
    }
    Sampler& sampler = *cached;
    sampler.reset();
    sampler.prefill(prompt);
    RolloutTrajectory traj;
    traj.head = g.head();
    while (!g.done()) {
        const TokenMask mask = g.allowed();
        double lp = 0.0;
        const int t = sampler.next_token(mask, g.head(), temperature, rng, &lp);
        g.advance(t);
        traj.tokens.push_back(t);
        traj.logp.push_back(lp);
        traj.masks.push_back(mask);
    }
    return traj;
}

GradCheckReport grad_check(const ModelConfig& cfg, int n_samples, double h, double tolerance,
                           uint64_t seed) {
    Policy policy = init_policy(cfg, seed);
    Rng rng(mix_seed(seed, 0x67636865636bULL));
    // heads are zero at init, which kills all backbone gradients; randomize
    // them so the check exercises every parameter path
    for (auto* t : {&policy.p.head_layout_w, &policy.p.head_image_w})
        for (auto& x : t->v) x = rng.gauss() * 0.02;

    // two synthetic sequences, one per head
    auto make_seq = [&](Head head, int len, int prompt_len) {
        TokenSeq s;
        s.target_head = head;
        s.prompt_len = prompt_len;
        for (int i = 0; i < len; ++i) s.ids.push_back(rng.uniform_int(0, tok::VOCAB - 1));
        return s;
    };
    const std::vector<TokenSeq> seqs = {make_seq(Head::Layout, 48, 8),
                                        make_seq(Head::Image, 48, 8)};

    auto loss_of = [&](const Policy& p) {
        double total = 0.0;
        for (const auto& s : seqs) {
            const Trace tr = forward(p, s.ids);
            total += ce_nll_sum(p, tr, s, nullptr) / s.num_targets();
        }
        return total;
    };

    // analytic gradients
    Params grads = zeros_like(policy);
    for (const auto& s : seqs) {
        const Trace tr = forward(policy, s.ids);
        LogitGrads lg;
        ce_nll_sum(policy, tr, s, &lg);
        for (auto& x : lg.grad.v) x /= s.num_targets();
        backward(policy, tr, {lg}, grads);
    }

    // flatten views for sampling
    std::vector<std::pair<std::string, Tensor*>> tensors;
    policy.p.for_each([&](const std::string& name, Tensor& t) { tensors.emplace_back(name, &t); });
    std::vector<Tensor*> gtensors;
    grads.for_each([&](const std::string&, Tensor& t) { gtensors.push_back(&t); });
    size_t total_params = 0;
    for (auto& [name, t] : tensors) total_params += t->size();

    struct Pick {
        size_t tensor, offset;
    };
    std::vector<Pick> picks;
    picks.reserve(static_cast<size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) {
        size_t flat = rng.u64() % total_params;
        for (size_t ti = 0; ti < tensors.size(); ++ti) {
            if (flat < tensors[ti].second->size()) {
                picks.push_back({ti, flat});
                break;
            }
            flat -= tensors[ti].second->size();
        }
    }

    GradCheckReport rep;
    rep.n_checked = n_samples;
    std::vector<double> rels(picks.size(), 0.0);
    parallel_for(static_cast<int>(picks.size()), static_cast<int>(std::thread::hardware_concurrency()),
                 [&](int i) {
                     const auto& pk = picks[static_cast<size_t>(i)];
                     Policy local = policy;
                     std::vector<std::pair<std::string, Tensor*>> lt;
                     local.p.for_each(
                         [&](const std::string& name, Tensor& t) { lt.emplace_back(name, &t); });
                     double& x = lt[pk.tensor].second->v[pk.offset];
                     const double orig = x;
                     x = orig + h;
                     const double lp = loss_of(local);
                     x = orig - h;
                     const double lm = loss_of(local);
                     x = orig;
                     const double fd = (lp - lm) / (2.0 * h);
                     const double an = gtensors[pk.tensor]->v[pk.offset];
                     rels[static_cast<size_t>(i)] =
                         std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-2});
                 });
    double sum = 0.0;
    for (size_t i = 0; i < rels.size(); ++i) {
        sum += rels[i];
        if (rels[i] > rep.max_rel) {
            rep.max_rel = rels[i];
            rep.worst_param = tensors[picks[i].tensor].first;
        }
    }
    rep.mean_rel = picks.empty() ? 0.0 : sum / static_cast<double>(picks.size());
    rep.pass = rep.max_rel < tolerance;
    return rep;
}

}  // namespace cycgrid
