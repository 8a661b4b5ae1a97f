#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cycgrid/rng.hpp"
#include "cycgrid/tensor.hpp"
#include "cycgrid/tokenizer.hpp"

namespace cycgrid {

struct ModelConfig {
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int context = kContext;
    int vocab = tok::VOCAB;

    int d_ff() const { return 4 * d_model; }
    int head_dim() const { return d_model / n_heads; }
    bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
};

// Full parameter set. Also reused as the container for gradients and for
// Adam moment accumulators, which are shaped identically.
struct Params {
    Tensor tok_emb, pos_emb;
    std::vector<LayerParams> layers;
    Tensor lnf_g, lnf_b;
    Tensor head_layout_w, head_layout_b;  // Und group
    Tensor head_image_w, head_image_b;    // Gen group

    void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
};

enum class ParamGroup { Backbone, Und, Gen };

ParamGroup group_of(const std::string& tensor_name);

struct GroupSet {
    bool backbone = false, und = false, gen = false;

    static GroupSet all() { return {true, true, true}; }
    static GroupSet und_direction() { return {true, true, false}; }  // Backbone + Und
    static GroupSet gen_direction() { return {true, false, true}; }  // Backbone + Gen
    bool contains(ParamGroup g) const {
        return g == ParamGroup::Backbone ? backbone : (g == ParamGroup::Und ? und : gen);
    }
    bool empty() const { return !backbone && !und && !gen; }
};

struct Policy {
    ModelConfig cfg;
    Params p;
};

Policy init_policy(const ModelConfig& cfg, uint64_t seed);
Params zeros_like(const Policy& policy);

// -------- forward / backward --------

struct LayerTrace {
    Tensor ln1_xhat, ln1_out;
    std::vector<double> ln1_rstd;
    Tensor q;            // n × d
    Tensor kt, vt;       // d × n, component-major for contiguous position scans
    Tensor att_probs;    // (n_heads * n) × n, row h*n+t holds softmax over j ≤ t
    Tensor att_concat;   // pre-Wo head concat
    Tensor ln2_xhat, ln2_out;
    std::vector<double> ln2_rstd;
    Tensor mlp_pre, mlp_act;
    Tensor kv_scratch;
};

struct Trace {
    std::vector<int> ids;
    int n = 0;
    std::vector<LayerTrace> layers;
    Tensor lnf_xhat;
    std::vector<double> lnf_rstd;
    Tensor hidden;  // n × d, after final layer norm
    Tensor scratch;  // residual stream workspace
};

Trace forward(const Policy& policy, const std::vector<int>& ids);

// Same computation, reusing tr's buffers when shapes allow. Hot loops call
// this with a per-thread trace to avoid re-allocating multi-MB activations.
void forward_into(const Policy& policy, const std::vector<int>& ids, Trace& tr);

// Logit rows for the given hidden positions; row r scores the token at
// position positions[r]+1.
Tensor head_logits(const Policy& policy, const Trace& trace, const std::vector<int>& positions,
                   Head head);

struct LogitGrads {
    Head head;
    std::vector<int> positions;
    Tensor grad;  // |positions| × vocab, dLoss/dlogits
};

// Exact reverse-mode pass; accumulates parameter gradients into grads.
void backward(const Policy& policy, const Trace& trace, const std::vector<LogitGrads>& logit_grads,
              Params& grads);

// -------- losses --------

// Sum of per-token negative log-likelihood over the target positions of seq
// (full-vocab softmax). If dlogits is non-null it receives the unscaled
// per-row gradient (softmax - onehot); callers scale by 1/token-count.
double ce_nll_sum(const Policy& policy, const Trace& trace, const TokenSeq& seq,
                  LogitGrads* dlogits);

double ln_vocab();  // ln 37, the uniform-prediction loss floor

// -------- optimizer --------

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimState {
    Params m, v;
    int64_t step_backbone = 0, step_und = 0, step_gen = 0;

    int64_t& step_for(ParamGroup g) {
        return g == ParamGroup::Backbone ? step_backbone
                                         : (g == ParamGroup::Und ? step_und : step_gen);
    }
};

OptimState make_optim_state(const Policy& policy);

// Updates only parameters in `groups`. A group whose gradients are all
// exactly zero is left untouched (parameters, moments and counter).
// Throws on non-finite gradients.
void adam_step(Policy& policy, const Params& grads, OptimState& opt, const AdamConfig& cfg,
               GroupSet groups);

double grad_norm(const Params& grads);
bool grads_all_finite(const Params& grads, std::string* bad_name = nullptr);

// -------- sampling --------

// Restricted, temperature-scaled log-softmax: disallowed entries get -inf.
void restricted_log_softmax(const double* logits, const TokenMask& allowed, double temperature,
                            double* logp);

// Incremental decoder with per-layer KV caches. Produces hidden states
// bit-identical to the full forward pass (same kernels, same loop order).
class Sampler {
public:
    explicit Sampler(const Policy& policy);

    void reset();
    void prefill(const std::vector<int>& ids);
    // Draws the next token from the restricted tempered distribution (or the
    // argmax when rng is null), feeds it, and returns it with its log-prob.
    int next_token(const TokenMask& allowed, Head head, double temperature, Rng* rng,
                   double* logp);
    int position() const { return pos_; }
    const ModelConfig& config() const { return policy_->cfg; }

private:
    void feed(int id);

    const Policy* policy_;
    int pos_ = 0;
    std::vector<Tensor> kcache_, vcache_;  // per layer, context × d
    std::vector<double> last_hidden_;
};

struct RolloutTrajectory {
    std::vector<int> tokens;         // sampled output, terminal EOS included
    std::vector<double> logp;        // behavior log-probs (restricted, tempered)
    std::vector<TokenMask> masks;    // allowed set at each emitted token
    Head head = Head::Layout;
};

// Samples one grammar-complete output continuation of prompt. Greedy when
// rng is null.
RolloutTrajectory rollout(const Policy& policy, const std::vector<int>& prompt, GrammarState g,
                          double temperature, Rng* rng);

// -------- gradient checking --------

struct GradCheckReport {
    double max_rel = 0.0;
    double mean_rel = 0.0;
    int n_checked = 0;
    bool pass = false;
    std::string worst_param;
};

namespace detail {
// Negative-control fixture: scales the GELU derivative inside backward.
extern double gelu_backward_scale;
}  // namespace detail

// Central-difference check of the full backward pass on a fixed two-sequence
// cross-entropy loss touching both heads. Relative error uses a 1e-2 floor
// so finite-difference roundoff at h=1e-6 cannot masquerade as error.
GradCheckReport grad_check(const ModelConfig& cfg, int n_samples, double h, double tolerance,
                           uint64_t seed);

}  // namespace cycgrid
