// SPDX-License-Identifier: Apache-2.0
//
// A small decoder-style MoE language model. Each block is a causal
// single-head attention (or mean-pool) mixer followed by a sparse MoE
// feed-forward with top-k routing, in both post-softmax and pre-softmax
// gating variants. The forward pass runs on the autodiff tape whenever its
// inputs are watched, so the same code path serves training, attribution,
// and plain inference.

#pragma once

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsmoe/common.hpp"
#include "dsmoe/tensor.hpp"

namespace dsmoe {

enum class RouterMode { PostSoftmax, PreSoftmax };
enum class MixerMode { Attention, MeanPool };

// Where steering multipliers enter the routing computation. Both points are
// algebraically equivalent and must agree within 1e-12.
enum class SteerPoint { GateWeights, LogitBias };

inline std::string to_string(RouterMode m) { return m == RouterMode::PostSoftmax ? "post_softmax" : "pre_softmax"; }
inline std::string to_string(MixerMode m) { return m == MixerMode::Attention ? "attention" : "mean_pool"; }
inline std::string to_string(SteerPoint p) { return p == SteerPoint::GateWeights ? "gate_weights" : "logit_bias"; }

inline RouterMode router_mode_from_string(const std::string& s) {
    if (s == "post_softmax") return RouterMode::PostSoftmax;
    if (s == "pre_softmax") return RouterMode::PreSoftmax;
    fail(ErrorKind::Config, "unknown router mode '" + s + "'");
}
inline MixerMode mixer_mode_from_string(const std::string& s) {
    if (s == "attention") return MixerMode::Attention;
    if (s == "mean_pool") return MixerMode::MeanPool;
    fail(ErrorKind::Config, "unknown mixer mode '" + s + "'");
}
inline SteerPoint steer_point_from_string(const std::string& s) {
    if (s == "gate_weights") return SteerPoint::GateWeights;
    if (s == "logit_bias") return SteerPoint::LogitBias;
    fail(ErrorKind::Config, "unknown steering application point '" + s + "'");
}

struct ModelConfig {
    int64_t vocab_size = 256;
    int64_t embed_dim = 64;
    int64_t num_layers = 4;
    int64_t num_experts = 16;
    int64_t top_k = 2;
    int64_t expert_hidden_dim = 128;
    int64_t max_seq_len = 64;
    RouterMode router_mode = RouterMode::PostSoftmax;
    MixerMode mixer_mode = MixerMode::Attention;
    uint64_t seed = 1;

    void validate() const {
        require(vocab_size >= 2, ErrorKind::Config, "vocab_size must be >= 2");
        require(embed_dim >= 1, ErrorKind::Config, "embed_dim must be >= 1");
        require(num_layers >= 1, ErrorKind::Config, "num_layers must be >= 1");
        require(num_experts >= 1, ErrorKind::Config, "num_experts must be >= 1");
        require(top_k >= 1 && top_k <= num_experts, ErrorKind::Config,
                "top_k must satisfy 1 <= k <= num_experts, got k=" + std::to_string(top_k) + ", N=" +
                    std::to_string(num_experts));
        require(expert_hidden_dim >= 1, ErrorKind::Config, "expert_hidden_dim must be >= 1");
        require(max_seq_len >= 2, ErrorKind::Config, "max_seq_len must be >= 2");
    }

    nlohmann::json to_json() const {
        return {{"vocab_size", vocab_size},
                {"embed_dim", embed_dim},
                {"num_layers", num_layers},
                {"num_experts", num_experts},
                {"top_k", top_k},
                {"expert_hidden_dim", expert_hidden_dim},
                {"max_seq_len", max_seq_len},
                {"router_mode", to_string(router_mode)},
                {"mixer_mode", to_string(mixer_mode)},
                {"seed", seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.vocab_size = j.at("vocab_size").get<int64_t>();
        c.embed_dim = j.at("embed_dim").get<int64_t>();
        c.num_layers = j.at("num_layers").get<int64_t>();
        c.num_experts = j.at("num_experts").get<int64_t>();
        c.top_k = j.at("top_k").get<int64_t>();
        c.expert_hidden_dim = j.at("expert_hidden_dim").get<int64_t>();
        c.max_seq_len = j.at("max_seq_len").get<int64_t>();
        c.router_mode = router_mode_from_string(j.at("router_mode").get<std::string>());
        c.mixer_mode = mixer_mode_from_string(j.at("mixer_mode").get<std::string>());
        c.seed = j.at("seed").get<uint64_t>();
        c.validate();
        return c;
    }

    bool operator==(const ModelConfig&) const = default;
};

struct AdamConfig {
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    nlohmann::json to_json() const { return {{"lr", lr}, {"beta1", beta1}, {"beta2", beta2}, {"eps", eps}}; }
    static AdamConfig from_json(const nlohmann::json& j) {
        AdamConfig a;
        a.lr = j.at("lr").get<double>();
        a.beta1 = j.at("beta1").get<double>();
        a.beta2 = j.at("beta2").get<double>();
        a.eps = j.at("eps").get<double>();
        return a;
    }
    bool operator==(const AdamConfig&) const = default;
};

// One routing outcome at a (layer, position): the selected expert ids in
// weight order (ties resolved toward the lower index) and their gate
// weights. Pre-softmax weights sum to 1; post-softmax weights are the raw
// softmax probabilities of the selected experts.
struct RoutingDecision {
    int layer = -1;
    int position = -1;
    std::vector<int> experts;
    std::vector<double> weights;
    bool steered = false;

    bool operator==(const RoutingDecision&) const = default;
};

// Resolved per-(layer, expert) gate multipliers. An identity plan (all ones)
// short-circuits to the unsteered code path, which keeps identity steering
// bit-for-bit equal to no steering.
struct SteeringPlan {
    SteerPoint point = SteerPoint::GateWeights;
    std::vector<std::vector<double>> multipliers;  // [layer][expert]

    bool identity() const {
        for (const auto& layer : multipliers)
            for (double m : layer)
                if (m != 1.0) return false;
        return true;
    }

    void validate(const ModelConfig& cfg) const {
        require(static_cast<int64_t>(multipliers.size()) == cfg.num_layers, ErrorKind::Config,
                "steering plan covers " + std::to_string(multipliers.size()) + " layers, model has " +
                    std::to_string(cfg.num_layers));
        for (const auto& layer : multipliers) {
            require(static_cast<int64_t>(layer.size()) == cfg.num_experts, ErrorKind::Config,
                    "steering plan row length does not match num_experts");
            for (double m : layer)
                require(m > 0.0 && std::isfinite(m), ErrorKind::Config, "steering multipliers must be positive");
        }
    }
};

// Instrumentation counters for cost accounting.
struct PassCounters {
    uint64_t forwards = 0;
    uint64_t backwards = 0;
    uint64_t expert_evals = 0;
    uint64_t steering_multiplies = 0;  // one length-N multiply per (token, layer) when steered
};

// Per-layer router usage statistics collected during a forward pass,
// differentiable through the mean probabilities; used by the optional
// load-balance penalty.
struct BalanceProbe {
    std::vector<Tensor> mean_probs;           // per layer: 1 x N, on tape
    std::vector<std::vector<double>> usage;   // per layer: fraction of positions selecting each expert
};

namespace detail {

inline std::vector<int> topk_indices(std::span<const double> values, int k) {
    std::vector<int> idx(values.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
        if (values[static_cast<size_t>(a)] != values[static_cast<size_t>(b)])
            return values[static_cast<size_t>(a)] > values[static_cast<size_t>(b)];
        return a < b;
    });
    idx.resize(static_cast<size_t>(k));
    return idx;
}

}  // namespace detail

// Routing decision from raw router logits. With multipliers this implements
// steering at either application point; multipliers of exactly 1 everywhere
// reduce to the unsteered computation.
inline RoutingDecision route_from_logits(std::span<const double> logits, int k, RouterMode mode,
                                         const std::vector<double>* multipliers = nullptr,
                                         SteerPoint point = SteerPoint::GateWeights) {
    int n = static_cast<int>(logits.size());
    require(k >= 1 && k <= n, ErrorKind::Config,
            "top_k=" + std::to_string(k) + " out of range for " + std::to_string(n) + " experts");
    for (double v : logits) require(std::isfinite(v), ErrorKind::Numeric, "router logits are not finite");

    bool steered = false;
    if (multipliers) {
        require(static_cast<int>(multipliers->size()) == n, ErrorKind::Config,
                "multiplier vector length " + std::to_string(multipliers->size()) + " does not match " +
                    std::to_string(n) + " experts");
        for (double m : *multipliers) {
            require(m > 0.0 && std::isfinite(m), ErrorKind::Config, "multipliers must be positive and finite");
            if (m != 1.0) steered = true;
        }
    }

    RoutingDecision dec;
    dec.steered = steered;
    if (!steered) {
        dec.experts = detail::topk_indices(logits, k);
        if (mode == RouterMode::PostSoftmax) {
            std::vector<double> p = detail::softmax_values(logits);
            for (int e : dec.experts) dec.weights.push_back(p[static_cast<size_t>(e)]);
        } else {
            std::vector<double> sub;
            for (int e : dec.experts) sub.push_back(logits[static_cast<size_t>(e)]);
            dec.weights = detail::softmax_values(sub);
        }
        return dec;
    }

    const std::vector<double>& m = *multipliers;
    if (point == SteerPoint::LogitBias) {
        std::vector<double> biased(logits.begin(), logits.end());
        for (int i = 0; i < n; ++i) biased[static_cast<size_t>(i)] += std::log(m[static_cast<size_t>(i)]);
        dec.experts = detail::topk_indices(biased, k);
        if (mode == RouterMode::PostSoftmax) {
            std::vector<double> p = detail::softmax_values(biased);
            for (int e : dec.experts) dec.weights.push_back(p[static_cast<size_t>(e)]);
        } else {
            std::vector<double> sub;
            for (int e : dec.experts) sub.push_back(biased[static_cast<size_t>(e)]);
            dec.weights = detail::softmax_values(sub);
        }
    } else {
        std::vector<double> p = detail::softmax_values(logits);
        std::vector<double> scaled(p.size());
        for (int i = 0; i < n; ++i) scaled[static_cast<size_t>(i)] = p[static_cast<size_t>(i)] * m[static_cast<size_t>(i)];
        dec.experts = detail::topk_indices(scaled, k);
        if (mode == RouterMode::PostSoftmax) {
            double total = 0.0;
            for (double v : scaled) total += v;
            for (int e : dec.experts) dec.weights.push_back(scaled[static_cast<size_t>(e)] / total);
        } else {
            double total = 0.0;
            for (int e : dec.experts) total += scaled[static_cast<size_t>(e)];
            for (int e : dec.experts) dec.weights.push_back(scaled[static_cast<size_t>(e)] / total);
        }
    }
    return dec;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ForwardOutput {
    Tensor logits;  // T x V
    std::vector<RoutingDecision> decisions;
};

class MoEModel {
public:
    explicit MoEModel(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        double base_std = 0.02;
        double out_std = base_std / std::sqrt(2.0 * static_cast<double>(cfg_.num_layers));
        tok_emb_ = init({cfg_.vocab_size, cfg_.embed_dim}, rng, base_std);
        pos_emb_ = init({cfg_.max_seq_len, cfg_.embed_dim}, rng, base_std);
        layers_.resize(static_cast<size_t>(cfg_.num_layers));
        for (auto& layer : layers_) {
            layer.norm1 = Tensor::full({cfg_.embed_dim}, 1.0);
            layer.wq = init({cfg_.embed_dim, cfg_.embed_dim}, rng, base_std);
            layer.wk = init({cfg_.embed_dim, cfg_.embed_dim}, rng, base_std);
            layer.wv = init({cfg_.embed_dim, cfg_.embed_dim}, rng, base_std);
            layer.wo = init({cfg_.embed_dim, cfg_.embed_dim}, rng, out_std);
            layer.norm2 = Tensor::full({cfg_.embed_dim}, 1.0);
            layer.router = init({cfg_.num_experts, cfg_.embed_dim}, rng, base_std);
            layer.w1.reserve(static_cast<size_t>(cfg_.num_experts));
            layer.w2.reserve(static_cast<size_t>(cfg_.num_experts));
            for (int64_t e = 0; e < cfg_.num_experts; ++e) {
                layer.w1.push_back(init({cfg_.embed_dim, cfg_.expert_hidden_dim}, rng, base_std));
                layer.w2.push_back(init({cfg_.expert_hidden_dim, cfg_.embed_dim}, rng, out_std));
            }
        }
        final_norm_ = Tensor::full({cfg_.embed_dim}, 1.0);
        unembed_ = init({cfg_.embed_dim, cfg_.vocab_size}, rng, base_std);
    }

    MoEModel(const MoEModel&) = delete;
    MoEModel& operator=(const MoEModel&) = delete;
    MoEModel(MoEModel&&) = default;
    MoEModel& operator=(MoEModel&&) = default;

    MoEModel clone() const {
        MoEModel copy(cfg_);
        auto src = parameters_const();
        auto dst = copy.parameters();
        for (size_t i = 0; i < src.size(); ++i) dst[i]->values() = src[i]->values();
        copy.adam_ = adam_;
        return copy;
    }

    const ModelConfig& config() const { return cfg_; }
    const AdamConfig& adam() const { return adam_; }
    void set_adam(const AdamConfig& a) { adam_ = a; }

    // Parameters in checkpoint declaration order.
    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out;
        out.push_back(&tok_emb_);
        out.push_back(&pos_emb_);
        for (auto& layer : layers_) {
            out.push_back(&layer.norm1);
            out.push_back(&layer.wq);
            out.push_back(&layer.wk);
            out.push_back(&layer.wv);
            out.push_back(&layer.wo);
            out.push_back(&layer.norm2);
            out.push_back(&layer.router);
            for (int64_t e = 0; e < cfg_.num_experts; ++e) {
                out.push_back(&layer.w1[static_cast<size_t>(e)]);
                out.push_back(&layer.w2[static_cast<size_t>(e)]);
            }
        }
        out.push_back(&final_norm_);
        out.push_back(&unembed_);
        return out;
    }

    std::vector<const Tensor*> parameters_const() const {
        auto mutable_params = const_cast<MoEModel*>(this)->parameters();
        return {mutable_params.begin(), mutable_params.end()};
    }

    Tensor& token_embedding() { return tok_emb_; }
    Tensor& unembedding() { return unembed_; }
    const Tensor& router_of(int layer) const { return layers_.at(static_cast<size_t>(layer)).router; }
    Tensor& expert_w1(int layer, int expert) { return layers_.at(static_cast<size_t>(layer)).w1.at(static_cast<size_t>(expert)); }
    Tensor& expert_w2(int layer, int expert) { return layers_.at(static_cast<size_t>(layer)).w2.at(static_cast<size_t>(expert)); }

    // Hash of the config block plus all parameter bytes; identifies a
    // checkpoint for artifact compatibility checks.
    std::string fingerprint() const {
        Fnv1a h;
        h.update(config_block().dump());
        for (const Tensor* p : parameters_const()) h.update(p->values());
        return h.hex();
    }

    // Token embeddings only (no positional part): the per-token vectors
    // whose loss gradients drive attribution.
    Tensor embed(const std::vector<int>& tokens) const { return gather_rows(tok_emb_, tokens); }

    ForwardOutput forward(const std::vector<int>& tokens, const SteeringPlan* steering = nullptr,
                          PassCounters* counters = nullptr, BalanceProbe* probe = nullptr) const {
        return forward_embedded(embed(tokens), steering, counters, probe);
    }

    ForwardOutput forward_embedded(const Tensor& x_tok, const SteeringPlan* steering = nullptr,
                                   PassCounters* counters = nullptr, BalanceProbe* probe = nullptr) const {
        require(x_tok.rank() == 2 && x_tok.dim(1) == cfg_.embed_dim, ErrorKind::Dimension,
                "embedded input must be T x embed_dim, got " + shape_string(x_tok.shape()));
        int64_t t_len = x_tok.dim(0);
        require(t_len >= 1, ErrorKind::Domain, "empty sequence");
        require(t_len <= cfg_.max_seq_len, ErrorKind::Length,
                "sequence length " + std::to_string(t_len) + " exceeds max_seq_len " +
                    std::to_string(cfg_.max_seq_len));
        bool steer = false;
        if (steering) {
            steering->validate(cfg_);
            steer = !steering->identity();
        }
        if (counters) counters->forwards += 1;

        ForwardOutput out;
        Tensor x = add(x_tok, slice_rows(pos_emb_, 0, t_len));
        for (size_t li = 0; li < layers_.size(); ++li) {
            const Layer& layer = layers_[li];
            // token mixer
            Tensor h = rms_norm(x, layer.norm1);
            Tensor mixed;
            if (cfg_.mixer_mode == MixerMode::Attention) {
                Tensor q = matmul(h, layer.wq);
                Tensor k = matmul(h, layer.wk);
                Tensor v = matmul(h, layer.wv);
                Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(cfg_.embed_dim)));
                mixed = matmul(matmul(causal_row_softmax(scores), v), layer.wo);
            } else {
                mixed = matmul(matmul(causal_mean_matrix(t_len), h), layer.wo);
            }
            x = add(x, mixed);

            // sparse MoE feed-forward
            Tensor h2 = rms_norm(x, layer.norm2);
            Tensor router_logits = matmul(h2, transpose(layer.router));  // T x N
            Tensor probe_acc;
            std::vector<double> usage;
            if (probe) usage.assign(static_cast<size_t>(cfg_.num_experts), 0.0);

            std::vector<Tensor> moe_rows;
            moe_rows.reserve(static_cast<size_t>(t_len));
            for (int64_t t = 0; t < t_len; ++t) {
                Tensor lrow = row(router_logits, t);
                RoutingDecision dec;
                Tensor gates;
                if (!steer) {
                    dec = route_from_logits(std::span<const double>(lrow.values()), static_cast<int>(cfg_.top_k),
                                            cfg_.router_mode);
                    if (cfg_.router_mode == RouterMode::PostSoftmax) {
                        gates = select(softmax(lrow), dec.experts);
                    } else {
                        gates = softmax(select(lrow, dec.experts));
                    }
                } else {
                    dec = route_from_logits(std::span<const double>(lrow.values()), static_cast<int>(cfg_.top_k),
                                            cfg_.router_mode, &steering->multipliers[li], steering->point);
                    if (counters) counters->steering_multiplies += 1;
                    gates = Tensor::from({1, static_cast<int64_t>(dec.weights.size())}, dec.weights);
                }
                dec.layer = static_cast<int>(li);
                dec.position = static_cast<int>(t);
                if (probe) {
                    Tensor p_full = softmax(lrow);
                    probe_acc = t == 0 ? p_full : add(probe_acc, p_full);
                    for (int e : dec.experts) usage[static_cast<size_t>(e)] += 1.0;
                }

                Tensor xrow = row(h2, t);
                Tensor acc;
                for (size_t j = 0; j < dec.experts.size(); ++j) {
                    int e = dec.experts[j];
                    if (counters) counters->expert_evals += 1;
                    Tensor expert_out =
                        matmul(silu(matmul(xrow, layer.w1[static_cast<size_t>(e)])), layer.w2[static_cast<size_t>(e)]);
                    Tensor contrib = mul_scalar(element(gates, static_cast<int>(j)), expert_out);
                    acc = j == 0 ? contrib : add(acc, contrib);
                }
                moe_rows.push_back(std::move(acc));
                out.decisions.push_back(std::move(dec));
            }
            x = add(x, stack_rows(moe_rows));
            if (probe) {
                probe->mean_probs.push_back(scale(probe_acc, 1.0 / static_cast<double>(t_len)));
                for (double& u : usage) u /= static_cast<double>(t_len);
                probe->usage.push_back(std::move(usage));
            }
        }
        out.logits = matmul(rms_norm(x, final_norm_), unembed_);
        return out;
    }

    // The spec-level route operation on a single token representation.
    RoutingDecision route(const Tensor& x, int layer, const std::vector<double>* multipliers = nullptr,
                          SteerPoint point = SteerPoint::GateWeights) const {
        require(layer >= 0 && layer < static_cast<int>(layers_.size()), ErrorKind::Index,
                "layer " + std::to_string(layer) + " out of range");
        require(x.numel() == cfg_.embed_dim, ErrorKind::Dimension,
                "route input must have embed_dim elements, got " + shape_string(x.shape()));
        Tensor as_row = Tensor::from({1, cfg_.embed_dim}, x.values());
        Tensor logits = matmul(as_row, transpose(layers_[static_cast<size_t>(layer)].router));
        RoutingDecision dec = route_from_logits(std::span<const double>(logits.values()),
                                                static_cast<int>(cfg_.top_k), cfg_.router_mode, multipliers, point);
        dec.layer = layer;
        return dec;
    }

    // Weighted aggregation of the selected experts for a single token.
    Tensor moe_forward(const Tensor& x, int layer, const RoutingDecision& decision,
                       PassCounters* counters = nullptr) const {
        require(layer >= 0 && layer < static_cast<int>(layers_.size()), ErrorKind::Index,
                "layer " + std::to_string(layer) + " out of range");
        require(x.numel() == cfg_.embed_dim, ErrorKind::Dimension,
                "moe_forward input must have embed_dim elements");
        const Layer& lp = layers_[static_cast<size_t>(layer)];
        Tensor as_row = Tensor::from({1, cfg_.embed_dim}, x.values());
        Tensor acc;
        for (size_t j = 0; j < decision.experts.size(); ++j) {
            int e = decision.experts[j];
            require(e >= 0 && e < static_cast<int>(cfg_.num_experts), ErrorKind::Index, "expert id out of range");
            if (counters) counters->expert_evals += 1;
            Tensor expert_out =
                matmul(silu(matmul(as_row, lp.w1[static_cast<size_t>(e)])), lp.w2[static_cast<size_t>(e)]);
            Tensor contrib = scale(expert_out, decision.weights[j]);
            acc = j == 0 ? contrib : add(acc, contrib);
        }
        return acc;
    }

    // Mean next-token cross-entropy. `mask`, when given, has one entry per
    // sequence position and marks target positions whose prediction loss is
    // included; position 0 is never a target.
    Tensor sequence_loss(const std::vector<int>& tokens, const std::vector<bool>* mask = nullptr,
                         PassCounters* counters = nullptr, const SteeringPlan* steering = nullptr) const {
        require(tokens.size() >= 2, ErrorKind::Domain, "sequence_loss needs at least 2 tokens");
        ForwardOutput out = forward(tokens, steering, counters);
        return loss_from_logits(out.logits, tokens, mask);
    }

    static Tensor loss_from_logits(const Tensor& logits, const std::vector<int>& tokens,
                                   const std::vector<bool>* mask = nullptr) {
        int64_t t_len = static_cast<int64_t>(tokens.size());
        require(logits.dim(0) == t_len, ErrorKind::Dimension, "logit rows do not match token count");
        if (mask) {
            require(static_cast<int64_t>(mask->size()) == t_len, ErrorKind::Dimension,
                    "mask length does not match token count");
        }
        std::vector<int> targets(tokens.begin() + 1, tokens.end());
        std::vector<bool> include(targets.size(), true);
        if (mask) {
            for (size_t i = 0; i < targets.size(); ++i) include[i] = (*mask)[i + 1];
        }
        return cross_entropy_masked(slice_rows(logits, 0, t_len - 1), targets, include);
    }

    nlohmann::json config_block() const {
        return {{"model", cfg_.to_json()}, {"optimizer", adam_.to_json()}};
    }

private:
    struct Layer {
        Tensor norm1, wq, wk, wv, wo, norm2, router;
        std::vector<Tensor> w1, w2;
    };

    static Tensor init(std::vector<int64_t> shape, Rng& rng, double std_dev) {
        Tensor t = Tensor::zeros(std::move(shape));
        for (double& v : t.values()) v = std_dev * rng.normal();
        return t;
    }

    static Tensor causal_mean_matrix(int64_t n) {
        Tensor m = Tensor::zeros({n, n});
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j <= i; ++j) m.values()[static_cast<size_t>(i * n + j)] = 1.0 / static_cast<double>(i + 1);
        return m;
    }

    ModelConfig cfg_;
    AdamConfig adam_;
    Tensor tok_emb_, pos_emb_;
    std::vector<Layer> layers_;
    Tensor final_norm_, unembed_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    int64_t steps = 300;
    int64_t batch_size = 4;
    AdamConfig adam;
    double balance_weight = 0.0;  // optional load-balance penalty; 0 disables

    nlohmann::json to_json() const {
        return {{"steps", steps},
                {"batch_size", batch_size},
                {"adam", adam.to_json()},
                {"balance_weight", balance_weight}};
    }
    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig t;
        t.steps = j.at("steps").get<int64_t>();
        t.batch_size = j.at("batch_size").get<int64_t>();
        t.adam = AdamConfig::from_json(j.at("adam"));
        t.balance_weight = j.at("balance_weight").get<double>();
        return t;
    }
};

struct TrainResult {
    std::vector<double> loss_curve;  // optimized objective per step
};

inline TrainResult train(MoEModel& model, const std::vector<std::vector<int>>& sequences, const TrainConfig& tc,
                         PassCounters* counters = nullptr) {
    require(!sequences.empty(), ErrorKind::Config, "training corpus is empty");
    for (const auto& s : sequences)
        require(s.size() >= 2, ErrorKind::Domain, "training sequences need at least 2 tokens");
    model.set_adam(tc.adam);

    auto params = model.parameters();
    std::vector<std::vector<double>> m_state(params.size()), v_state(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        m_state[i].assign(params[i]->values().size(), 0.0);
        v_state[i].assign(params[i]->values().size(), 0.0);
    }

    Rng order_rng(mix_seed(model.config().seed, 0x7261696eULL));
    std::vector<size_t> order(sequences.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);
    size_t cursor = 0;

    TrainResult result;
    double n_experts = static_cast<double>(model.config().num_experts);
    for (int64_t step = 0; step < tc.steps; ++step) {
        Tape tape;
        for (Tensor* p : params) tape.watch(*p);

        Tensor objective;
        int64_t batch = std::min<int64_t>(tc.batch_size, static_cast<int64_t>(sequences.size()));
        try {
            Tensor total;
            Tensor balance_total;
            for (int64_t b = 0; b < batch; ++b) {
                if (cursor >= order.size()) {
                    order_rng.shuffle(order);
                    cursor = 0;
                }
                const auto& tokens = sequences[order[cursor++]];
                BalanceProbe probe;
                ForwardOutput out = model.forward(tokens, nullptr, counters, tc.balance_weight > 0 ? &probe : nullptr);
                Tensor loss = MoEModel::loss_from_logits(out.logits, tokens);
                total = b == 0 ? loss : add(total, loss);
                if (tc.balance_weight > 0) {
                    Tensor layer_sum;
                    for (size_t li = 0; li < probe.mean_probs.size(); ++li) {
                        Tensor usage = Tensor::from({1, static_cast<int64_t>(probe.usage[li].size())}, probe.usage[li]);
                        Tensor term = scale(sum(mul(probe.mean_probs[li], usage)), n_experts);
                        layer_sum = li == 0 ? term : add(layer_sum, term);
                    }
                    Tensor seq_balance = scale(layer_sum, 1.0 / static_cast<double>(probe.mean_probs.size()));
                    balance_total = b == 0 ? seq_balance : add(balance_total, seq_balance);
                }
            }
            objective = scale(total, 1.0 / static_cast<double>(batch));
            if (tc.balance_weight > 0) {
                objective = add(objective, scale(balance_total, tc.balance_weight / static_cast<double>(batch)));
            }
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::Numeric) {
                fail(ErrorKind::Training, "loss diverged at step " + std::to_string(step) + ": " + e.what());
            }
            throw;
        }

        double loss_value = objective.item();
        if (!std::isfinite(loss_value)) {
            fail(ErrorKind::Training, "loss diverged (non-finite) at step " + std::to_string(step));
        }
        result.loss_curve.push_back(loss_value);

        std::vector<Tensor> leaves;
        leaves.reserve(params.size());
        for (Tensor* p : params) leaves.push_back(*p);
        GradientResult grads = tape.gradients(objective, leaves);
        if (counters) counters->backwards += 1;

        double t_adam = static_cast<double>(step + 1);
        double bc1 = 1.0 - std::pow(tc.adam.beta1, t_adam);
        double bc2 = 1.0 - std::pow(tc.adam.beta2, t_adam);
        for (size_t i = 0; i < params.size(); ++i) {
            auto& vals = params[i]->values();
            const auto& g = grads.grads[i].values();
            for (size_t j = 0; j < vals.size(); ++j) {
                m_state[i][j] = tc.adam.beta1 * m_state[i][j] + (1.0 - tc.adam.beta1) * g[j];
                v_state[i][j] = tc.adam.beta2 * v_state[i][j] + (1.0 - tc.adam.beta2) * g[j] * g[j];
                double update = tc.adam.lr * (m_state[i][j] / bc1) / (std::sqrt(v_state[i][j] / bc2) + tc.adam.eps);
                vals[j] -= update;
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, format version, JSON config block, then raw parameter
// blocks in declaration order as 64-bit little-endian floats.
// ---------------------------------------------------------------------------

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

constexpr char kCheckpointMagic[8] = {'D', 'S', 'M', 'O', 'E', 'C', 'P', 'T'};
constexpr uint32_t kCheckpointVersion = 1;

inline void write_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); }
inline void write_u64(std::ostream& out, uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); }
inline uint32_t read_u32(std::istream& in) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    require(in.good(), ErrorKind::Format, "checkpoint truncated");
    return v;
}
inline uint64_t read_u64(std::istream& in) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    require(in.good(), ErrorKind::Format, "checkpoint truncated");
    return v;
}

}  // namespace detail

inline void save_checkpoint(const MoEModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::Io, "cannot open '" + path + "' for writing");
    out.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    detail::write_u32(out, detail::kCheckpointVersion);
    std::string cfg = model.config_block().dump();
    detail::write_u64(out, cfg.size());
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    auto params = model.parameters_const();
    detail::write_u64(out, params.size());
    for (const Tensor* p : params) {
        detail::write_u64(out, p->values().size());
        out.write(reinterpret_cast<const char*>(p->values().data()),
                  static_cast<std::streamsize>(p->values().size() * sizeof(double)));
    }
    require(out.good(), ErrorKind::Io, "write to '" + path + "' failed");
}

inline MoEModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::Io, "cannot open '" + path + "' for reading");
    char magic[8] = {};
    in.read(magic, sizeof(magic));
    require(in.good() && std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) == 0, ErrorKind::Format,
            "bad checkpoint magic header");
    uint32_t version = detail::read_u32(in);
    require(version == detail::kCheckpointVersion, ErrorKind::Format,
            "unsupported checkpoint version " + std::to_string(version));
    uint64_t cfg_len = detail::read_u64(in);
    std::string cfg_text(cfg_len, '\0');
    in.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len));
    require(in.good(), ErrorKind::Format, "checkpoint truncated in config block");
    nlohmann::json block;
    try {
        block = nlohmann::json::parse(cfg_text);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, std::string("checkpoint config block is not valid JSON: ") + e.what());
    }
    MoEModel model(ModelConfig::from_json(block.at("model")));
    model.set_adam(AdamConfig::from_json(block.at("optimizer")));

    uint64_t n_params = detail::read_u64(in);
    auto params = model.parameters();
    require(n_params == params.size(), ErrorKind::Format,
            "checkpoint has " + std::to_string(n_params) + " parameter blocks, expected " +
                std::to_string(params.size()));
    for (Tensor* p : params) {
        uint64_t n = detail::read_u64(in);
        require(n == p->values().size(), ErrorKind::Format, "parameter block size mismatch");
        in.read(reinterpret_cast<char*>(p->values().data()), static_cast<std::streamsize>(n * sizeof(double)));
        require(in.good(), ErrorKind::Format, "checkpoint truncated in parameter data");
    }
    in.peek();
    require(in.eof(), ErrorKind::Format, "trailing bytes after parameter data");
    return model;
}

}  // namespace dsmoe
