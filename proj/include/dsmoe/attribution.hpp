// SPDX-License-Identifier: Apache-2.0
//
// Domain-specific token identification. Importance scores are the L2 norm
// of the Hadamard product between a token's embedding and the loss gradient
// at that embedding, computed in one forward plus one backward pass. The
// brute-force leave-one-out deltas serve as the independent oracle the
// gradient scores approximate.

#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsmoe/common.hpp"
#include "dsmoe/model.hpp"
#include "dsmoe/tensor.hpp"

namespace dsmoe {

enum class TokenLabel : uint8_t { Common, Specific };

// Per-position importance scores for one sequence. Positions outside the
// scored mask carry a zero score and are excluded from thresholding.
struct ImportanceVector {
    std::string id;
    std::vector<double> scores;  // one per position, >= 0
    std::vector<bool> mask;      // scored positions

    size_t scored_count() const {
        size_t n = 0;
        for (bool b : mask) n += b ? 1 : 0;
        return n;
    }
};

// Common/Specific labels under an empirical quantile threshold. Ties at the
// threshold classify as Common, which keeps the Specific set conservative.
// The epsilon of the underlying removal-based definitions has no operational
// role here: the quantile rule fixes the Specific fraction directly.
struct TokenClassification {
    std::string id;
    std::vector<TokenLabel> labels;  // meaningful at masked positions
    std::vector<bool> mask;
    double threshold = 0.0;
    double level = 0.0;  // the chosen p
};

// L2 norm of the Hadamard product between an embedding vector and its loss
// gradient: the per-token importance score.
inline double grad_input_norm(std::span<const double> embedding, std::span<const double> gradient) {
    require(embedding.size() == gradient.size(), ErrorKind::Dimension,
            "embedding and gradient lengths differ");
    double acc = 0.0;
    for (size_t j = 0; j < embedding.size(); ++j) {
        double prod = embedding[j] * gradient[j];
        acc += prod * prod;
    }
    return std::sqrt(acc);
}

// Gradient-times-input scores. `mask` marks the positions that are scored
// and whose next-token prediction terms form the loss (question positions by
// default); it must contain at least one valid loss target.
inline ImportanceVector token_importance(const MoEModel& model, const std::vector<int>& tokens,
                                         const std::vector<bool>& mask, PassCounters* counters = nullptr,
                                         const std::string& id = "") {
    require(tokens.size() >= 2, ErrorKind::Domain, "token_importance needs at least 2 tokens");
    require(mask.size() == tokens.size(), ErrorKind::Dimension, "mask length does not match token count");

    Tape tape;
    Tensor x_tok = model.embed(tokens);
    tape.watch(x_tok);
    ForwardOutput out = model.forward_embedded(x_tok, nullptr, counters);
    Tensor loss = MoEModel::loss_from_logits(out.logits, tokens, &mask);
    GradientResult grads = tape.gradients(loss, {x_tok});
    if (counters) counters->backwards += 1;

    size_t d = static_cast<size_t>(model.config().embed_dim);
    ImportanceVector iv;
    iv.id = id;
    iv.mask = mask;
    iv.scores.assign(tokens.size(), 0.0);
    const auto& e = x_tok.values();
    const auto& g = grads.grads[0].values();
    for (size_t t = 0; t < tokens.size(); ++t) {
        if (!mask[t]) continue;
        iv.scores[t] = grad_input_norm(std::span<const double>(e.data() + t * d, d),
                                       std::span<const double>(g.data() + t * d, d));
    }
    return iv;
}

// Nearest-rank empirical quantile: the smallest score value t such that at
// least (1 - p) of the scored positions satisfy score <= t. p = 1 yields a
// threshold below the minimum (everything Specific).
inline double domain_threshold(const ImportanceVector& scores, double p) {
    require(p >= 0.0 && p <= 1.0, ErrorKind::Domain, "level p must lie in [0, 1]");
    std::vector<double> pool;
    for (size_t t = 0; t < scores.scores.size(); ++t) {
        if (scores.mask[t]) pool.push_back(scores.scores[t]);
    }
    require(!pool.empty(), ErrorKind::Domain, "no scored positions to threshold");
    std::sort(pool.begin(), pool.end());
    double total = static_cast<double>(pool.size());
    auto rank = static_cast<int64_t>(std::ceil(total * (1.0 - p) - 1e-9));
    rank = std::clamp<int64_t>(rank, 0, static_cast<int64_t>(pool.size()));
    if (rank == 0) {
        return std::nextafter(pool.front(), -std::numeric_limits<double>::infinity());
    }
    return pool[static_cast<size_t>(rank - 1)];
}

inline TokenClassification classify_tokens(const ImportanceVector& scores, double threshold, double level) {
    TokenClassification tc;
    tc.id = scores.id;
    tc.mask = scores.mask;
    tc.threshold = threshold;
    tc.level = level;
    tc.labels.assign(scores.scores.size(), TokenLabel::Common);
    for (size_t t = 0; t < scores.scores.size(); ++t) {
        if (scores.mask[t] && scores.scores[t] > threshold) tc.labels[t] = TokenLabel::Specific;
    }
    return tc;
}

// |metric(S) - metric(S with position i removed)| for every masked position.
// Removal is deletion, so later positions shift left; a removal that leaves
// no loss target is recorded as undefined. Costs one forward pass per masked
// position beyond the baseline.
inline std::vector<std::optional<double>> loo_deltas(const MoEModel& model, const std::vector<int>& tokens,
                                                     const std::vector<bool>& mask,
                                                     PassCounters* counters = nullptr) {
    require(tokens.size() >= 2, ErrorKind::Domain, "loo_deltas needs at least 2 tokens");
    require(mask.size() == tokens.size(), ErrorKind::Dimension, "mask length does not match token count");

    double baseline = model.sequence_loss(tokens, &mask, counters).item();
    std::vector<std::optional<double>> deltas(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (!mask[i]) continue;
        std::vector<int> shorter;
        std::vector<bool> shorter_mask;
        shorter.reserve(tokens.size() - 1);
        for (size_t t = 0; t < tokens.size(); ++t) {
            if (t == i) continue;
            shorter.push_back(tokens[t]);
            shorter_mask.push_back(mask[t]);
        }
        bool has_target = false;
        for (size_t t = 1; t < shorter_mask.size(); ++t) has_target |= shorter_mask[t];
        if (shorter.size() < 2 || !has_target) continue;  // undefined for this position
        double metric = model.sequence_loss(shorter, &shorter_mask, counters).item();
        deltas[i] = std::abs(baseline - metric);
    }
    return deltas;
}

// Spearman rank correlation with average ranks for ties; constant inputs
// have no defined ranking and return nullopt.
inline std::optional<double> rank_correlation(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size(), ErrorKind::Dimension, "rank_correlation needs equal-length inputs");
    require(a.size() >= 3, ErrorKind::Domain, "rank_correlation needs at least 3 observations");

    auto ranks = [](const std::vector<double>& v) {
        std::vector<size_t> idx(v.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](size_t x, size_t y) { return v[x] < v[y]; });
        std::vector<double> r(v.size());
        size_t i = 0;
        while (i < idx.size()) {
            size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (size_t t = i; t <= j; ++t) r[idx[t]] = avg;
            i = j + 1;
        }
        return r;
    };

    std::vector<double> ra = ranks(a), rb = ranks(b);
    double n = static_cast<double>(a.size());
    double mean = (n + 1.0) / 2.0;
    double cov = 0, var_a = 0, var_b = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        cov += (ra[i] - mean) * (rb[i] - mean);
        var_a += (ra[i] - mean) * (ra[i] - mean);
        var_b += (rb[i] - mean) * (rb[i] - mean);
    }
    if (var_a == 0.0 || var_b == 0.0) return std::nullopt;
    return cov / std::sqrt(var_a * var_b);
}

// ---------------------------------------------------------------------------
// JSONL export/import of importance + classification records:
//   {"id", "scores": [...], "labels": [...], "p", "t_p", "mask": [...]}
// ---------------------------------------------------------------------------

struct ImportanceRecord {
    ImportanceVector scores;
    TokenClassification classification;
};

inline void save_importance_jsonl(const std::vector<ImportanceRecord>& records, const std::string& path) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::Io, "cannot open '" + path + "' for writing");
    for (const auto& rec : records) {
        nlohmann::json labels = nlohmann::json::array();
        for (size_t t = 0; t < rec.classification.labels.size(); ++t) {
            labels.push_back(rec.classification.labels[t] == TokenLabel::Specific ? "S" : "C");
        }
        nlohmann::json mask = nlohmann::json::array();
        for (bool b : rec.scores.mask) mask.push_back(b);
        nlohmann::json j = {{"id", rec.scores.id},
                            {"scores", rec.scores.scores},
                            {"labels", labels},
                            {"p", rec.classification.level},
                            {"t_p", rec.classification.threshold},
                            {"mask", mask}};
        out << j.dump() << "\n";
    }
}

inline std::vector<ImportanceRecord> load_importance_jsonl(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Io, "cannot open '" + path + "' for reading");
    std::vector<ImportanceRecord> records;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::Schema, "line " + std::to_string(line_no) + ": invalid JSON (" + e.what() + ")");
        }
        ImportanceRecord rec;
        try {
            rec.scores.id = j.at("id").get<std::string>();
            rec.scores.scores = j.at("scores").get<std::vector<double>>();
            rec.scores.mask = j.at("mask").get<std::vector<bool>>();
            rec.classification.id = rec.scores.id;
            rec.classification.mask = rec.scores.mask;
            rec.classification.level = j.at("p").get<double>();
            rec.classification.threshold = j.at("t_p").get<double>();
            for (const auto& label : j.at("labels")) {
                rec.classification.labels.push_back(label.get<std::string>() == "S" ? TokenLabel::Specific
                                                                                    : TokenLabel::Common);
            }
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::Schema, "line " + std::to_string(line_no) + ": " + e.what());
        }
        require(rec.scores.scores.size() == rec.scores.mask.size() &&
                    rec.scores.scores.size() == rec.classification.labels.size(),
                ErrorKind::Schema, "line " + std::to_string(line_no) + ": inconsistent array lengths");
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace dsmoe
