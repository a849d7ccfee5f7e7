// SPDX-License-Identifier: Apache-2.0
//
// Aggregates routing traces and token classifications into per-(layer,
// expert) domain-specific scores, and selects the global top-K expert set.
// Traces round-trip through JSONL so externally produced routing data can be
// profiled with the same machinery.

#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsmoe/attribution.hpp"
#include "dsmoe/common.hpp"
#include "dsmoe/model.hpp"

namespace dsmoe {

// A sequence as seen by the identification stages: id, domain label, and the
// question tokens only. Answer tokens are deliberately absent from this
// view, so attribution and profiling cannot read them.
struct QuestionRecord {
    std::string id;
    std::string domain;
    std::vector<int> tokens;
};

struct TraceRecord {
    std::string id;
    std::string domain;
    std::vector<RoutingDecision> decisions;

    bool operator==(const TraceRecord&) const = default;
};

struct RoutingTrace {
    std::string fingerprint;
    RouterMode mode = RouterMode::PostSoftmax;
    int64_t layers = 0;
    int64_t experts = 0;
    int64_t k = 0;
    std::vector<TraceRecord> records;

    bool operator==(const RoutingTrace&) const = default;
};

// Runs the unsteered model over same-domain question sequences and records
// every routing decision.
inline RoutingTrace collect_trace(const MoEModel& model, const std::vector<QuestionRecord>& sequences,
                                  PassCounters* counters = nullptr) {
    require(!sequences.empty(), ErrorKind::Contract, "collect_trace needs at least one sequence");
    for (const auto& s : sequences) {
        require(s.domain == sequences.front().domain, ErrorKind::Contract,
                "collect_trace requires a single domain; got '" + sequences.front().domain + "' and '" + s.domain +
                    "'");
    }
    RoutingTrace trace;
    trace.fingerprint = model.fingerprint();
    trace.mode = model.config().router_mode;
    trace.layers = model.config().num_layers;
    trace.experts = model.config().num_experts;
    trace.k = model.config().top_k;
    for (const auto& s : sequences) {
        ForwardOutput out = model.forward(s.tokens, nullptr, counters);
        trace.records.push_back(TraceRecord{s.id, s.domain, std::move(out.decisions)});
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Trace JSONL: header line {"model", "mode", "layers", "experts", "k"},
// then one line per sequence {"id", "domain", "decisions": [[layer,
// position, [ids], [weights]], ...]}.
// ---------------------------------------------------------------------------

inline void export_trace(const RoutingTrace& trace, const std::string& path) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::Io, "cannot open '" + path + "' for writing");
    nlohmann::json header = {{"model", trace.fingerprint},
                             {"mode", to_string(trace.mode)},
                             {"layers", trace.layers},
                             {"experts", trace.experts},
                             {"k", trace.k}};
    out << header.dump() << "\n";
    for (const auto& rec : trace.records) {
        nlohmann::json decisions = nlohmann::json::array();
        for (const auto& d : rec.decisions) {
            decisions.push_back(nlohmann::json::array({d.layer, d.position, d.experts, d.weights}));
        }
        nlohmann::json j = {{"id", rec.id}, {"domain", rec.domain}, {"decisions", decisions}};
        out << j.dump() << "\n";
    }
}

inline RoutingTrace import_trace(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Io, "cannot open '" + path + "' for reading");
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorKind::Format, "trace file is empty");
    RoutingTrace trace;
    try {
        nlohmann::json header = nlohmann::json::parse(line);
        trace.fingerprint = header.at("model").get<std::string>();
        trace.mode = router_mode_from_string(header.at("mode").get<std::string>());
        trace.layers = header.at("layers").get<int64_t>();
        trace.experts = header.at("experts").get<int64_t>();
        trace.k = header.at("k").get<int64_t>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Schema, std::string("trace header: ") + e.what());
    }
    require(trace.layers >= 1 && trace.experts >= 1 && trace.k >= 1 && trace.k <= trace.experts,
            ErrorKind::Validation, "trace header shape is invalid");

    int record_index = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ++record_index;
        std::string where = "trace record " + std::to_string(record_index);
        TraceRecord rec;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            rec.id = j.at("id").get<std::string>();
            rec.domain = j.at("domain").get<std::string>();
            for (const auto& dj : j.at("decisions")) {
                RoutingDecision d;
                d.layer = dj.at(0).get<int>();
                d.position = dj.at(1).get<int>();
                d.experts = dj.at(2).get<std::vector<int>>();
                d.weights = dj.at(3).get<std::vector<double>>();
                rec.decisions.push_back(std::move(d));
            }
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::Schema, where + ": " + e.what());
        }

        // invariant validation
        std::map<std::pair<int, int>, int> seen;  // (layer, position) -> count
        int max_position = -1;
        for (const auto& d : rec.decisions) {
            require(d.layer >= 0 && d.layer < trace.layers, ErrorKind::Validation, where + ": layer out of range");
            require(d.position >= 0, ErrorKind::Validation, where + ": negative position");
            require(static_cast<int64_t>(d.experts.size()) == trace.k, ErrorKind::Validation,
                    where + ": decision has k=" + std::to_string(d.experts.size()) + ", trace header has k=" +
                        std::to_string(trace.k));
            require(d.weights.size() == d.experts.size(), ErrorKind::Validation,
                    where + ": ids and weights lengths differ");
            std::vector<int> sorted_ids = d.experts;
            std::sort(sorted_ids.begin(), sorted_ids.end());
            require(std::adjacent_find(sorted_ids.begin(), sorted_ids.end()) == sorted_ids.end(),
                    ErrorKind::Validation, where + ": duplicate expert ids in a decision");
            double total = 0.0;
            for (int e : d.experts)
                require(e >= 0 && e < trace.experts, ErrorKind::Validation, where + ": expert id out of range");
            for (double w : d.weights) {
                require(std::isfinite(w) && w >= 0.0, ErrorKind::Validation, where + ": gate weights must be >= 0");
                total += w;
            }
            if (trace.mode == RouterMode::PreSoftmax) {
                require(std::abs(total - 1.0) <= 1e-9, ErrorKind::Validation,
                        where + ": pre-softmax weights sum to " + format_double(total));
            }
            seen[{d.layer, d.position}] += 1;
            max_position = std::max(max_position, d.position);
        }
        for (const auto& [key, count] : seen) {
            require(count == 1, ErrorKind::Validation, where + ": repeated (layer, position) decision");
        }
        for (int64_t l = 0; l < trace.layers; ++l) {
            for (int pos = 0; pos <= max_position; ++pos) {
                require(seen.count({static_cast<int>(l), pos}) == 1, ErrorKind::Validation,
                        where + ": missing decision for layer " + std::to_string(l) + " position " +
                            std::to_string(pos));
            }
        }
        trace.records.push_back(std::move(rec));
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Expert statistics and scores
// ---------------------------------------------------------------------------

struct ExpertCounts {
    int64_t activation = 0;
    int64_t specific = 0;
    int64_t common = 0;

    bool operator==(const ExpertCounts&) const = default;
};

// Counting monoid over routing events at classified positions. Merging
// partial aggregations is exact, so partitioned aggregation equals the
// sequential result.
struct ExpertStats {
    int64_t layers = 0;
    int64_t experts = 0;
    int64_t k = 0;
    int64_t total_positions = 0;  // classified positions across sequences
    std::vector<std::vector<ExpertCounts>> counts;  // [layer][expert]

    static ExpertStats empty(int64_t layers, int64_t experts, int64_t k) {
        ExpertStats s;
        s.layers = layers;
        s.experts = experts;
        s.k = k;
        s.counts.assign(static_cast<size_t>(layers), std::vector<ExpertCounts>(static_cast<size_t>(experts)));
        return s;
    }

    void merge(const ExpertStats& other) {
        require(layers == other.layers && experts == other.experts && k == other.k, ErrorKind::Contract,
                "cannot merge stats with different shapes");
        total_positions += other.total_positions;
        for (size_t l = 0; l < counts.size(); ++l) {
            for (size_t e = 0; e < counts[l].size(); ++e) {
                counts[l][e].activation += other.counts[l][e].activation;
                counts[l][e].specific += other.counts[l][e].specific;
                counts[l][e].common += other.counts[l][e].common;
            }
        }
    }

    bool operator==(const ExpertStats&) const = default;
};

// Joins a trace with token classifications by sequence id. Every routing
// event at a classified position increments the selected expert's counters;
// unclassified positions are skipped.
inline ExpertStats expert_stats(const RoutingTrace& trace, const std::vector<TokenClassification>& classifications) {
    std::map<std::string, const TokenClassification*> by_id;
    for (const auto& c : classifications) by_id[c.id] = &c;

    ExpertStats stats = ExpertStats::empty(trace.layers, trace.experts, trace.k);
    for (const auto& rec : trace.records) {
        auto it = by_id.find(rec.id);
        require(it != by_id.end(), ErrorKind::Join, "no classification for traced sequence '" + rec.id + "'");
        const TokenClassification& cls = *it->second;
        int max_position = -1;
        for (const auto& d : rec.decisions) max_position = std::max(max_position, d.position);
        require(static_cast<size_t>(max_position + 1) <= cls.labels.size(), ErrorKind::Join,
                "classification for '" + rec.id + "' is shorter than the traced sequence");
        for (const auto& d : rec.decisions) {
            size_t pos = static_cast<size_t>(d.position);
            if (!cls.mask[pos]) continue;
            bool specific = cls.labels[pos] == TokenLabel::Specific;
            for (int e : d.experts) {
                auto& c = stats.counts[static_cast<size_t>(d.layer)][static_cast<size_t>(e)];
                c.activation += 1;
                (specific ? c.specific : c.common) += 1;
            }
        }
        for (size_t pos = 0; pos < cls.mask.size() && pos <= static_cast<size_t>(max_position); ++pos) {
            if (cls.mask[pos]) stats.total_positions += 1;
        }
    }
    return stats;
}

// Domain-specific scores: activation frequency times the Specific-minus-
// Common preference gap. An expert never activated on the domain scores 0.
inline std::vector<std::vector<double>> expert_scores(const ExpertStats& stats) {
    std::vector<std::vector<double>> g(static_cast<size_t>(stats.layers),
                                       std::vector<double>(static_cast<size_t>(stats.experts), 0.0));
    double slots = static_cast<double>(stats.total_positions) * static_cast<double>(stats.k);
    if (slots == 0) return g;
    for (size_t l = 0; l < g.size(); ++l) {
        for (size_t e = 0; e < g[l].size(); ++e) {
            const ExpertCounts& c = stats.counts[l][e];
            if (c.activation == 0) continue;
            double p_domain = static_cast<double>(c.activation) / slots;
            double p_specific = static_cast<double>(c.specific) / static_cast<double>(c.activation);
            double p_common = static_cast<double>(c.common) / static_cast<double>(c.activation);
            g[l][e] = p_domain * (p_specific - p_common);
        }
    }
    return g;
}

// Scores with the selected set: the K highest-scoring (layer, expert) pairs
// globally, ties resolved toward (lower layer, lower expert).
struct ExpertScoreTable {
    std::vector<std::vector<double>> scores;  // [layer][expert]
    int64_t k_selected = 0;                   // K
    double gamma_k = 0.0;
    std::vector<std::pair<int, int>> selected;  // (layer, expert)
    std::string fingerprint;
    std::string domain;
};

inline ExpertScoreTable select_experts(const std::vector<std::vector<double>>& scores, int64_t K,
                                       const std::string& fingerprint = "", const std::string& domain = "") {
    int64_t total = 0;
    for (const auto& layer : scores) total += static_cast<int64_t>(layer.size());
    require(K >= 1 && K <= total, ErrorKind::Config,
            "K=" + std::to_string(K) + " out of range [1, " + std::to_string(total) + "]");

    struct Entry {
        double g;
        int layer;
        int expert;
    };
    std::vector<Entry> entries;
    entries.reserve(static_cast<size_t>(total));
    for (size_t l = 0; l < scores.size(); ++l)
        for (size_t e = 0; e < scores[l].size(); ++e)
            entries.push_back({scores[l][e], static_cast<int>(l), static_cast<int>(e)});
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.g != b.g) return a.g > b.g;
        if (a.layer != b.layer) return a.layer < b.layer;
        return a.expert < b.expert;
    });

    ExpertScoreTable table;
    table.scores = scores;
    table.k_selected = K;
    table.fingerprint = fingerprint;
    table.domain = domain;
    for (int64_t i = 0; i < K; ++i) table.selected.emplace_back(entries[static_cast<size_t>(i)].layer,
                                                                entries[static_cast<size_t>(i)].expert);
    table.gamma_k = entries[static_cast<size_t>(K - 1)].g;
    return table;
}

// Default K: about 1% of all (layer, expert) pairs, at least 1.
inline int64_t default_expert_count(const ModelConfig& cfg) {
    return std::max<int64_t>(1, std::llround(0.01 * static_cast<double>(cfg.num_layers * cfg.num_experts)));
}

// ---------------------------------------------------------------------------
// Score table JSON and heatmap CSV
// ---------------------------------------------------------------------------

inline void save_score_table(const ExpertScoreTable& table, const std::string& path) {
    nlohmann::json experts = nlohmann::json::array();
    for (const auto& [l, e] : table.selected) experts.push_back(nlohmann::json::array({l, e}));
    nlohmann::json j = {{"scores", table.scores},
                        {"k", table.k_selected},
                        {"gamma_k", table.gamma_k},
                        {"experts", experts},
                        {"fingerprint", table.fingerprint},
                        {"domain", table.domain}};
    std::ofstream out(path);
    require(out.good(), ErrorKind::Io, "cannot open '" + path + "' for writing");
    out << j.dump(2) << "\n";
}

inline ExpertScoreTable load_score_table(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Io, "cannot open '" + path + "' for reading");
    nlohmann::json j;
    try {
        in >> j;
        ExpertScoreTable table;
        table.scores = j.at("scores").get<std::vector<std::vector<double>>>();
        table.k_selected = j.at("k").get<int64_t>();
        table.gamma_k = j.at("gamma_k").get<double>();
        for (const auto& pair : j.at("experts")) {
            table.selected.emplace_back(pair.at(0).get<int>(), pair.at(1).get<int>());
        }
        table.fingerprint = j.at("fingerprint").get<std::string>();
        table.domain = j.at("domain").get<std::string>();
        return table;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Schema, "score table '" + path + "': " + e.what());
    }
}

// Plot-ready matrix: one row per layer, one column per expert.
inline void save_heatmap_csv(const std::vector<std::vector<double>>& scores, const std::string& path) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::Io, "cannot open '" + path + "' for writing");
    for (const auto& layer : scores) {
        for (size_t e = 0; e < layer.size(); ++e) {
            if (e) out << ",";
            out << format_double(layer[e]);
        }
        out << "\n";
    }
}

inline std::vector<std::vector<double>> load_heatmap_csv(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Io, "cannot open '" + path + "' for reading");
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        size_t start = 0;
        while (start <= line.size()) {
            size_t comma = line.find(',', start);
            std::string cell = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
            row.push_back(std::strtod(cell.c_str(), nullptr));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace dsmoe
