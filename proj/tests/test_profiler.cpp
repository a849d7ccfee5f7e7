// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>
#include <map>

#include "dsmoe/profiler.hpp"
#include "test_util.hpp"

using namespace dsmoe;
using dsmoe::testing::TempDir;

namespace {

ModelConfig tiny_config(uint64_t seed = 1) {
    ModelConfig cfg;
    cfg.vocab_size = 24;
    cfg.embed_dim = 16;
    cfg.num_layers = 2;
    cfg.num_experts = 4;
    cfg.top_k = 2;
    cfg.expert_hidden_dim = 24;
    cfg.max_seq_len = 16;
    cfg.seed = seed;
    return cfg;
}

std::vector<QuestionRecord> probe_sequences(int n, const std::string& domain = "arith") {
    std::vector<QuestionRecord> out;
    for (int i = 0; i < n; ++i) {
        out.push_back(QuestionRecord{"seq-" + std::to_string(i), domain,
                                     {2, 5, static_cast<int>(3 + i % 7), 9, 7, static_cast<int>(2 + i % 5)}});
    }
    return out;
}

TokenClassification trivial_classification(const std::string& id, size_t t_len,
                                           const std::vector<size_t>& specific_positions = {}) {
    TokenClassification tc;
    tc.id = id;
    tc.mask.assign(t_len, true);
    tc.labels.assign(t_len, TokenLabel::Common);
    for (size_t pos : specific_positions) tc.labels[pos] = TokenLabel::Specific;
    return tc;
}

// Craft a one-layer trace by hand.
RoutingTrace hand_trace(int64_t experts, int64_t k, const std::vector<std::vector<std::vector<int>>>& selections) {
    RoutingTrace trace;
    trace.fingerprint = "feedfacefeedface";
    trace.mode = RouterMode::PostSoftmax;
    trace.layers = 1;
    trace.experts = experts;
    trace.k = k;
    for (size_t s = 0; s < selections.size(); ++s) {
        TraceRecord rec;
        rec.id = "seq-" + std::to_string(s);
        rec.domain = "arith";
        for (size_t pos = 0; pos < selections[s].size(); ++pos) {
            RoutingDecision d;
            d.layer = 0;
            d.position = static_cast<int>(pos);
            d.experts = selections[s][pos];
            d.weights.assign(d.experts.size(), 0.25);
            rec.decisions.push_back(std::move(d));
        }
        trace.records.push_back(std::move(rec));
    }
    return trace;
}

}  // namespace

TEST(CollectTrace, OneDecisionPerLayerAndPosition) {
    MoEModel model(tiny_config());
    auto seqs = probe_sequences(1);
    RoutingTrace trace = collect_trace(model, seqs);
    ASSERT_EQ(trace.records.size(), 1u);
    EXPECT_EQ(trace.records[0].decisions.size(), seqs[0].tokens.size() * 2 /*layers*/);
    std::map<int, int> per_layer;
    for (const auto& d : trace.records[0].decisions) per_layer[d.layer]++;
    for (const auto& [layer, n] : per_layer) EXPECT_EQ(n, static_cast<int>(seqs[0].tokens.size()));
}

TEST(CollectTrace, Deterministic) {
    MoEModel model(tiny_config());
    auto seqs = probe_sequences(3);
    EXPECT_EQ(collect_trace(model, seqs), collect_trace(model, seqs));
}

TEST(CollectTrace, MixedDomainsIsContractError) {
    MoEModel model(tiny_config());
    std::vector<QuestionRecord> seqs = {{"a", "arith", {2, 3, 4}}, {"b", "chem-toy", {2, 3, 4}}};
    EXPECT_THROW(collect_trace(model, seqs), Error);
}

TEST(CollectTrace, ReplayFromReloadedCheckpointMatchesExactly) {
    TempDir tmp("trace_replay");
    MoEModel model(tiny_config(42));
    auto seqs = probe_sequences(3);
    RoutingTrace original = collect_trace(model, seqs);
    save_checkpoint(model, tmp.str("m.ckpt"));
    MoEModel reloaded = load_checkpoint(tmp.str("m.ckpt"));
    RoutingTrace replayed = collect_trace(reloaded, seqs);
    EXPECT_EQ(original, replayed);
}

TEST(TraceIo, ExportImportRoundTrip) {
    TempDir tmp("trace_rt");
    MoEModel model(tiny_config(5));
    RoutingTrace trace = collect_trace(model, probe_sequences(4));
    export_trace(trace, tmp.str("trace.jsonl"));
    RoutingTrace loaded = import_trace(tmp.str("trace.jsonl"));
    EXPECT_EQ(trace, loaded);
}

TEST(TraceIo, KMismatchIsValidationError) {
    TempDir tmp("trace_bad");
    {
        std::ofstream out(tmp.str("bad.jsonl"));
        out << R"({"model":"00","mode":"post_softmax","layers":1,"experts":4,"k":2})" << "\n";
        out << R"({"id":"s","domain":"d","decisions":[[0,0,[0,1,2],[0.4,0.3,0.2]]]})" << "\n";
    }
    try {
        import_trace(tmp.str("bad.jsonl"));
        FAIL() << "expected validation error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Validation);
        EXPECT_NE(std::string(e.what()).find("record 1"), std::string::npos);
    }
}

TEST(TraceIo, MinimalHandWrittenFileParses) {
    TempDir tmp("trace_min");
    {
        std::ofstream out(tmp.str("min.jsonl"));
        out << R"({"model":"00","mode":"pre_softmax","layers":1,"experts":2,"k":1})" << "\n";
        out << R"({"id":"s","domain":"d","decisions":[[0,0,[1],[1.0]]]})" << "\n";
    }
    RoutingTrace trace = import_trace(tmp.str("min.jsonl"));
    ASSERT_EQ(trace.records.size(), 1u);
    ASSERT_EQ(trace.records[0].decisions.size(), 1u);
    EXPECT_EQ(trace.records[0].decisions[0].experts, (std::vector<int>{1}));
}

TEST(ExpertStats, ActivationCountEqualsPositionsTimesK) {
    // k=2, T=10, 1 layer: total activations = 20
    std::vector<std::vector<std::vector<int>>> selections(1);
    for (int pos = 0; pos < 10; ++pos) selections[0].push_back({pos % 4, (pos + 1) % 4});
    RoutingTrace trace = hand_trace(4, 2, selections);
    ExpertStats stats = expert_stats(trace, {trivial_classification("seq-0", 10)});
    int64_t total = 0;
    for (const auto& c : stats.counts[0]) total += c.activation;
    EXPECT_EQ(total, 20);
    EXPECT_EQ(stats.total_positions, 10);
}

TEST(ExpertStats, AllCommonLabelsGiveZeroSpecificCounts) {
    std::vector<std::vector<std::vector<int>>> selections(1);
    for (int pos = 0; pos < 6; ++pos) selections[0].push_back({0, 1});
    RoutingTrace trace = hand_trace(4, 2, selections);
    ExpertStats stats = expert_stats(trace, {trivial_classification("seq-0", 6)});
    for (const auto& c : stats.counts[0]) {
        EXPECT_EQ(c.specific, 0);
        EXPECT_EQ(c.specific + c.common, c.activation);
    }
}

TEST(ExpertStats, MissingClassificationIsJoinError) {
    RoutingTrace trace = hand_trace(4, 2, {{{0, 1}}});
    try {
        expert_stats(trace, {trivial_classification("other-id", 1)});
        FAIL() << "expected join error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Join);
    }
}

// Streaming aggregation must equal materializing every routing event and
// counting them afterwards.
TEST(ExpertStats, StreamingEqualsMaterializedCounting) {
    MoEModel model(tiny_config(9));
    auto seqs = probe_sequences(5);
    RoutingTrace trace = collect_trace(model, seqs);
    std::vector<TokenClassification> classifications;
    for (const auto& s : seqs) {
        classifications.push_back(trivial_classification(s.id, s.tokens.size(), {0, 2}));
    }
    ExpertStats streamed = expert_stats(trace, classifications);

    // materialized oracle
    struct Event {
        int layer;
        int expert;
        bool specific;
    };
    std::vector<Event> events;
    for (const auto& rec : trace.records) {
        const TokenClassification* cls = nullptr;
        for (const auto& c : classifications)
            if (c.id == rec.id) cls = &c;
        for (const auto& d : rec.decisions) {
            for (int e : d.experts) {
                events.push_back(
                    {d.layer, e, cls->labels[static_cast<size_t>(d.position)] == TokenLabel::Specific});
            }
        }
    }
    ExpertStats materialized = ExpertStats::empty(trace.layers, trace.experts, trace.k);
    for (const auto& ev : events) {
        auto& c = materialized.counts[static_cast<size_t>(ev.layer)][static_cast<size_t>(ev.expert)];
        c.activation += 1;
        (ev.specific ? c.specific : c.common) += 1;
    }
    for (const auto& s : seqs) materialized.total_positions += static_cast<int64_t>(s.tokens.size());
    EXPECT_EQ(streamed, materialized);
}

TEST(ExpertStats, MergeOfPartitionEqualsWhole) {
    MoEModel model(tiny_config(10));
    auto seqs = probe_sequences(6);
    std::vector<TokenClassification> classifications;
    for (const auto& s : seqs) classifications.push_back(trivial_classification(s.id, s.tokens.size(), {1}));
    RoutingTrace whole = collect_trace(model, seqs);
    ExpertStats full = expert_stats(whole, classifications);

    ExpertStats merged = ExpertStats::empty(whole.layers, whole.experts, whole.k);
    for (size_t start = 0; start < seqs.size(); start += 2) {
        RoutingTrace part = whole;
        part.records = {whole.records.begin() + start, whole.records.begin() + start + 2};
        merged.merge(expert_stats(part, classifications));
    }
    EXPECT_EQ(full, merged);
}

TEST(ExpertScores, HandComputedFormula) {
    // P(e|D) = 0.5, P(S|e) = 0.8, P(C|e) = 0.2 -> g = 0.3
    ExpertStats stats = ExpertStats::empty(1, 2, 2);
    stats.total_positions = 10;  // slots = 20
    stats.counts[0][0] = {10, 8, 2};
    stats.counts[0][1] = {10, 2, 8};
    auto g = expert_scores(stats);
    EXPECT_DOUBLE_EQ(g[0][0], 0.3);
    EXPECT_DOUBLE_EQ(g[0][1], -0.3);
}

TEST(ExpertScores, NeverActivatedExpertScoresZero) {
    ExpertStats stats = ExpertStats::empty(1, 3, 1);
    stats.total_positions = 4;
    stats.counts[0][0] = {4, 4, 0};
    auto g = expert_scores(stats);
    EXPECT_DOUBLE_EQ(g[0][1], 0.0);
    EXPECT_DOUBLE_EQ(g[0][2], 0.0);
}

TEST(ExpertScores, CommonOnlyExpertIsMaximallyPenalized) {
    // expert handling only Common tokens with frequency f scores -f
    ExpertStats stats = ExpertStats::empty(1, 2, 1);
    stats.total_positions = 10;
    stats.counts[0][0] = {4, 0, 4};  // f = 0.4
    stats.counts[0][1] = {6, 6, 0};
    auto g = expert_scores(stats);
    EXPECT_DOUBLE_EQ(g[0][0], -0.4);
    EXPECT_DOUBLE_EQ(g[0][1], 0.6);
}

TEST(ExpertScores, PerLayerActivationFrequenciesSumToOne) {
    MoEModel model(tiny_config(11));
    auto seqs = probe_sequences(4);
    std::vector<TokenClassification> classifications;
    for (const auto& s : seqs) classifications.push_back(trivial_classification(s.id, s.tokens.size()));
    ExpertStats stats = expert_stats(collect_trace(model, seqs), classifications);
    double slots = static_cast<double>(stats.total_positions * stats.k);
    for (const auto& layer : stats.counts) {
        double total = 0;
        for (const auto& c : layer) total += static_cast<double>(c.activation) / slots;
        EXPECT_NEAR(total, 1.0, 1e-9);
    }
}

TEST(SelectExperts, FullSelectionAndTieBreaks) {
    std::vector<std::vector<double>> scores = {{0.3, 0.1, 0.3, 0.0}};
    ExpertScoreTable all = select_experts(scores, 4);
    EXPECT_EQ(all.selected.size(), 4u);
    EXPECT_DOUBLE_EQ(all.gamma_k, 0.0);

    ExpertScoreTable top2 = select_experts(scores, 2);
    EXPECT_EQ(top2.selected,
              (std::vector<std::pair<int, int>>{{0, 0}, {0, 2}}));
    EXPECT_DOUBLE_EQ(top2.gamma_k, 0.3);
}

TEST(SelectExperts, OutOfRangeKIsConfigError) {
    std::vector<std::vector<double>> scores = {{0.1, 0.2}};
    EXPECT_THROW(select_experts(scores, 0), Error);
    EXPECT_THROW(select_experts(scores, 3), Error);
}

TEST(SelectExperts, InvariantUnderPositiveAffineRescaling) {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::vector<double>> scores(3, std::vector<double>(5));
        for (auto& layer : scores)
            for (double& v : layer) v = -1 + 2 * rng.uniform();
        double a = 0.1 + 5 * rng.uniform();
        double b = -2 + 4 * rng.uniform();
        std::vector<std::vector<double>> rescaled = scores;
        for (auto& layer : rescaled)
            for (double& v : layer) v = a * v + b;
        EXPECT_EQ(select_experts(scores, 4).selected, select_experts(rescaled, 4).selected);
    }
}

TEST(SelectExperts, DefaultCountFollowsOnePercentRule) {
    ModelConfig cfg = tiny_config();
    cfg.num_layers = 4;
    cfg.num_experts = 16;
    EXPECT_EQ(default_expert_count(cfg), 1);  // 64 pairs -> 1
    cfg.num_experts = 128;
    cfg.num_layers = 24;
    EXPECT_EQ(default_expert_count(cfg), 31);  // 3072 pairs -> 31
}

TEST(Heatmap, ShapeAndExactRoundTrip) {
    TempDir tmp("heatmap");
    Rng rng(13);
    std::vector<std::vector<double>> scores(4, std::vector<double>(16));
    for (auto& layer : scores)
        for (double& v : layer) v = -1 + 2 * rng.uniform();
    save_heatmap_csv(scores, tmp.str("h.csv"));
    auto loaded = load_heatmap_csv(tmp.str("h.csv"));
    ASSERT_EQ(loaded.size(), 4u);
    for (size_t l = 0; l < 4; ++l) {
        ASSERT_EQ(loaded[l].size(), 16u);
        for (size_t e = 0; e < 16; ++e) EXPECT_EQ(loaded[l][e], scores[l][e]);
    }
}

TEST(Heatmap, AllZeroScores) {
    TempDir tmp("heatmap0");
    std::vector<std::vector<double>> scores(2, std::vector<double>(3, 0.0));
    save_heatmap_csv(scores, tmp.str("h.csv"));
    auto loaded = load_heatmap_csv(tmp.str("h.csv"));
    EXPECT_EQ(loaded, scores);
}

TEST(ScoreTable, JsonRoundTrip) {
    TempDir tmp("scores");
    std::vector<std::vector<double>> scores = {{0.25, -0.5, 0.125}, {0.0625, 0.75, -0.25}};
    ExpertScoreTable table = select_experts(scores, 2, "deadbeef01020304", "arith");
    save_score_table(table, tmp.str("scores.json"));
    ExpertScoreTable loaded = load_score_table(tmp.str("scores.json"));
    EXPECT_EQ(loaded.scores, table.scores);
    EXPECT_EQ(loaded.selected, table.selected);
    EXPECT_EQ(loaded.k_selected, table.k_selected);
    EXPECT_EQ(loaded.gamma_k, table.gamma_k);
    EXPECT_EQ(loaded.fingerprint, table.fingerprint);
    EXPECT_EQ(loaded.domain, table.domain);
}
