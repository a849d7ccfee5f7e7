// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dsmoe/harness.hpp"
#include "test_util.hpp"

using namespace dsmoe;
using dsmoe::testing::TempDir;
namespace fs = std::filesystem;

namespace {

// A deliberately small spec so harness tests stay fast.
ExperimentSpec fast_spec(const std::string& out_dir) {
    ExperimentSpec spec;
    spec.model.vocab_size = 98;
    spec.model.embed_dim = 24;
    spec.model.num_layers = 2;
    spec.model.num_experts = 4;
    spec.model.top_k = 2;
    spec.model.expert_hidden_dim = 32;
    spec.model.max_seq_len = 64;
    spec.corpus.samples_per_domain = 40;
    spec.corpus.train_fraction = 0.8;
    spec.seeds = {1};
    spec.train_cfg.steps = 40;
    spec.train_cfg.batch_size = 4;
    spec.train_cfg.balance_weight = 0.01;
    spec.k_experts = 1;
    spec.alpha = 3.0;
    spec.out_dir = out_dir;
    return spec;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(Harness, IdentityAlphaMatchesBaselineExactly) {
    TempDir tmp("harness_identity");
    ExperimentSpec spec = fast_spec(tmp.str("run"));
    spec.alpha = 1.0;
    SeedArtifacts artifacts = run_seed(spec, 1);
    std::map<std::string, double> baseline_xent, dsmoe_xent;
    for (const auto& r : artifacts.results) {
        (r.variant == "baseline" ? baseline_xent : dsmoe_xent)[r.domain] = r.xent;
    }
    for (const auto& [domain, xent] : baseline_xent) {
        EXPECT_EQ(xent, dsmoe_xent[domain]) << domain;  // bit-for-bit
    }
}

TEST(Harness, ArtifactsArePureFunctionOfSpecAndSeed) {
    TempDir tmp("harness_pure");
    ExperimentSpec spec_a = fast_spec(tmp.str("a"));
    ExperimentSpec spec_b = fast_spec(tmp.str("b"));
    run_experiment(spec_a);
    run_experiment(spec_b);
    // identical bytes for every per-seed and report artifact
    for (const char* sub : {"seed-1", "report"}) {
        fs::path dir_a = fs::path(tmp.str("a")) / sub;
        fs::path dir_b = fs::path(tmp.str("b")) / sub;
        int compared = 0;
        for (const auto& entry : fs::directory_iterator(dir_a)) {
            fs::path other = dir_b / entry.path().filename();
            ASSERT_TRUE(fs::exists(other)) << other;
            EXPECT_EQ(slurp(entry.path()), slurp(other)) << entry.path();
            ++compared;
        }
        EXPECT_GT(compared, 0);
    }
}

TEST(Harness, MemorizedSampleScoresFullAccuracy) {
    ModelConfig cfg;
    cfg.vocab_size = 98;
    cfg.embed_dim = 24;
    cfg.num_layers = 2;
    cfg.num_experts = 4;
    cfg.top_k = 2;
    cfg.expert_hidden_dim = 32;
    cfg.max_seq_len = 32;
    cfg.seed = 3;
    MoEModel model(cfg);
    Vocab vocab;
    Sample s;
    s.id = "memo";
    s.domain = "arith";
    s.question = "Q: 3+4=?";
    s.answer = " A: 7\n";
    s.question_tokens = vocab.encode(s.question);
    s.answer_tokens = vocab.encode(s.answer);
    TrainConfig tc;
    tc.steps = 250;
    tc.batch_size = 1;
    train(model, {s.tokens()}, tc);
    EvalResult r = evaluate(model, {s}, "arith", "baseline", 0);
    EXPECT_EQ(r.accuracy, 1.0);
    EXPECT_LT(r.xent, 0.05);
}

TEST(Harness, NullAndIdentitySteeringEvaluateIdentically) {
    TempDir tmp("harness_null");
    ExperimentSpec spec = fast_spec(tmp.str("run"));
    SeedArtifacts artifacts = run_seed(spec, 1);
    SteeringConfig identity = artifacts.steering;
    identity.alpha = 1.0;
    SteeringPlan plan = make_plan(identity, artifacts.model.config());
    EvalResult with_null = evaluate(artifacts.model, artifacts.eval_set, "arith", "x", 1, nullptr);
    EvalResult with_identity = evaluate(artifacts.model, artifacts.eval_set, "arith", "x", 1, &plan);
    EXPECT_EQ(with_null.xent, with_identity.xent);
    EXPECT_EQ(with_null.accuracy, with_identity.accuracy);
}

// The reported accuracy must equal an independent recount over the emitted
// predictions file.
TEST(Harness, AccuracyMatchesPredictionsFileRecount) {
    TempDir tmp("harness_recount");
    ExperimentSpec spec = fast_spec(tmp.str("run"));
    SeedArtifacts artifacts = run_seed(spec, 1);

    std::map<std::pair<std::string, std::string>, std::pair<int, int>> tally;  // (domain, variant) -> (correct, n)
    std::ifstream in(fs::path(artifacts.dir) / "predictions.jsonl");
    ASSERT_TRUE(in.good());
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        auto& t = tally[{j.at("domain"), j.at("variant")}];
        t.second += 1;
        bool match = j.at("gold") == j.at("predicted");
        EXPECT_EQ(match, j.at("correct").get<bool>());
        t.first += match ? 1 : 0;
    }
    for (const auto& r : artifacts.results) {
        auto& t = tally[{r.domain, r.variant}];
        ASSERT_GT(t.second, 0);
        EXPECT_DOUBLE_EQ(r.accuracy, static_cast<double>(t.first) / static_cast<double>(t.second));
    }
}

TEST(Harness, AttributionIgnoresAnswerTokens) {
    TempDir tmp("harness_hygiene");
    ExperimentSpec spec = fast_spec(tmp.str("run"));
    SeedArtifacts artifacts = run_seed(spec, 1);

    // scrub every answer in the eval set; the identification stages must not notice
    std::vector<Sample> scrubbed = artifacts.eval_set;
    for (auto& s : scrubbed) {
        std::fill(s.answer_tokens.begin(), s.answer_tokens.end(), Vocab::kUnknown);
        s.answer = std::string(s.answer.size(), '#');
    }
    auto questions = question_views(scrubbed, spec.target_domain);
    std::vector<TokenClassification> classifications;
    std::vector<ImportanceRecord> importance;
    for (const auto& q : questions) {
        std::vector<bool> mask(q.tokens.size(), true);
        ImportanceRecord rec;
        rec.scores = token_importance(artifacts.model, q.tokens, mask, nullptr, q.id);
        rec.classification = classify_tokens(rec.scores, domain_threshold(rec.scores, spec.p), spec.p);
        classifications.push_back(rec.classification);
        importance.push_back(std::move(rec));
    }
    ASSERT_EQ(importance.size(), artifacts.importance.size());
    for (size_t i = 0; i < importance.size(); ++i) {
        EXPECT_EQ(importance[i].scores.scores, artifacts.importance[i].scores.scores);
        EXPECT_EQ(importance[i].classification.labels, artifacts.importance[i].classification.labels);
    }
    RoutingTrace trace = collect_trace(artifacts.model, questions);
    ExpertStats stats = expert_stats(trace, classifications);
    EXPECT_EQ(expert_scores(stats), artifacts.table.scores);
}

TEST(Sweep, BaselineConventions) {
    TempDir tmp("sweep_base");
    ExperimentSpec spec = fast_spec(tmp.str("run"));
    SeedArtifacts artifacts = run_seed(spec, 1);
    double baseline_xent = 0;
    for (const auto& r : artifacts.results) {
        if (r.domain == "arith" && r.variant == "baseline") baseline_xent = r.xent;
    }

    ExperimentSpec spec_k = fast_spec(tmp.str("run_k"));
    auto k_rows = sweep(spec_k, SweepAxis::ExpertCount, {0.0});
    ASSERT_EQ(k_rows.size(), 1u);
    EXPECT_EQ(k_rows[0].xent, baseline_xent);  // K = 0 equals baseline exactly
    EXPECT_FALSE(k_rows[0].dominance.has_value());

    ExperimentSpec spec_a = fast_spec(tmp.str("run_a"));
    auto a_rows = sweep(spec_a, SweepAxis::Alpha, {1.0});
    ASSERT_EQ(a_rows.size(), 1u);
    EXPECT_EQ(a_rows[0].xent, baseline_xent);  // alpha = 1 equals baseline exactly
}

TEST(Sweep, CsvEmission) {
    TempDir tmp("sweep_csv");
    std::vector<SweepRow> rows;
    SweepRow a{"alpha", 3.0, 1, "arith", 0.5, 0.75, 0.875};
    SweepRow b{"alpha", 1.0, 1, "arith", 0.625, 0.5, std::nullopt};
    rows.push_back(a);
    rows.push_back(b);
    write_sweep_csv(rows, tmp.str("sweep.csv"));
    std::string text = slurp(tmp.str("sweep.csv"));
    EXPECT_NE(text.find("axis,value,seed,domain,xent,accuracy,dominance"), std::string::npos);
    EXPECT_NE(text.find("alpha,3,1,arith,0.5,0.75,0.875"), std::string::npos);
    EXPECT_NE(text.find("alpha,1,1,arith,0.625,0.5,"), std::string::npos);
}

TEST(Report, SummaryDeltaMatchesRecomputation) {
    TempDir tmp("report");
    ExperimentSpec spec = fast_spec(tmp.str("run"));
    spec.seeds = {1, 2};
    run_experiment(spec);

    auto rows = [&](uint64_t seed) {
        return read_results_csv((fs::path(spec.out_dir) / ("seed-" + std::to_string(seed)) / "results.csv").string());
    };
    std::map<std::string, std::pair<double, double>> expected;  // domain -> (baseline sum, dsmoe sum)
    for (uint64_t seed : spec.seeds) {
        for (const auto& r : rows(seed)) {
            if (r.variant == "baseline") expected[r.domain].first += r.xent;
            else expected[r.domain].second += r.xent;
        }
    }
    std::ifstream summary(fs::path(spec.out_dir) / "report" / "summary.csv");
    ASSERT_TRUE(summary.good());
    std::string line;
    std::getline(summary, line);
    EXPECT_EQ(line, "domain,baseline,dsmoe,delta");
    int parsed = 0;
    while (std::getline(summary, line)) {
        if (line.empty()) continue;
        size_t c1 = line.find(',');
        size_t c2 = line.find(',', c1 + 1);
        size_t c3 = line.find(',', c2 + 1);
        std::string domain = line.substr(0, c1);
        double baseline = std::strtod(line.substr(c1 + 1, c2 - c1 - 1).c_str(), nullptr);
        double dsmoe = std::strtod(line.substr(c2 + 1, c3 - c2 - 1).c_str(), nullptr);
        double delta = std::strtod(line.substr(c3 + 1).c_str(), nullptr);
        EXPECT_NEAR(baseline, expected[domain].first / 2.0, 1e-9);
        EXPECT_NEAR(dsmoe, expected[domain].second / 2.0, 1e-9);
        EXPECT_NEAR(delta, dsmoe - baseline, 1e-9);
        ++parsed;
    }
    EXPECT_EQ(parsed, 2);
    EXPECT_TRUE(fs::exists(fs::path(spec.out_dir) / "report" / "token_ranking.jsonl"));
    EXPECT_TRUE(fs::exists(fs::path(spec.out_dir) / "report" / "heatmap_seed1.csv"));
}

TEST(Report, MissingArtifactIsReportError) {
    TempDir tmp("report_missing");
    try {
        report(tmp.str("nothing"), {1}, tmp.str("out"));
        FAIL() << "expected report error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Report);
        EXPECT_NE(std::string(e.what()).find("results.csv"), std::string::npos);
    }
}

TEST(ExperimentSpecJson, RoundTripAndValidation) {
    ExperimentSpec spec = fast_spec("somewhere");
    nlohmann::json j = spec.to_json();
    ExperimentSpec loaded = ExperimentSpec::from_json(j);
    EXPECT_EQ(loaded.model, spec.model);
    EXPECT_EQ(loaded.target_domain, spec.target_domain);
    EXPECT_EQ(loaded.p, spec.p);
    EXPECT_EQ(loaded.alpha, spec.alpha);
    EXPECT_EQ(loaded.seeds, spec.seeds);

    ExperimentSpec bad = spec;
    bad.target_domain = "nonexistent";
    EXPECT_THROW(bad.validate(), Error);
    bad = spec;
    bad.p = 0.0;
    EXPECT_THROW(bad.validate(), Error);
}

TEST(StageErrors, FailuresAreStageTagged) {
    TempDir tmp("stage_err");
    ExperimentSpec spec = fast_spec(tmp.str("run"));
    spec.corpus_jsonl = tmp.str("missing.jsonl");
    try {
        run_seed(spec, 1);
        FAIL() << "expected stage error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Stage);
        EXPECT_NE(std::string(e.what()).find("corpus"), std::string::npos);
    }
}
