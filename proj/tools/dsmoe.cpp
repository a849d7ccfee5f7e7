// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver for the MoE steering workbench. Subcommands cover the
// full pipeline (gen-corpus, train, attribute, profile, steer, eval, sweep,
// report) plus `run`, which executes everything end to end from a JSON
// experiment config.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dsmoe/harness.hpp"

namespace fs = std::filesystem;
using namespace dsmoe;

namespace {

std::vector<std::string> split_list(const std::string& csv) {
    std::vector<std::string> out;
    size_t start = 0;
    while (start <= csv.size()) {
        size_t comma = csv.find(',', start);
        std::string item = csv.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        if (!item.empty()) out.push_back(item);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::vector<double> split_grid(const std::string& csv) {
    std::vector<double> out;
    for (const auto& item : split_list(csv)) out.push_back(std::strtod(item.c_str(), nullptr));
    return out;
}

std::vector<Sample> load_corpus_for(const MoEModel& model, const std::string& path) {
    Vocab vocab;
    return load_jsonl(path, vocab, model.config().max_seq_len);
}

int run_gen_corpus(const std::string& out, const std::string& domains_csv, int samples, uint64_t seed,
                   int64_t max_seq_len) {
    Vocab vocab;
    std::vector<Domain> domains;
    auto names = split_list(domains_csv);
    for (size_t d = 0; d < names.size(); ++d) domains.push_back(make_domain(names[d], mix_seed(seed, 100 + d)));
    auto samples_out = generate_corpus(domains, samples, vocab, max_seq_len);
    save_jsonl(samples_out, out);
    std::cout << "wrote " << samples_out.size() << " samples to " << out << "\n";
    return 0;
}

int run_train(const std::string& corpus_path, const std::string& out, const std::string& config_path,
              uint64_t seed, const std::string& router_mode) {
    ExperimentSpec spec;
    if (!config_path.empty()) spec = ExperimentSpec::load(config_path);
    if (seed != UINT64_MAX) spec.model.seed = seed;
    if (!router_mode.empty()) spec.model.router_mode = router_mode_from_string(router_mode);
    Vocab vocab;
    require(spec.model.vocab_size >= vocab.size(), ErrorKind::Config,
            "model vocab_size must cover the character vocabulary");
    auto samples = load_jsonl(corpus_path, vocab, spec.model.max_seq_len);
    MoEModel model(spec.model);
    std::vector<std::vector<int>> sequences;
    sequences.reserve(samples.size());
    for (const auto& s : samples) sequences.push_back(s.tokens());
    TrainResult result = train(model, sequences, spec.train_cfg);
    save_checkpoint(model, out);
    std::cout << "trained " << spec.train_cfg.steps << " steps, final loss " << format_double(result.loss_curve.back())
              << ", checkpoint " << out << " (fingerprint " << model.fingerprint() << ")\n";
    return 0;
}

int run_attribute(const std::string& ckpt, const std::string& corpus_path, const std::string& domain, double p,
                  const std::string& out) {
    MoEModel model = load_checkpoint(ckpt);
    auto samples = load_corpus_for(model, corpus_path);
    auto questions = question_views(samples, domain);
    require(!questions.empty(), ErrorKind::Config, "no samples for domain '" + domain + "'");
    std::vector<ImportanceRecord> records;
    for (const auto& q : questions) {
        std::vector<bool> mask(q.tokens.size(), true);
        ImportanceRecord rec;
        rec.scores = token_importance(model, q.tokens, mask, nullptr, q.id);
        rec.classification = classify_tokens(rec.scores, domain_threshold(rec.scores, p), p);
        records.push_back(std::move(rec));
    }
    save_importance_jsonl(records, out);
    std::cout << "scored " << records.size() << " sequences at p=" << format_double(p) << " into " << out << "\n";
    return 0;
}

int run_profile(const std::string& ckpt, const std::string& corpus_path, const std::string& domain,
                const std::string& importance_path, const std::string& trace_in, const std::string& trace_out,
                int64_t k_experts, const std::string& out, const std::string& heatmap) {
    MoEModel model = load_checkpoint(ckpt);
    RoutingTrace trace;
    if (!trace_in.empty()) {
        trace = import_trace(trace_in);
    } else {
        require(!corpus_path.empty(), ErrorKind::Config, "profile needs --corpus or --trace-in");
        auto samples = load_corpus_for(model, corpus_path);
        auto questions = question_views(samples, domain);
        require(!questions.empty(), ErrorKind::Config, "no samples for domain '" + domain + "'");
        trace = collect_trace(model, questions);
    }
    if (!trace_out.empty()) export_trace(trace, trace_out);

    auto records = load_importance_jsonl(importance_path);
    std::vector<TokenClassification> classifications;
    for (const auto& rec : records) classifications.push_back(rec.classification);
    ExpertStats stats = expert_stats(trace, classifications);
    auto scores = expert_scores(stats);
    int64_t k_sel = k_experts > 0 ? k_experts : default_expert_count(model.config());
    ExpertScoreTable table = select_experts(scores, k_sel, model.fingerprint(), domain);
    save_score_table(table, out);
    if (!heatmap.empty()) save_heatmap_csv(scores, heatmap);
    std::cout << "selected " << table.selected.size() << " experts (gamma_K=" << format_double(table.gamma_k)
              << ") into " << out << "\n";
    return 0;
}

int run_steer(const std::string& scores_path, double alpha, const std::string& mode, const std::string& out) {
    ExpertScoreTable table = load_score_table(scores_path);
    SteeringConfig config = build_config(table, alpha, steer_point_from_string(mode));
    save_config(config, out);
    std::cout << "steering config for " << config.experts.size() << " experts at alpha="
              << format_double(config.alpha) << " into " << out << "\n";
    return 0;
}

int run_eval(const std::string& ckpt, const std::string& corpus_path, const std::string& steering_path,
             uint64_t seed, const std::string& out, const std::string& predictions_path) {
    MoEModel model = load_checkpoint(ckpt);
    auto samples = load_corpus_for(model, corpus_path);
    std::optional<SteeringPlan> plan;
    std::string variant = "baseline";
    if (!steering_path.empty()) {
        SteeringConfig config = load_config(steering_path);
        require_compatible(config, model);
        plan = make_plan(config, model.config());
        variant = "dsmoe";
    }
    std::vector<std::string> domains;
    for (const auto& s : samples) {
        if (std::find(domains.begin(), domains.end(), s.domain) == domains.end()) domains.push_back(s.domain);
    }
    std::vector<EvalResult> results;
    std::vector<Prediction> predictions;
    for (const auto& domain : domains) {
        results.push_back(evaluate(model, samples, domain, variant, seed, plan ? &*plan : nullptr, &predictions));
    }
    write_results_csv(results, out);
    if (!predictions_path.empty()) write_predictions_jsonl(predictions, predictions_path);
    for (const auto& r : results) {
        std::cout << r.domain << " " << r.variant << ": xent=" << format_double(r.xent)
                  << " accuracy=" << format_double(r.accuracy) << "\n";
    }
    return 0;
}

int run_sweep(const std::string& config_path, const std::string& axis, const std::string& grid_csv,
              const std::string& out) {
    ExperimentSpec spec = ExperimentSpec::load(config_path);
    SweepAxis sweep_axis;
    if (axis == "k") sweep_axis = SweepAxis::ExpertCount;
    else if (axis == "alpha") sweep_axis = SweepAxis::Alpha;
    else fail(ErrorKind::Config, "sweep axis must be 'k' or 'alpha'");
    std::vector<double> grid = split_grid(grid_csv);
    auto rows = sweep(spec, sweep_axis, grid);
    write_sweep_csv(rows, out);
    std::cout << "wrote " << rows.size() << " sweep rows to " << out << "\n";
    return 0;
}

int run_report(const std::string& run_dir, const std::string& seeds_csv, const std::string& out) {
    std::vector<uint64_t> seeds;
    for (const auto& item : split_list(seeds_csv)) seeds.push_back(std::strtoull(item.c_str(), nullptr, 10));
    if (seeds.empty()) {
        // discover seed directories
        for (const auto& entry : fs::directory_iterator(run_dir)) {
            std::string name = entry.path().filename().string();
            if (name.rfind("seed-", 0) == 0) seeds.push_back(std::strtoull(name.substr(5).c_str(), nullptr, 10));
        }
        std::sort(seeds.begin(), seeds.end());
        require(!seeds.empty(), ErrorKind::Report, "no seed-* directories under " + run_dir);
    }
    report(run_dir, seeds, out);
    std::cout << "report written to " << out << "\n";
    return 0;
}

int run_full(const std::string& config_path, const std::string& out_override, uint64_t seed_override,
             const std::string& domain, double p, int64_t k_experts, double alpha,
             const std::string& router_mode) {
    ExperimentSpec spec = ExperimentSpec::load(config_path);
    if (!out_override.empty()) spec.out_dir = out_override;
    if (seed_override != UINT64_MAX) spec.seeds = {seed_override};
    if (!domain.empty()) spec.target_domain = domain;
    if (p > 0) spec.p = p;
    if (k_experts >= 0) spec.k_experts = k_experts;
    if (alpha > 0) spec.alpha = alpha;
    if (!router_mode.empty()) spec.model.router_mode = router_mode_from_string(router_mode);
    spec.validate();
    auto results = run_experiment(spec);
    for (const auto& r : results) {
        std::cout << "seed " << r.seed << " " << r.domain << " " << r.variant
                  << ": xent=" << format_double(r.xent) << " accuracy=" << format_double(r.accuracy) << "\n";
    }
    std::cout << "artifacts under " << spec.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MoE steering workbench: domain-token attribution, expert profiling, router steering"};
    app.require_subcommand(1);

    // gen-corpus
    auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic multi-domain corpus (JSONL)");
    std::string gen_out, gen_domains = "arith,chem-toy";
    int gen_samples = 240;
    uint64_t gen_seed = 1;
    int64_t gen_max_len = 64;
    gen->add_option("--out", gen_out, "output JSONL path")->required();
    gen->add_option("--domains", gen_domains, "comma-separated domain names");
    gen->add_option("--samples", gen_samples, "samples per domain");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--max-seq-len", gen_max_len, "maximum sample length in tokens");

    // train
    auto* tr = app.add_subcommand("train", "train a model on a JSONL corpus");
    std::string tr_corpus, tr_out, tr_config, tr_mode;
    uint64_t tr_seed = UINT64_MAX;
    tr->add_option("--corpus", tr_corpus, "training corpus (JSONL)")->required();
    tr->add_option("--out", tr_out, "checkpoint output path")->required();
    tr->add_option("--config", tr_config, "experiment config JSON supplying model/train blocks");
    tr->add_option("--seed", tr_seed, "model seed override");
    tr->add_option("--router-mode", tr_mode, "post_softmax | pre_softmax");

    // attribute
    auto* at = app.add_subcommand("attribute", "score domain-specific tokens for one domain");
    std::string at_ckpt, at_corpus, at_domain, at_out;
    double at_p = 0.15;
    at->add_option("--ckpt", at_ckpt, "model checkpoint")->required();
    at->add_option("--corpus", at_corpus, "samples (JSONL)")->required();
    at->add_option("--domain", at_domain, "target domain")->required();
    at->add_option("--p", at_p, "domain-specific level in (0, 1)");
    at->add_option("--out", at_out, "importance JSONL output")->required();

    // profile
    auto* pr = app.add_subcommand("profile", "aggregate routing traces into expert scores");
    std::string pr_ckpt, pr_corpus, pr_domain, pr_importance, pr_trace_in, pr_trace_out, pr_out, pr_heatmap;
    int64_t pr_k = 0;
    pr->add_option("--ckpt", pr_ckpt, "model checkpoint")->required();
    pr->add_option("--corpus", pr_corpus, "samples (JSONL); ignored with --trace-in");
    pr->add_option("--domain", pr_domain, "target domain");
    pr->add_option("--importance", pr_importance, "importance JSONL from `attribute`")->required();
    pr->add_option("--trace-in", pr_trace_in, "import a routing trace instead of tracing the model");
    pr->add_option("--trace-out", pr_trace_out, "export the routing trace");
    pr->add_option("--k-experts", pr_k, "number of experts to select (0 = 1% rule)");
    pr->add_option("--out", pr_out, "score table JSON output")->required();
    pr->add_option("--heatmap", pr_heatmap, "layer x expert score CSV output");

    // steer
    auto* st = app.add_subcommand("steer", "build a steering config from a score table");
    std::string st_scores, st_out, st_mode = "gate_weights";
    double st_alpha = 3.0;
    st->add_option("--scores", st_scores, "score table JSON from `profile`")->required();
    st->add_option("--alpha", st_alpha, "steering coefficient in (0, 100)");
    st->add_option("--mode", st_mode, "gate_weights | logit_bias");
    st->add_option("--out", st_out, "steering config JSON output")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint, optionally steered");
    std::string ev_ckpt, ev_corpus, ev_steering, ev_out, ev_predictions;
    uint64_t ev_seed = 0;
    ev->add_option("--ckpt", ev_ckpt, "model checkpoint")->required();
    ev->add_option("--corpus", ev_corpus, "evaluation samples (JSONL)")->required();
    ev->add_option("--steering", ev_steering, "steering config JSON");
    ev->add_option("--seed", ev_seed, "seed label for the result rows");
    ev->add_option("--out", ev_out, "results CSV output")->required();
    ev->add_option("--predictions", ev_predictions, "predictions JSONL output");

    // sweep
    auto* sw = app.add_subcommand("sweep", "grid sweep over K or alpha");
    std::string sw_config, sw_axis, sw_grid, sw_out;
    sw->add_option("--config", sw_config, "experiment config JSON")->required();
    sw->add_option("--axis", sw_axis, "k | alpha")->required();
    sw->add_option("--grid", sw_grid, "comma-separated grid values")->required();
    sw->add_option("--out", sw_out, "sweep CSV output")->required();

    // report
    auto* rp = app.add_subcommand("report", "emit summary tables and plot data for a run");
    std::string rp_run, rp_seeds, rp_out;
    rp->add_option("--run", rp_run, "run directory (contains seed-*/)")->required();
    rp->add_option("--seeds", rp_seeds, "comma-separated seeds (default: discover)");
    rp->add_option("--out", rp_out, "report output directory")->required();

    // run
    auto* rn = app.add_subcommand("run", "full pipeline: train, attribute, profile, steer, eval, report");
    std::string rn_config, rn_out, rn_domain, rn_mode;
    uint64_t rn_seed = UINT64_MAX;
    double rn_p = -1, rn_alpha = -1;
    int64_t rn_k = -1;
    rn->add_option("--config", rn_config, "experiment config JSON")->required();
    rn->add_option("--out", rn_out, "output directory override");
    rn->add_option("--seed", rn_seed, "run a single seed instead of the config's list");
    rn->add_option("--domain", rn_domain, "target domain override");
    rn->add_option("--p", rn_p, "domain-specific level override");
    rn->add_option("--k-experts", rn_k, "selected expert count override (0 = 1% rule)");
    rn->add_option("--alpha", rn_alpha, "steering coefficient override");
    rn->add_option("--router-mode", rn_mode, "post_softmax | pre_softmax");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        std::cerr << app.help() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) return run_gen_corpus(gen_out, gen_domains, gen_samples, gen_seed, gen_max_len);
        if (tr->parsed()) return run_train(tr_corpus, tr_out, tr_config, tr_seed, tr_mode);
        if (at->parsed()) return run_attribute(at_ckpt, at_corpus, at_domain, at_p, at_out);
        if (pr->parsed())
            return run_profile(pr_ckpt, pr_corpus, pr_domain, pr_importance, pr_trace_in, pr_trace_out, pr_k, pr_out,
                               pr_heatmap);
        if (st->parsed()) return run_steer(st_scores, st_alpha, st_mode, st_out);
        if (ev->parsed()) return run_eval(ev_ckpt, ev_corpus, ev_steering, ev_seed, ev_out, ev_predictions);
        if (sw->parsed()) return run_sweep(sw_config, sw_axis, sw_grid, sw_out);
        if (rp->parsed()) return run_report(rp_run, rp_seeds, rp_out);
        if (rn->parsed()) return run_full(rn_config, rn_out, rn_seed, rn_domain, rn_p, rn_k, rn_alpha, rn_mode);
    } catch (const Error& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
