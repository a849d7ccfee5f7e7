// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "dsmoe/model.hpp"
#include "test_util.hpp"

using namespace dsmoe;
using dsmoe::testing::random_tensor;
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

std::vector<int> probe_tokens() { return {2, 5, 9, 3, 7, 1, 4}; }

}  // namespace

TEST(Routing, PostSoftmaxExample) {
    RoutingDecision dec = route_from_logits(std::vector<double>{2, 1, 0, -1}, 2, RouterMode::PostSoftmax);
    EXPECT_EQ(dec.experts, (std::vector<int>{0, 1}));
    EXPECT_NEAR(dec.weights[0], 0.6439, 5e-5);
    EXPECT_NEAR(dec.weights[1], 0.2369, 5e-5);
}

TEST(Routing, PreSoftmaxExample) {
    RoutingDecision dec = route_from_logits(std::vector<double>{2, 1, 0, -1}, 2, RouterMode::PreSoftmax);
    EXPECT_EQ(dec.experts, (std::vector<int>{0, 1}));
    EXPECT_NEAR(dec.weights[0], 0.7311, 5e-5);
    EXPECT_NEAR(dec.weights[1], 0.2689, 5e-5);
    EXPECT_NEAR(dec.weights[0] + dec.weights[1], 1.0, 1e-12);
}

TEST(Routing, FullSelectionWhenKEqualsN) {
    std::vector<double> logits = {0.5, -1.0, 2.0, 0.0};
    for (RouterMode mode : {RouterMode::PostSoftmax, RouterMode::PreSoftmax}) {
        RoutingDecision dec = route_from_logits(logits, 4, mode);
        std::vector<int> sorted_experts = dec.experts;
        std::sort(sorted_experts.begin(), sorted_experts.end());
        EXPECT_EQ(sorted_experts, (std::vector<int>{0, 1, 2, 3}));
        auto p = dsmoe::detail::softmax_values(std::span<const double>(logits));
        double total = 0;
        for (size_t j = 0; j < dec.experts.size(); ++j) {
            EXPECT_NEAR(dec.weights[j], p[static_cast<size_t>(dec.experts[j])], 1e-15);
            total += dec.weights[j];
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(Routing, ErrorsOnBadInputs) {
    EXPECT_THROW(route_from_logits(std::vector<double>{1, 2}, 3, RouterMode::PostSoftmax), Error);
    std::vector<double> bad = {1.0, std::numeric_limits<double>::infinity()};
    EXPECT_THROW(route_from_logits(bad, 1, RouterMode::PostSoftmax), Error);
}

TEST(Routing, TieBreakPrefersLowerIndex) {
    RoutingDecision dec = route_from_logits(std::vector<double>{1.0, 2.0, 2.0, 1.0}, 2, RouterMode::PostSoftmax);
    EXPECT_EQ(dec.experts, (std::vector<int>{1, 2}));
    RoutingDecision all_tied = route_from_logits(std::vector<double>{0.0, 0.0, 0.0}, 2, RouterMode::PreSoftmax);
    EXPECT_EQ(all_tied.experts, (std::vector<int>{0, 1}));
}

TEST(Routing, VariantAgreementOnTieFreeLogits) {
    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        int n = 2 + static_cast<int>(rng.uniform_int(63));
        int k = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(std::min(n, 8))));
        std::vector<double> logits(static_cast<size_t>(n));
        for (double& v : logits) v = -3 + 6 * rng.uniform();
        RoutingDecision post = route_from_logits(logits, k, RouterMode::PostSoftmax);
        RoutingDecision pre = route_from_logits(logits, k, RouterMode::PreSoftmax);
        EXPECT_EQ(post.experts, pre.experts);
        double pre_sum = 0;
        for (double w : pre.weights) pre_sum += w;
        EXPECT_NEAR(pre_sum, 1.0, 1e-9);
    }
}

TEST(Routing, LogitShiftInvariance) {
    Rng rng(32);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> logits(8);
        for (double& v : logits) v = -2 + 4 * rng.uniform();
        double c = -5 + 10 * rng.uniform();
        std::vector<double> shifted = logits;
        for (double& v : shifted) v += c;
        RoutingDecision a = route_from_logits(logits, 3, RouterMode::PreSoftmax);
        RoutingDecision b = route_from_logits(shifted, 3, RouterMode::PreSoftmax);
        EXPECT_EQ(a.experts, b.experts);
        for (size_t j = 0; j < a.weights.size(); ++j) EXPECT_NEAR(a.weights[j], b.weights[j], 1e-12);
        RoutingDecision ap = route_from_logits(logits, 3, RouterMode::PostSoftmax);
        RoutingDecision bp = route_from_logits(shifted, 3, RouterMode::PostSoftmax);
        EXPECT_EQ(ap.experts, bp.experts);
    }
}

TEST(MoEForward, SingleExpertWeightOneEqualsExpertOutput) {
    MoEModel model(tiny_config());
    Rng rng(5);
    Tensor x = random_tensor({16}, rng, -1, 1);
    RoutingDecision dec;
    dec.experts = {2};
    dec.weights = {1.0};
    Tensor via_moe = model.moe_forward(x, 0, dec);
    Tensor as_row = Tensor::from({1, 16}, x.values());
    Tensor direct = matmul(silu(matmul(as_row, model.expert_w1(0, 2))), model.expert_w2(0, 2));
    EXPECT_EQ(via_moe.values(), direct.values());
}

TEST(MoEForward, IdenticalExpertsMakeRoutingIrrelevant) {
    ModelConfig cfg = tiny_config();
    cfg.router_mode = RouterMode::PreSoftmax;
    MoEModel model(cfg);
    for (int e = 1; e < 4; ++e) {
        model.expert_w1(0, e).values() = model.expert_w1(0, 0).values();
        model.expert_w2(0, e).values() = model.expert_w2(0, 0).values();
    }
    Rng rng(6);
    Tensor x = random_tensor({16}, rng, -1, 1);
    RoutingDecision a = model.route(x, 0);
    Tensor out_a = model.moe_forward(x, 0, a);
    RoutingDecision other;
    other.experts = {3, 1};
    other.weights = {0.25, 0.75};
    Tensor out_b = model.moe_forward(x, 0, other);
    Tensor as_row = Tensor::from({1, 16}, x.values());
    Tensor single = matmul(silu(matmul(as_row, model.expert_w1(0, 0))), model.expert_w2(0, 0));
    for (int j = 0; j < 16; ++j) {
        EXPECT_NEAR(out_a.at(j), single.at(j), 1e-12);
        EXPECT_NEAR(out_b.at(j), single.at(j), 1e-12);
    }
}

TEST(MoEForward, MatchesDenseReference) {
    MoEModel model(tiny_config(9));
    Rng rng(7);
    Tensor x = random_tensor({16}, rng, -1, 1);
    RoutingDecision dec = model.route(x, 1);
    Tensor out = model.moe_forward(x, 1, dec);

    // straight-line dense reference over the selected experts
    std::vector<double> reference(16, 0.0);
    for (size_t j = 0; j < dec.experts.size(); ++j) {
        const auto& w1 = model.expert_w1(1, dec.experts[j]);
        const auto& w2 = model.expert_w2(1, dec.experts[j]);
        std::vector<double> hidden(static_cast<size_t>(w1.dim(1)), 0.0);
        for (int64_t h = 0; h < w1.dim(1); ++h) {
            double acc = 0;
            for (int64_t i = 0; i < 16; ++i) acc += x.at(i) * w1.at(i, h);
            hidden[static_cast<size_t>(h)] = acc / (1.0 + std::exp(-acc));
        }
        for (int64_t o = 0; o < 16; ++o) {
            double acc = 0;
            for (int64_t h = 0; h < w1.dim(1); ++h) acc += hidden[static_cast<size_t>(h)] * w2.at(h, o);
            reference[static_cast<size_t>(o)] += dec.weights[j] * acc;
        }
    }
    for (int j = 0; j < 16; ++j) EXPECT_NEAR(out.at(j), reference[static_cast<size_t>(j)], 1e-12);
}

TEST(ModelForward, IdentitySteeringIsBitIdentical) {
    MoEModel model(tiny_config());
    SteeringPlan identity;
    identity.multipliers.assign(2, std::vector<double>(4, 1.0));
    ForwardOutput plain = model.forward(probe_tokens());
    ForwardOutput steered = model.forward(probe_tokens(), &identity);
    EXPECT_EQ(plain.logits.values(), steered.logits.values());
    EXPECT_EQ(plain.decisions, steered.decisions);
}

TEST(ModelForward, SingleTokenTraceHasOneDecisionPerLayer) {
    MoEModel model(tiny_config());
    ForwardOutput out = model.forward({3});
    EXPECT_EQ(out.decisions.size(), 2u);
}

TEST(ModelForward, DeterministicAcrossRuns) {
    MoEModel a(tiny_config(77));
    MoEModel b(tiny_config(77));
    EXPECT_EQ(a.forward(probe_tokens()).logits.values(), b.forward(probe_tokens()).logits.values());
    EXPECT_EQ(a.fingerprint(), b.fingerprint());
}

TEST(ModelForward, SparsityCounter) {
    MoEModel model(tiny_config());
    PassCounters pc;
    model.forward(probe_tokens(), nullptr, &pc);
    EXPECT_EQ(pc.forwards, 1u);
    EXPECT_EQ(pc.expert_evals, probe_tokens().size() * 2 /*layers*/ * 2 /*k*/);
    EXPECT_EQ(pc.steering_multiplies, 0u);
}

TEST(ModelForward, OverlongSequenceIsLengthError) {
    MoEModel model(tiny_config());
    std::vector<int> tokens(17, 2);
    try {
        model.forward(tokens);
        FAIL() << "expected length error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Length);
    }
}

TEST(ModelForward, PreSoftmaxTraceWeightsSumToOne) {
    ModelConfig cfg = tiny_config(21);
    cfg.router_mode = RouterMode::PreSoftmax;
    MoEModel model(cfg);
    ForwardOutput out = model.forward(probe_tokens());
    for (const auto& dec : out.decisions) {
        double total = 0;
        for (double w : dec.weights) total += w;
        EXPECT_NEAR(total, 1.0, 1e-9);
    }
}

TEST(ModelForward, FullNetworkGradientsMatchFiniteDifferences) {
    for (RouterMode mode : {RouterMode::PostSoftmax, RouterMode::PreSoftmax}) {
        ModelConfig cfg;
        cfg.vocab_size = 11;
        cfg.embed_dim = 8;
        cfg.num_layers = 2;
        cfg.num_experts = 3;
        cfg.top_k = 2;
        cfg.expert_hidden_dim = 10;
        cfg.max_seq_len = 8;
        cfg.seed = 123;
        cfg.router_mode = mode;
        MoEModel model(cfg);
        std::vector<int> tokens = {1, 4, 9, 2, 6};
        Tensor x_tok = model.embed(tokens);
        auto f = [&](Tape&, Tensor& x) {
            ForwardOutput out = model.forward_embedded(x);
            return MoEModel::loss_from_logits(out.logits, tokens);
        };
        EXPECT_LE(grad_check(f, x_tok, 1e-5), 1e-6) << to_string(mode);
    }
}

TEST(SequenceLoss, UniformLogitsGiveLogV) {
    MoEModel model(tiny_config());
    std::fill(model.unembedding().values().begin(), model.unembedding().values().end(), 0.0);
    Tensor loss = model.sequence_loss(probe_tokens());
    EXPECT_NEAR(loss.item(), std::log(24.0), 1e-9);
}

TEST(SequenceLoss, SinglePositionMaskEqualsThatTerm) {
    MoEModel model(tiny_config(3));
    std::vector<int> tokens = probe_tokens();
    std::vector<bool> mask(tokens.size(), false);
    mask[3] = true;
    Tensor masked = model.sequence_loss(tokens, &mask);
    ForwardOutput out = model.forward(tokens);
    Tensor term = cross_entropy(row(out.logits, 2), {tokens[3]});
    EXPECT_NEAR(masked.item(), term.item(), 1e-12);
}

TEST(SequenceLoss, AllFalseMaskIsDomainError) {
    MoEModel model(tiny_config());
    std::vector<bool> mask(probe_tokens().size(), false);
    try {
        model.sequence_loss(probe_tokens(), &mask);
        FAIL() << "expected domain error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Domain);
    }
}

TEST(Training, ZeroLearningRateLeavesParametersUntouched) {
    MoEModel model(tiny_config(13));
    std::vector<std::vector<double>> before;
    for (const Tensor* p : model.parameters_const()) before.push_back(p->values());
    TrainConfig tc;
    tc.steps = 3;
    tc.batch_size = 2;
    tc.adam.lr = 0.0;
    train(model, {probe_tokens(), {1, 2, 3, 4}}, tc);
    auto params = model.parameters_const();
    for (size_t i = 0; i < params.size(); ++i) EXPECT_EQ(params[i]->values(), before[i]) << "parameter " << i;
}

TEST(Training, SameSeedGivesIdenticalParameters) {
    TrainConfig tc;
    tc.steps = 10;
    tc.batch_size = 2;
    std::vector<std::vector<int>> corpus = {probe_tokens(), {1, 2, 3, 4, 5}, {9, 8, 7}};
    MoEModel a(tiny_config(55));
    MoEModel b(tiny_config(55));
    train(a, corpus, tc);
    train(b, corpus, tc);
    EXPECT_EQ(a.fingerprint(), b.fingerprint());
}

TEST(Training, OverfitsOneSample) {
    MoEModel model(tiny_config(17));
    TrainConfig tc;
    tc.steps = 200;
    tc.batch_size = 1;
    tc.adam.lr = 3e-3;
    std::vector<int> sample = {2, 7, 4, 9, 11, 3, 5, 6};
    TrainResult result = train(model, {sample}, tc);
    ASSERT_EQ(result.loss_curve.size(), 200u);
    EXPECT_GT(result.loss_curve.front(), result.loss_curve.back());
    EXPECT_LT(result.loss_curve.back(), 0.1);
    // monotone decrease after warmup
    for (size_t i = 120; i + 1 < result.loss_curve.size(); ++i) {
        EXPECT_LE(result.loss_curve[i + 1], result.loss_curve[i] + 1e-3) << "step " << i;
    }
    // post-training memorized loss
    EXPECT_LT(model.sequence_loss(sample).item(), 0.05);
}

TEST(Training, DivergenceIsTrainingErrorWithStepIndex) {
    MoEModel model(tiny_config(19));
    TrainConfig tc;
    tc.steps = 60;
    tc.batch_size = 1;
    tc.adam.lr = 1e200;
    try {
        train(model, {probe_tokens()}, tc);
        FAIL() << "expected training error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Training);
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
    }
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
    TempDir tmp("ckpt");
    MoEModel model(tiny_config(23));
    save_checkpoint(model, tmp.str("a.ckpt"));
    MoEModel loaded = load_checkpoint(tmp.str("a.ckpt"));
    save_checkpoint(loaded, tmp.str("b.ckpt"));
    std::ifstream fa(tmp.str("a.ckpt"), std::ios::binary);
    std::ifstream fb(tmp.str("b.ckpt"), std::ios::binary);
    std::string ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    EXPECT_EQ(ba, bb);
    EXPECT_EQ(loaded.fingerprint(), model.fingerprint());
    EXPECT_EQ(loaded.forward(probe_tokens()).logits.values(), model.forward(probe_tokens()).logits.values());
}

TEST(Checkpoint, CorruptedMagicIsFormatError) {
    TempDir tmp("ckpt_bad");
    MoEModel model(tiny_config(29));
    save_checkpoint(model, tmp.str("m.ckpt"));
    {
        std::fstream f(tmp.str("m.ckpt"), std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XX", 2);
    }
    try {
        load_checkpoint(tmp.str("m.ckpt"));
        FAIL() << "expected format error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Format);
    }
}

TEST(Checkpoint, TruncatedFileIsFormatError) {
    TempDir tmp("ckpt_trunc");
    MoEModel model(tiny_config(31));
    save_checkpoint(model, tmp.str("m.ckpt"));
    auto size = std::filesystem::file_size(tmp.str("m.ckpt"));
    std::filesystem::resize_file(tmp.str("m.ckpt"), size / 2);
    try {
        load_checkpoint(tmp.str("m.ckpt"));
        FAIL() << "expected format error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Format);
    }
}

TEST(Checkpoint, VersionMismatchIsFormatError) {
    TempDir tmp("ckpt_ver");
    MoEModel model(tiny_config(37));
    save_checkpoint(model, tmp.str("m.ckpt"));
    {
        std::fstream f(tmp.str("m.ckpt"), std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8);
        uint32_t bad_version = 99;
        f.write(reinterpret_cast<const char*>(&bad_version), sizeof(bad_version));
    }
    try {
        load_checkpoint(tmp.str("m.ckpt"));
        FAIL() << "expected format error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Format);
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
}
