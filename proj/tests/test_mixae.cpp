#include <gtest/gtest.h>

#include <cmath>

#include "spiralcluster/mixae.hpp"
#include "gradcheck.hpp"

using namespace spiralcluster;
using namespace spiralcluster::mixae;
using nn::Tensor;

namespace {

Architecture toy_arch() {
    Architecture a;
    a.resolution = 8;
    a.filters = {4, 2};
    a.latent_dim = 3;
    return a;
}

// Horizontal versus vertical bars at random offsets, 8x8.
pipeline::ImageSet bars(std::size_t n, std::uint64_t seed, metrics::LabelVector* labels = nullptr) {
    Rng rng(seed);
    pipeline::ImageSet set{8, 8, {}};
    for (std::size_t i = 0; i < n; ++i) {
        pipeline::ImageGrid g(8, 8);
        const bool vertical = i % 2 == 1;
        const std::size_t at = rng.uniform_index(8);
        for (std::size_t t = 0; t < 8; ++t) g.at(vertical ? t : at, vertical ? at : t) = rng.uniform(0.5, 1.0);
        set.images.push_back(g);
        if (labels) labels->push_back(vertical ? 1 : 0);
    }
    return set;
}

TrainConfig toy_config() {
    TrainConfig c;
    c.arch = toy_arch();
    c.epochs = 3;
    c.batch_size = 8;
    c.seed = 4;
    return c;
}

Tensor rows(std::size_t k, std::vector<double> v) {
    const std::size_t n = v.size() / k;
    return Tensor({n, k}, std::move(v));
}

}  // namespace

TEST(Architecture, BottleneckAndValidation) {
    EXPECT_EQ(Architecture{}.bottleneck(), 8u);
    EXPECT_EQ(Architecture::desk().bottleneck(), 8u);
    auto bad = Architecture::desk();
    bad.resolution = 30;
    EXPECT_THROW(bad.validate(), contract_violation);
    EXPECT_THROW(make_model(1, toy_arch(), 0), contract_violation);
}

TEST(Forward, ShapesAndSoftmaxRows) {
    const auto model = make_model(3, toy_arch(), 1);
    const auto batch = gradcheck::random_tensor({5, 1, 8, 8}, 2, 0, 1);
    const auto fwd = mixae_forward(model, batch);
    ASSERT_EQ(fwd.p.shape, (nn::Shape{5, 3}));
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ(fwd.reconstruction(k).shape, batch.shape);
        EXPECT_EQ(fwd.latent(k).shape, (nn::Shape{5, 3}));
    }
    for (std::size_t b = 0; b < 5; ++b) {
        double s = 0;
        for (std::size_t k = 0; k < 3; ++k) {
            EXPECT_GE(fwd.p.values[b * 3 + k], 0.0);
            s += fwd.p.values[b * 3 + k];
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
    EXPECT_THROW(mixae_forward(model, Tensor({2, 1, 16, 16})), contract_violation);
}

TEST(Forward, SymmetricModelGivesUniformConfidences) {
    auto model = make_model(3, toy_arch(), 7);
    for (std::size_t k = 1; k < 3; ++k) {
        auto e = model.encoders[k].mutable_params();
        std::copy(model.encoders[0].params().begin(), model.encoders[0].params().end(), e.begin());
        auto d = model.decoders[k].mutable_params();
        std::copy(model.decoders[0].params().begin(), model.decoders[0].params().end(), d.begin());
    }
    // Every output unit of the final dense layer gets row 0's weights and bias.
    const auto& last = model.assignment.layers().back();
    const std::size_t in = last.in_shape[0], K = 3;
    auto p = model.assignment.mutable_params();
    for (std::size_t u = 1; u < K; ++u) {
        for (std::size_t d = 0; d < in; ++d) p[last.param_offset + u * in + d] = p[last.param_offset + d];
        p[last.param_offset + last.weight_count + u] = p[last.param_offset + last.weight_count];
    }
    const auto fwd = mixae_forward(model, gradcheck::random_tensor({4, 1, 8, 8}, 3, 0, 1));
    for (double v : fwd.p.values) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(Entropy, SampleEntropyExamples) {
    EXPECT_NEAR(sample_entropy(rows(2, {1, 0, 0, 1})), 0.0, 1e-9);
    EXPECT_NEAR(sample_entropy(rows(2, {0.5, 0.5, 0.5, 0.5})), std::log(2.0), 1e-9);
    EXPECT_NEAR(sample_entropy(rows(2, {0.9, 0.1})), 0.3251, 5e-5);
    EXPECT_THROW(sample_entropy(rows(2, {1.1, -0.1})), contract_violation);
}

TEST(Entropy, BatchEntropyExamplesAndSecondMinimum) {
    const double one_hot = batch_entropy(rows(2, {1, 0, 0, 1}));
    const double uniform = batch_entropy(rows(2, {0.5, 0.5, 0.5, 0.5}));
    EXPECT_NEAR(one_hot, -std::log(2.0), 1e-9);
    EXPECT_NEAR(uniform, -std::log(2.0), 1e-9);
    EXPECT_NEAR(one_hot, uniform, 1e-9);
    EXPECT_NEAR(batch_entropy(rows(2, {1, 0, 1, 0})), 0.0, 1e-9);
    EXPECT_THROW(batch_entropy(rows(2, {std::nan(""), 1})), numeric_domain_error);
}

TEST(Entropy, BoundsOnRandomConfidences) {
    Rng rng(9);
    for (std::size_t K : {2u, 3u, 5u}) {
        for (int t = 0; t < 50; ++t) {
            const auto p = nn::softmax(gradcheck::random_tensor({7, K}, rng.next_u64(), -4, 4));
            const double s = sample_entropy(p), b = batch_entropy(p), lk = std::log(static_cast<double>(K));
            EXPECT_GE(s, -1e-9);
            EXPECT_LE(s, lk + 1e-9);
            EXPECT_GE(b, -lk - 1e-9);
            EXPECT_LE(b, 1e-9);
        }
    }
}

TEST(Loss, ScalarAssembly) {
    // 0.1 * 2.0 + 0.01 * 0.69 + 1e5 * -0.69 = 0.2 + 0.0069 - 69000
    EXPECT_NEAR(assemble({0.1, 0.01, 1e5}, 2.0, 0.69, -0.69).total, -68999.7931, 1e-6);
}

TEST(Loss, ZeroWeightLimitAndPerfectReconstruction) {
    const auto model = make_model(2, toy_arch(), 3);
    const auto batch = gradcheck::random_tensor({6, 1, 8, 8}, 4, 0, 1);
    auto fwd = mixae_forward(model, batch);
    const auto l = mixae_loss(fwd, batch, {0.7, 1e-30, 1e-30});
    EXPECT_GT(l.reconstruction, 0.0);
    EXPECT_NEAR(l.total, 0.7 * l.reconstruction, 1e-12);
    for (auto& d : fwd.decoded) d.output = batch;
    EXPECT_EQ(mixae_loss(fwd, batch, {}).reconstruction, 0.0);
}

TEST(Loss, ReconstructionIsConfidenceWeightedMse) {
    const auto model = make_model(2, toy_arch(), 5);
    const auto batch = gradcheck::random_tensor({3, 1, 8, 8}, 6, 0, 1);
    const auto fwd = mixae_forward(model, batch);
    double expect = 0;
    for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t k = 0; k < 2; ++k) {
            double se = 0;
            for (std::size_t i = 0; i < 64; ++i)
                se += std::pow(fwd.reconstruction(k).values[b * 64 + i] - batch.values[b * 64 + i], 2);
            expect += fwd.p.values[b * 2 + k] * se / 64;
        }
    EXPECT_NEAR(mixae_loss(fwd, batch, {}).reconstruction, expect / 3, 1e-14);
}

TEST(Gradients, FullLossMatchesFiniteDifferences) {
    for (const Weights w : {Weights{1.0, 0.5, 2.0}, Weights{0.1, 0.01, 10.0}}) {
        auto model = make_model(2, toy_arch(), 11);
        auto batch = gradcheck::random_tensor({4, 1, 8, 8}, 12, 0, 1);
        const auto r = gradcheck::check_mixae(model, batch, w, 13);
        EXPECT_EQ(r.checked, 64u);
        EXPECT_LE(r.worst, 1e-4);
    }
}

TEST(Assign, ArgmaxAndTieBreak) {
    EXPECT_EQ(argmax_rows(rows(3, {0.1, 0.7, 0.2})), (metrics::LabelVector{1}));
    EXPECT_EQ(argmax_rows(rows(2, {0.5, 0.5})), (metrics::LabelVector{0}));
    EXPECT_EQ(argmax_rows(rows(3, {0.2, 0.4, 0.4})), (metrics::LabelVector{1}));
}

TEST(Split, SeventyFiveTwentyFiveDisjoint) {
    const auto s = train_holdout_split(2000, 0.75, 3);
    EXPECT_EQ(s.train.size(), 1500u);
    EXPECT_EQ(s.holdout.size(), 500u);
    std::vector<int> seen(2000, 0);
    for (auto i : s.train) ++seen[i];
    for (auto i : s.holdout) ++seen[i];
    for (int c : seen) EXPECT_EQ(c, 1);
    EXPECT_EQ(train_holdout_split(2000, 0.75, 3).train, s.train);
}

TEST(Train, DeterministicWithDecompositionInHistory) {
    metrics::LabelVector y;
    const auto data = bars(40, 1, &y);
    const auto cfg = toy_config();
    const auto a = train_mixae(data, y, cfg), b = train_mixae(data, y, cfg);
    ASSERT_EQ(a.history.size(), 3u);
    EXPECT_EQ(a.status, RunStatus::ok);
    EXPECT_EQ(a.steps, 3u * 4u);  // 30 training images, batches of 8
    for (std::size_t e = 0; e < 3; ++e) {
        const auto& l = a.history[e].loss;
        EXPECT_NEAR(l.total,
                    cfg.weights.theta * l.reconstruction + cfg.weights.alpha * l.sample_entropy +
                        cfg.weights.gamma * l.batch_entropy,
                    1e-9);
        EXPECT_TRUE(std::isfinite(l.total));
        EXPECT_EQ(l.total, b.history[e].loss.total);
        ASSERT_TRUE(a.history[e].ari.has_value());
        EXPECT_EQ(*a.history[e].ari, *b.history[e].ari);
    }
    const auto na = a.model.networks(), nb = b.model.networks();
    for (std::size_t i = 0; i < na.size(); ++i)
        EXPECT_TRUE(std::equal(na[i]->params().begin(), na[i]->params().end(), nb[i]->params().begin()));
}

TEST(Train, UnlabelledRunHasNoScores) {
    const auto r = train_mixae(bars(20, 2), std::nullopt, toy_config());
    for (const auto& e : r.history) EXPECT_FALSE(e.ari.has_value());
    EXPECT_FALSE(r.final_ari.has_value());
}

TEST(Train, OverflowingLossMarksDivergedAndRestores) {
    auto cfg = toy_config();
    cfg.weights.gamma = 1e308;
    const auto data = bars(20, 3);
    const auto r = train_mixae(data, std::nullopt, cfg);
    EXPECT_EQ(r.status, RunStatus::diverged);
    EXPECT_TRUE(r.history.empty());
    const auto fresh = make_model(cfg.k, cfg.arch, derive_seed(cfg.seed, "model-init"));
    const auto a = r.model.networks(), b = fresh.networks();
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_TRUE(std::equal(a[i]->params().begin(), a[i]->params().end(), b[i]->params().begin()));
}

TEST(Train, CollapseDetectorFlagsAfterPatience) {
    auto cfg = toy_config();
    cfg.collapse_fraction = 0.0;  // every epoch counts as collapsed
    cfg.collapse_patience = 3;
    cfg.epochs = 2;
    EXPECT_EQ(train_mixae(bars(20, 4), std::nullopt, cfg).status, RunStatus::ok);
    cfg.epochs = 3;
    EXPECT_EQ(train_mixae(bars(20, 4), std::nullopt, cfg).status, RunStatus::collapsed);
}

TEST(Train, RejectsMismatchedImages) {
    auto cfg = toy_config();
    cfg.arch = Architecture::desk();
    EXPECT_THROW(train_mixae(bars(10, 1), std::nullopt, cfg), contract_violation);
}

TEST(Artifacts, CheckpointRoundTrip) {
    const auto data = bars(20, 5);
    const auto cfg = toy_config();
    const auto r = train_mixae(data, std::nullopt, cfg);
    const auto bytes = encode_model(r.model, cfg, r.steps);
    const auto m = decode_model(bytes);
    EXPECT_EQ(m.k, 2u);
    EXPECT_EQ(m.param_count(), r.model.param_count());
    const auto a = r.model.networks(), b = m.networks();
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i]->param_count(); ++j)
            EXPECT_EQ(b[i]->params()[j], static_cast<double>(static_cast<float>(a[i]->params()[j])));
    EXPECT_EQ(assign_clusters(m, data).size(), 20u);
    EXPECT_THROW(decode_model(bytes.substr(0, bytes.size() - 4)), truncated_error);
    EXPECT_THROW(decode_model("ATL1" + bytes.substr(4)), bad_magic_error);
}

TEST(Artifacts, HistoryCsvAndRunJson) {
    metrics::LabelVector y;
    const auto data = bars(20, 6, &y);
    const auto cfg = toy_config();
    const auto r = train_mixae(data, y, cfg);
    const auto csv = history_csv(r.history);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,r,s,b,total,ari,acc");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
    const auto j = run_json(r, cfg);
    EXPECT_EQ(j.at("status"), "ok");
    EXPECT_EQ(j.at("config").get<TrainConfig>().seed, cfg.seed);
}

TEST(Grid, DefaultSpecMatchesPublishedRanges) {
    const GridSearchSpec spec;
    EXPECT_EQ(spec.theta.values().size(), 7u);
    EXPECT_NEAR(spec.theta.values().front(), 0.1, 1e-15);
    EXPECT_NEAR(spec.theta.values().back(), 1e5, 1e-9);
    EXPECT_EQ(spec.alpha.values().size(), 5u);
    EXPECT_NEAR(spec.alpha.values().front(), 1e-5, 1e-20);
    EXPECT_EQ(spec.gamma.values().size(), 3u);
    EXPECT_NEAR(spec.gamma.values()[1], 1e4, 1e-9);
    EXPECT_NEAR(presets::experimental.gamma, 3162.2776601683795, 1e-9);
    EXPECT_EQ(presets::simulated.theta, 0.1);
    EXPECT_NEAR((ExponentRange{3, 4, 3}.values()[1]), std::pow(10.0, 3.5), 1e-9);
}

TEST(Grid, SingleCellEqualsDirectTraining) {
    metrics::LabelVector y;
    const auto data = bars(24, 7, &y);
    auto cfg = toy_config();
    const GridSearchSpec one{{-1, -1, 1}, {-2, -2, 1}, {5, 5, 1}};
    const auto g = grid_search(one, cfg, 1, data, y);
    ASSERT_EQ(g.cells.size(), 1u);
    ASSERT_EQ(g.best, std::optional<std::size_t>(0));
    cfg.weights = presets::simulated;
    cfg.seed = run_seed(cfg.seed, 0);
    const auto direct = train_mixae(data, y, cfg);
    EXPECT_EQ(g.cells[0].runs[0].ari, direct.final_ari);
    EXPECT_EQ(g.cells[0].runs[0].final_total, direct.history.back().loss.total);
    EXPECT_TRUE(g.ranked_by_ari);
    EXPECT_EQ(to_json(g).at("cells").size(), 1u);
}
