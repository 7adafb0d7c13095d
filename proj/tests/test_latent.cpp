#include <gtest/gtest.h>

#include <cmath>

#include "spiralcluster/latent.hpp"
#include "spiralcluster/simkit.hpp"
#include "oracles.hpp"

using namespace spiralcluster;
using namespace spiralcluster::latent;

namespace {

LatentMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    LatentMatrix m(rows.size(), rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j) m.at(i, j) = rows[i][j];
    return m;
}

std::vector<std::vector<double>> to_rows(const LatentMatrix& m) {
    std::vector<std::vector<double>> out(m.rows, std::vector<double>(m.dim));
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.dim; ++j) out[i][j] = m.at(i, j);
    return out;
}

LatentMatrix gaussian_blobs(std::size_t per_blob, std::size_t dim, double separation, std::uint64_t seed,
                            metrics::LabelVector* labels = nullptr) {
    Rng rng(seed);
    LatentMatrix m(2 * per_blob, dim);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const bool second = i >= per_blob;
        for (std::size_t d = 0; d < dim; ++d) m.at(i, d) = rng.normal() + (second && d == 0 ? separation : 0.0);
        if (labels) labels->push_back(second ? 1 : 0);
    }
    return m;
}

pipeline::ImageSet simulated_images(std::size_t per_class, std::uint64_t seed, metrics::LabelVector* labels = nullptr) {
    sim::SimDatasetConfig cfg;
    cfg.proton_count = static_cast<int>(per_class);
    cfg.carbon_count = static_cast<int>(per_class);
    cfg.rng_seed = seed;
    const auto ev = sim::generate_dataset(cfg, {}, {});
    if (labels)
        for (const auto& e : ev) labels->push_back(*e.label == sim::Label::proton ? 0 : 1);
    return pipeline::preprocess_events(ev, {});
}

}  // namespace

TEST(Atl1, RoundTrip) {
    const auto m = from_rows({{1, 2, 3}, {4, 5, 6}});
    const auto back = decode_atl1(encode_atl1(m));
    EXPECT_EQ(back.rows, 2u);
    EXPECT_EQ(back.dim, 3u);
    EXPECT_EQ(back, m);
}

TEST(Atl1, LargeDimAcceptedWithSparsity) {
    LatentMatrix m(2, 8192);
    for (std::size_t i = 0; i < m.values.size(); i += 5) m.values[i] = 1.0;
    const auto back = decode_atl1(encode_atl1(m));
    EXPECT_EQ(back.dim, 8192u);
    EXPECT_NEAR(back.sparsity(), 0.8, 1e-3);
}

TEST(Atl1, DistinctLoadErrors) {
    const auto bytes = encode_atl1(from_rows({{1, 2}, {3, 4}}));
    EXPECT_THROW(decode_atl1("ATC1" + bytes.substr(4)), bad_magic_error);
    try {
        decode_atl1(bytes.substr(0, bytes.size() - 3));
        FAIL() << "expected truncated_error";
    } catch (const truncated_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("expected " + std::to_string(bytes.size())), std::string::npos) << msg;
        EXPECT_NE(msg.find("got " + std::to_string(bytes.size() - 3)), std::string::npos) << msg;
    }
    auto nan_bytes = encode_atl1(from_rows({{1, std::numeric_limits<double>::quiet_NaN()}, {3, 4}}));
    EXPECT_THROW(decode_atl1(nan_bytes), non_finite_error);
}

TEST(Standin, ZeroImageGivesZeroFeatures) {
    pipeline::ImageSet set{32, 32, {pipeline::ImageGrid(32, 32)}};
    const auto f = standin_features(set, 64, 1);
    for (double v : f.values) EXPECT_EQ(v, 0.0);
}

TEST(Standin, DeterministicAndSparse) {
    const auto images = simulated_images(50, 3);
    const auto a = standin_features(images, 256, 11), b = standin_features(images, 256, 11);
    EXPECT_EQ(a, b);
    EXPECT_GE(a.sparsity(), 0.40);
    EXPECT_NE(standin_features(images, 256, 12), a);
    for (double v : a.values) EXPECT_GE(v, 0.0);
}

TEST(Pca, RankOneLine) {
    const auto m = from_rows({{0, 0}, {1, 2}, {2, 4}, {3, 6}, {-1, -2}});
    const auto r = pca(m, 1);
    EXPECT_NEAR(r.model.explained_variance_ratio[0], 1.0, 1e-10);
    EXPECT_NEAR(r.model.components.at(0, 1), 2 / std::sqrt(5.0), 1e-10);  // largest loading positive
}

TEST(Pca, FullRankPreservesDistances) {
    Rng rng(2);
    LatentMatrix m(20, 5);
    for (double& v : m.values) v = rng.normal();
    const auto r = pca(m, 5);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = i + 1; j < m.rows; ++j) {
            double d0 = 0, d1 = 0;
            for (std::size_t k = 0; k < 5; ++k) {
                d0 += std::pow(m.at(i, k) - m.at(j, k), 2);
                d1 += std::pow(r.projected.at(i, k) - r.projected.at(j, k), 2);
            }
            EXPECT_NEAR(std::sqrt(d0), std::sqrt(d1), 1e-8);
        }
}

TEST(Pca, WideInputAndOrthonormality) {
    Rng rng(4);
    LatentMatrix m(150, 400);
    for (double& v : m.values) v = rng.uniform() < 0.8 ? 0.0 : rng.uniform();
    const auto r = pca(m, 100);
    EXPECT_EQ(r.projected.dim, 100u);
    const auto& c = r.model.components;
    for (std::size_t a = 0; a < 100; ++a)
        for (std::size_t b = a; b < 100; ++b) {
            double dot = 0;
            for (std::size_t d = 0; d < c.dim; ++d) dot += c.at(a, d) * c.at(b, d);
            EXPECT_NEAR(dot, a == b ? 1.0 : 0.0, 1e-10);
        }
    for (std::size_t k = 1; k < 100; ++k)
        EXPECT_GE(r.model.explained_variance[k - 1], r.model.explained_variance[k] - 1e-12);
}

TEST(Pca, RangeChecked) {
    const auto m = from_rows({{0, 1}, {1, 0}, {2, 2}});
    EXPECT_THROW(pca(m, 0), contract_violation);
    EXPECT_THROW(pca(m, 3), contract_violation);
}

TEST(KMeans, TwoTightPairs) {
    const auto m = from_rows({{-10, 10}, {-10, 11}, {10, -10}, {10, -11}});
    const auto r = kmeans_single(m, 2, 100, 1e-4, 1);
    EXPECT_NEAR(r.inertia, oracles::min_inertia_two_partition(to_rows(m)), 1e-9);
    EXPECT_EQ(r.assignments[0], r.assignments[1]);
    EXPECT_NE(r.assignments[0], r.assignments[2]);
    const auto c = static_cast<std::size_t>(r.assignments[0]);
    EXPECT_NEAR(r.centroids.at(c, 1), 10.5, 1e-12);
}

TEST(KMeans, SingleClusterIsMean) {
    Rng rng(5);
    LatentMatrix m(30, 3);
    for (double& v : m.values) v = rng.normal();
    const auto r = kmeans_single(m, 1, 100, 1e-4, 3);
    double total = 0;
    for (std::size_t d = 0; d < 3; ++d) {
        double mean = 0;
        for (std::size_t i = 0; i < 30; ++i) mean += m.at(i, d);
        mean /= 30;
        EXPECT_NEAR(r.centroids.at(0, d), mean, 1e-12);
        for (std::size_t i = 0; i < 30; ++i) total += std::pow(m.at(i, d) - mean, 2);
    }
    EXPECT_NEAR(r.inertia, total, 1e-9 * total);
}

TEST(KMeans, DuplicatedDatasetDoublesInertia) {
    const auto m = gaussian_blobs(20, 2, 12, 9);
    LatentMatrix dup(m.rows * 2, m.dim);
    std::copy(m.values.begin(), m.values.end(), dup.values.begin());
    std::copy(m.values.begin(), m.values.end(), dup.values.begin() + static_cast<long>(m.values.size()));
    const auto a = kmeans_single(m, 2, 100, 0, 1), b = kmeans_single(dup, 2, 100, 0, 1);
    EXPECT_NEAR(b.inertia, 2 * a.inertia, 1e-9 * a.inertia);
    // Same centroid set (order may differ).
    auto key = [](const LatentMatrix& c) {
        std::vector<std::vector<double>> rows = to_rows(c);
        std::sort(rows.begin(), rows.end());
        return rows;
    };
    const auto ka = key(a.centroids), kb = key(b.centroids);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t d = 0; d < 2; ++d) EXPECT_NEAR(ka[i][d], kb[i][d], 1e-9);
}

TEST(KMeans, KLargerThanRowsRejected) {
    EXPECT_THROW(kmeans_single(from_rows({{0}, {1}}), 3, 10, 0, 0), contract_violation);
}

TEST(KMeans, AssignmentOptimalityAndInertiaConsistency) {
    const auto m = gaussian_blobs(40, 3, 3, 21);
    const auto r = kmeans_single(m, 3, 300, 0, 4);
    double inertia = 0;
    for (std::size_t i = 0; i < m.rows; ++i) {
        const auto own = static_cast<std::size_t>(r.assignments[i]);
        double d_own = 0;
        for (std::size_t d = 0; d < m.dim; ++d) d_own += std::pow(m.at(i, d) - r.centroids.at(own, d), 2);
        inertia += d_own;
        for (std::size_t j = 0; j < 3; ++j) {
            double dj = 0;
            for (std::size_t d = 0; d < m.dim; ++d) dj += std::pow(m.at(i, d) - r.centroids.at(j, d), 2);
            EXPECT_GE(dj, d_own);
        }
    }
    EXPECT_NEAR(inertia, r.inertia, 1e-9 * inertia);
}

TEST(KMeansBestOf, SingleInitMatchesSingleRun) {
    const auto m = gaussian_blobs(15, 2, 5, 2);
    KMeansConfig cfg;
    cfg.m_inits = 1;
    cfg.rng_seed = 42;
    const auto a = kmeans_best_of(m, cfg);
    const auto b = kmeans_single(m, cfg.k, cfg.max_iter, cfg.tol, restart_seed(42, 0));
    EXPECT_EQ(a.assignments, b.assignments);
    EXPECT_EQ(a.inertia, b.inertia);
}

TEST(KMeansBestOf, MinimumOverRestartsAndNested) {
    const auto m = gaussian_blobs(25, 4, 2, 3);
    KMeansConfig cfg;
    cfg.k = 4;
    cfg.rng_seed = 7;
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t M = 1; M <= 8; ++M) {
        cfg.m_inits = M;
        const auto best = kmeans_best_of(m, cfg);
        EXPECT_LE(best.inertia, prev);
        prev = best.inertia;
        for (std::size_t r = 0; r < M; ++r)
            EXPECT_LE(best.inertia, kmeans_single(m, 4, cfg.max_iter, cfg.tol, restart_seed(7, r)).inertia);
    }
}

TEST(KMeansBestOf, SmallInstanceGlobalOptimum) {
    Rng rng(13);
    int hits = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 4 + rng.uniform_index(5);
        LatentMatrix m(n, 2);
        for (double& v : m.values) v = rng.uniform(-5, 5);
        KMeansConfig cfg;
        cfg.m_inits = 10;
        cfg.tol = 0;
        cfg.rng_seed = static_cast<std::uint64_t>(trial);
        const double opt = oracles::min_inertia_two_partition(to_rows(m));
        hits += std::abs(kmeans_best_of(m, cfg).inertia - opt) <= 1e-9 * std::max(1.0, opt);
    }
    EXPECT_GE(hits, 95);
}

TEST(KMeansBestOf, IgnoresLabels) {
    metrics::LabelVector labels;
    const auto m = gaussian_blobs(20, 2, 6, 8, &labels);
    KMeansConfig cfg;
    cfg.rng_seed = 3;
    cfg.n_runs = 3;
    auto shuffled = labels;
    Rng rng(1);
    rng.shuffle(shuffled.begin(), shuffled.end());
    const auto a = kmeans_experiment(m, labels, cfg), b = kmeans_experiment(m, shuffled, cfg);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.runs[i].inertia, b.runs[i].inertia);
}

TEST(KMeansExperiment, SeparatedBlobsHaveNoVariance) {
    metrics::LabelVector labels;
    const auto m = gaussian_blobs(50, 5, 10, 31, &labels);
    KMeansConfig cfg;
    cfg.n_runs = 20;
    cfg.rng_seed = 5;
    const auto s = kmeans_experiment(m, labels, cfg);
    EXPECT_LE(s.ari.std, 0.01);
    EXPECT_GE(s.top1.ari, s.ari.mean - 5 * s.ari.std);
    EXPECT_GE(s.ari.std, 0.0);
    for (const auto& r : s.runs) EXPECT_LE(r.ari, s.top1.ari);
    const auto j = to_json(s);
    EXPECT_EQ(j.at("runs").size(), 20u);
}
