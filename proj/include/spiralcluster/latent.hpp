#pragma once

// Latent feature matrices: ATL1 ingestion, a seeded random-convolution stand-in
// extractor, PCA, and the repeated k-means protocol (N runs x M restarts).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "spiralcluster/error.hpp"
#include "spiralcluster/io.hpp"
#include "spiralcluster/metrics.hpp"
#include "spiralcluster/pipeline.hpp"
#include "spiralcluster/random.hpp"
#include "spiralcluster/stats.hpp"

namespace spiralcluster::latent {

struct LatentMatrix {
    std::size_t rows = 0;
    std::size_t dim = 0;
    std::vector<double> values;  // row-major

    LatentMatrix() = default;
    LatentMatrix(std::size_t r, std::size_t d) : rows(r), dim(d), values(r * d, 0.0) {}

    double* row(std::size_t i) { return values.data() + i * dim; }
    const double* row(std::size_t i) const { return values.data() + i * dim; }
    double& at(std::size_t i, std::size_t j) { return values[i * dim + j]; }
    double at(std::size_t i, std::size_t j) const { return values[i * dim + j]; }

    // Fraction of entries that are exactly zero.
    double sparsity() const {
        if (values.empty()) return 0;
        const auto zeros = std::count(values.begin(), values.end(), 0.0);
        return static_cast<double>(zeros) / static_cast<double>(values.size());
    }

    friend bool operator==(const LatentMatrix&, const LatentMatrix&) = default;
};

inline std::string encode_atl1(const LatentMatrix& m) {
    io::Float32Table t;
    t.header = {static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.dim)};
    t.values.reserve(m.values.size());
    for (double v : m.values) t.values.push_back(static_cast<float>(v));
    return io::encode_table("ATL1", t);
}

inline LatentMatrix decode_atl1(std::string_view bytes, const std::string& what = "latent file") {
    const auto t = io::decode_table(bytes, "ATL1", 2, what);
    LatentMatrix m(t.header[0], t.header[1]);
    require(m.rows >= 1 && m.dim >= 1, what + ": need at least one row and one column");
    for (std::size_t k = 0; k < t.values.size(); ++k) {
        if (!std::isfinite(t.values[k]))
            throw non_finite_error(what + ": non-finite value at row " + std::to_string(k / m.dim) + ", column " +
                                   std::to_string(k % m.dim));
        m.values[k] = t.values[k];
    }
    return m;
}

inline LatentMatrix load_latents(const std::filesystem::path& path) {
    return decode_atl1(io::read_file(path), path.string());
}

// ---- stand-in feature extractor -------------------------------------------

struct StandinConfig {
    std::size_t kernels = 16;
    std::size_t kernel_size = 5;
    std::size_t stride = 2;
    std::vector<std::size_t> pyramid{1, 2};     // pooling grid sizes
    bool power_normalize = true;                 // square root of each pooled value
};

// Fixed bank of seeded zero-mean random kernels: strided valid convolution,
// rectification, sum pooling over a spatial pyramid (normalized by the full map
// area, so every pyramid level carries the same total mass), then a seeded random
// projection to out_dim followed by a second rectification. No biases anywhere,
// so an all-zero image maps to an all-zero vector.
inline LatentMatrix standin_features(const pipeline::ImageSet& images, std::size_t out_dim, std::uint64_t seed,
                                     const StandinConfig& cfg = {}) {
    require(out_dim >= 1, "standin_features: out_dim must be >= 1");
    require(cfg.kernels >= 1 && cfg.kernel_size >= 1 && cfg.stride >= 1, "standin_features: invalid kernel bank");
    const std::size_t ks = cfg.kernel_size;
    std::vector<double> bank(cfg.kernels * ks * ks);
    {
        Rng rng(derive_seed(seed, "standin-kernels"));
        for (std::size_t k = 0; k < cfg.kernels; ++k) {
            double mean = 0;
            for (std::size_t t = 0; t < ks * ks; ++t) mean += (bank[k * ks * ks + t] = rng.normal());
            mean /= static_cast<double>(ks * ks);
            for (std::size_t t = 0; t < ks * ks; ++t) bank[k * ks * ks + t] -= mean;
        }
    }
    std::size_t cells = 0;
    for (auto g : cfg.pyramid) cells += g * g;
    const std::size_t pooled_dim = cfg.kernels * cells;

    std::vector<double> projection(out_dim * pooled_dim);
    {
        Rng rng(derive_seed(seed, "standin-projection"));
        const double s = 1.0 / std::sqrt(static_cast<double>(pooled_dim));
        for (double& w : projection) w = s * rng.normal();
    }

    LatentMatrix out(images.images.size(), out_dim);
    if (images.height < ks || images.width < ks) return out;
    const std::size_t oh = (images.height - ks) / cfg.stride + 1;
    const std::size_t ow = (images.width - ks) / cfg.stride + 1;
    const auto map_area = static_cast<double>(oh * ow);
    std::vector<double> fmap(oh * ow), pooled(pooled_dim);
    for (std::size_t n = 0; n < images.images.size(); ++n) {
        const auto& img = images.images[n];
        std::size_t slot = 0;
        for (std::size_t k = 0; k < cfg.kernels; ++k) {
            const double* kern = &bank[k * ks * ks];
            for (std::size_t r = 0; r < oh; ++r)
                for (std::size_t c = 0; c < ow; ++c) {
                    double acc = 0;
                    for (std::size_t a = 0; a < ks; ++a)
                        for (std::size_t b = 0; b < ks; ++b)
                            acc += kern[a * ks + b] * img.at(r * cfg.stride + a, c * cfg.stride + b);
                    fmap[r * ow + c] = std::max(0.0, acc);
                }
            for (auto g : cfg.pyramid) {
                for (std::size_t gr = 0; gr < g; ++gr)
                    for (std::size_t gc = 0; gc < g; ++gc) {
                        const std::size_t r0 = gr * oh / g, r1 = (gr + 1) * oh / g;
                        const std::size_t c0 = gc * ow / g, c1 = (gc + 1) * ow / g;
                        double acc = 0;
                        for (std::size_t r = r0; r < r1; ++r)
                            for (std::size_t c = c0; c < c1; ++c) acc += fmap[r * ow + c];
                        pooled[slot++] = cfg.power_normalize ? std::sqrt(acc / map_area) : acc / map_area;
                    }
            }
        }
        double* dst = out.row(n);
        for (std::size_t o = 0; o < out_dim; ++o) {
            const double* w = &projection[o * pooled_dim];
            double acc = 0;
            for (std::size_t p = 0; p < pooled_dim; ++p) acc += w[p] * pooled[p];
            dst[o] = std::max(0.0, acc);
        }
    }
    return out;
}

// ---- PCA -------------------------------------------------------------------

struct PcaModel {
    std::vector<double> mean;                  // dim
    LatentMatrix components;                   // n_components x dim, orthonormal rows
    std::vector<double> explained_variance;    // eigenvalues of the sample covariance
    std::vector<double> explained_variance_ratio;
};

struct PcaResult {
    PcaModel model;
    LatentMatrix projected;
};

// Centres columns and projects onto the leading covariance eigenvectors. Each
// component's largest-magnitude loading is made positive. For dim > rows the
// eigenproblem is solved on the Gram matrix instead.
inline PcaResult pca(const LatentMatrix& x, std::size_t n_components) {
    require(x.rows >= 2, "pca: need at least two rows");
    require(n_components >= 1 && n_components <= std::min(x.rows - 1, x.dim),
            "pca: n_components must lie in [1, min(rows-1, dim)] = [1, " +
                std::to_string(std::min(x.rows - 1, x.dim)) + "], got " + std::to_string(n_components));
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> raw(x.values.data(), static_cast<Eigen::Index>(x.rows), static_cast<Eigen::Index>(x.dim));
    const Eigen::RowVectorXd mu = raw.colwise().mean();
    const Eigen::MatrixXd centered = raw.rowwise() - mu;
    const double denom = static_cast<double>(x.rows - 1);

    Eigen::VectorXd evals;  // descending
    Eigen::MatrixXd evecs;  // dim x n_components
    const auto nc = static_cast<Eigen::Index>(n_components);
    double total_variance = 0;
    if (x.dim <= x.rows) {
        const Eigen::MatrixXd cov = centered.transpose() * centered / denom;
        total_variance = cov.trace();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
        evals = es.eigenvalues().reverse().head(nc);
        evecs = es.eigenvectors().rowwise().reverse().leftCols(nc);
    } else {
        const Eigen::MatrixXd gram = centered * centered.transpose() / denom;
        total_variance = gram.trace();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
        evals = es.eigenvalues().reverse().head(nc);
        const Eigen::MatrixXd u = es.eigenvectors().rowwise().reverse().leftCols(nc);
        evecs = centered.transpose() * u;
        for (Eigen::Index c = 0; c < nc; ++c) {
            const double norm = evecs.col(c).norm();
            require(norm > 0, "pca: requested component has zero variance");
            evecs.col(c) /= norm;
        }
    }
    for (Eigen::Index c = 0; c < nc; ++c) {
        Eigen::Index arg = 0;
        evecs.col(c).cwiseAbs().maxCoeff(&arg);
        if (evecs(arg, c) < 0) evecs.col(c) *= -1;
    }

    PcaResult res;
    res.model.mean.assign(mu.data(), mu.data() + mu.size());
    res.model.components = LatentMatrix(n_components, x.dim);
    for (std::size_t c = 0; c < n_components; ++c) {
        for (std::size_t d = 0; d < x.dim; ++d)
            res.model.components.at(c, d) = evecs(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(c));
        const double ev = std::max(0.0, evals(static_cast<Eigen::Index>(c)));
        res.model.explained_variance.push_back(ev);
        res.model.explained_variance_ratio.push_back(total_variance > 0 ? ev / total_variance : 0.0);
    }
    const Eigen::MatrixXd proj = centered * evecs;
    res.projected = LatentMatrix(x.rows, n_components);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t c = 0; c < n_components; ++c)
            res.projected.at(i, c) = proj(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
    return res;
}

// ---- k-means -----------------------------------------------------------------

struct KMeansConfig {
    std::size_t k = 2;
    std::size_t m_inits = 10;
    std::size_t n_runs = 100;
    std::size_t max_iter = 300;
    double tol = 1e-4;
    std::uint64_t rng_seed = 0;

    void validate() const {
        require(k >= 1, "KMeansConfig: k must be >= 1");
        require(m_inits >= 1 && n_runs >= 1 && max_iter >= 1, "KMeansConfig: m_inits, n_runs, max_iter must be >= 1");
        require(tol >= 0, "KMeansConfig: tol must be >= 0");
    }
};

struct ClusteringResult {
    metrics::LabelVector assignments;
    LatentMatrix centroids;  // k x dim
    double inertia = 0;
    std::size_t iterations = 0;
};

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t d) {
    double s = 0;
    for (std::size_t i = 0; i < d; ++i) {
        const double t = a[i] - b[i];
        s += t * t;
    }
    return s;
}

// Nearest centroid (lowest index on ties) for every row; returns inertia.
inline double assign(const LatentMatrix& x, const LatentMatrix& c, metrics::LabelVector& labels,
                     std::vector<double>& dist) {
    labels.resize(x.rows);
    dist.resize(x.rows);
    double inertia = 0;
    for (std::size_t i = 0; i < x.rows; ++i) {
        double best = std::numeric_limits<double>::infinity();
        long arg = 0;
        for (std::size_t j = 0; j < c.rows; ++j) {
            const double d = sq_dist(x.row(i), c.row(j), x.dim);
            if (d < best) {
                best = d;
                arg = static_cast<long>(j);
            }
        }
        labels[i] = arg;
        dist[i] = best;
        inertia += best;
    }
    return inertia;
}

inline LatentMatrix kmeanspp(const LatentMatrix& x, std::size_t k, Rng& rng) {
    LatentMatrix c(k, x.dim);
    std::size_t first = rng.uniform_index(x.rows);
    std::copy(x.row(first), x.row(first) + x.dim, c.row(0));
    std::vector<double> d2(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) d2[i] = sq_dist(x.row(i), c.row(0), x.dim);
    for (std::size_t j = 1; j < k; ++j) {
        double total = 0;
        for (double v : d2) total += v;
        std::size_t pick = 0;
        if (total > 0) {
            double target = rng.uniform() * total;
            pick = x.rows - 1;
            for (std::size_t i = 0; i < x.rows; ++i) {
                target -= d2[i];
                if (target < 0 && d2[i] > 0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.uniform_index(x.rows);
        }
        std::copy(x.row(pick), x.row(pick) + x.dim, c.row(j));
        for (std::size_t i = 0; i < x.rows; ++i) d2[i] = std::min(d2[i], sq_dist(x.row(i), c.row(j), x.dim));
    }
    return c;
}

}  // namespace detail

// k-means++ seeding, then Lloyd iterations until the relative inertia change drops
// below tol or max_iter is reached. The returned assignments are the nearest-centroid
// labels for the returned centroids.
inline ClusteringResult kmeans_single(const LatentMatrix& x, std::size_t k, std::size_t max_iter, double tol,
                                      std::uint64_t seed) {
    require(k >= 1, "kmeans: k must be >= 1");
    require(k <= x.rows, "kmeans: k = " + std::to_string(k) + " exceeds the number of rows " + std::to_string(x.rows));
    require(max_iter >= 1, "kmeans: max_iter must be >= 1");
    Rng rng(seed);
    ClusteringResult res;
    res.centroids = detail::kmeanspp(x, k, rng);
    std::vector<double> dist;
    double previous = std::numeric_limits<double>::infinity();
    for (std::size_t it = 1;; ++it) {
        res.inertia = detail::assign(x, res.centroids, res.assignments, dist);
        res.iterations = it;
        const bool converged = res.inertia == 0 || (std::isfinite(previous) && previous - res.inertia <= tol * previous);
        if (converged || it == max_iter) break;
        previous = res.inertia;

        LatentMatrix next(k, x.dim);
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < x.rows; ++i) {
            const auto j = static_cast<std::size_t>(res.assignments[i]);
            ++counts[j];
            for (std::size_t d = 0; d < x.dim; ++d) next.at(j, d) += x.at(i, d);
        }
        for (std::size_t j = 0; j < k; ++j) {
            if (counts[j] > 0) {
                for (std::size_t d = 0; d < x.dim; ++d) next.at(j, d) /= static_cast<double>(counts[j]);
                continue;
            }
            // Empty cluster: move it onto the point farthest from its centroid.
            const auto far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
            std::copy(x.row(far), x.row(far) + x.dim, next.row(j));
            dist[far] = 0;
        }
        res.centroids = std::move(next);
    }
    return res;
}

inline std::uint64_t restart_seed(std::uint64_t base, std::size_t restart) {
    return derive_seed(base, "kmeans-restart", {restart});
}

inline std::uint64_t run_seed(std::uint64_t base, std::size_t run) { return derive_seed(base, "kmeans-run", {run}); }

// Minimum-inertia result over m_inits restarts. Labels play no part in selection.
inline ClusteringResult kmeans_best_of(const LatentMatrix& x, const KMeansConfig& cfg) {
    cfg.validate();
    ClusteringResult best;
    for (std::size_t r = 0; r < cfg.m_inits; ++r) {
        auto res = kmeans_single(x, cfg.k, cfg.max_iter, cfg.tol, restart_seed(cfg.rng_seed, r));
        if (r == 0 || res.inertia < best.inertia) best = std::move(res);
    }
    return best;
}

struct RunRecord {
    std::uint64_t seed = 0;
    double inertia = 0;
    double ari = 0;
    double accuracy = 0;
};

struct ExperimentStats {
    std::vector<RunRecord> runs;
    std::size_t top1_index = 0;  // max ARI, first on ties
    metrics::ClusterReport top1;
    Summary ari;
    Summary accuracy;
};

// n_runs independent best-of-m_inits clusterings, each scored against labels.
inline ExperimentStats kmeans_experiment(const LatentMatrix& x, const metrics::LabelVector& labels,
                                         const KMeansConfig& cfg) {
    cfg.validate();
    require(labels.size() == x.rows, "kmeans_experiment: " + std::to_string(labels.size()) + " labels for " +
                                         std::to_string(x.rows) + " rows");
    ExperimentStats stats;
    std::vector<double> aris, accs;
    for (std::size_t run = 0; run < cfg.n_runs; ++run) {
        KMeansConfig rc = cfg;
        rc.rng_seed = run_seed(cfg.rng_seed, run);
        const auto res = kmeans_best_of(x, rc);
        auto report = metrics::evaluate(labels, res.assignments);
        stats.runs.push_back({rc.rng_seed, res.inertia, report.ari, report.accuracy});
        aris.push_back(report.ari);
        accs.push_back(report.accuracy);
        if (run == 0 || report.ari > stats.top1.ari) {
            stats.top1 = std::move(report);
            stats.top1_index = run;
        }
    }
    stats.ari = summarize(aris);
    stats.accuracy = summarize(accs);
    return stats;
}

inline nlohmann::json to_json(const ExperimentStats& s) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : s.runs)
        runs.push_back({{"seed", r.seed}, {"inertia", r.inertia}, {"ari", r.ari}, {"accuracy", r.accuracy}});
    return {
        {"top1", {{"run", s.top1_index}, {"report", metrics::to_json(s.top1)}}},
        {"ari", {{"mean", s.ari.mean}, {"std", s.ari.std}}},
        {"accuracy", {{"mean", s.accuracy.mean}, {"std", s.accuracy.std}}},
        {"runs", runs},
    };
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(KMeansConfig, k, m_inits, n_runs, max_iter, tol, rng_seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(StandinConfig, kernels, kernel_size, stride, pyramid, power_normalize)

}  // namespace spiralcluster::latent
