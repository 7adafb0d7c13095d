#pragma once

// Mixture of convolutional autoencoders with an assignment network, trained
// end-to-end on a weighted sum of confidence-weighted reconstruction error,
// mean sample entropy and negative batch-marginal entropy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spiralcluster/error.hpp"
#include "spiralcluster/metrics.hpp"
#include "spiralcluster/neuralcore.hpp"
#include "spiralcluster/pipeline.hpp"
#include "spiralcluster/random.hpp"

namespace spiralcluster::mixae {

using nn::LayerSpec;
using nn::Network;
using nn::Tensor;

inline constexpr double entropy_epsilon = 1e-12;

struct Architecture {
    std::size_t resolution = 128;
    std::vector<std::size_t> filters{64, 32, 16, 8};
    std::size_t kernel = 3;
    std::size_t stride = 2;
    std::size_t latent_dim = 20;
    double lrelu_slope = 0.01;
    std::size_t assign_hidden = 0;  // 0 means 4*K

    // Reduced-size configuration: 32x32 input, two stride-2 convs to an 8x8 grid.
    static Architecture desk() {
        Architecture a;
        a.resolution = 32;
        a.filters = {16, 8};
        return a;
    }

    std::size_t bottleneck() const {
        std::size_t s = resolution;
        for (std::size_t i = 0; i < filters.size(); ++i) s = (s + stride - 1) / stride;
        return s;
    }

    void validate() const {
        require(resolution >= 1 && !filters.empty(), "Architecture: need a resolution and at least one conv layer");
        require(kernel >= 1 && stride >= 1 && latent_dim >= 1, "Architecture: kernel, stride, latent_dim must be >= 1");
        std::size_t s = resolution;
        for (std::size_t i = 0; i < filters.size(); ++i) {
            require(filters[i] >= 1, "Architecture: filter counts must be >= 1");
            require(s % stride == 0, "Architecture: resolution " + std::to_string(resolution) +
                                         " is not divisible by stride^" + std::to_string(filters.size()));
            s /= stride;
        }
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Architecture, resolution, filters, kernel, stride, latent_dim,
                                                lrelu_slope, assign_hidden)

inline std::vector<LayerSpec> encoder_specs(const Architecture& a) {
    std::vector<LayerSpec> s;
    for (auto f : a.filters) {
        s.push_back(LayerSpec::conv(f, a.kernel, a.stride));
        s.push_back(LayerSpec::lrelu(a.lrelu_slope));
    }
    s.push_back(LayerSpec::flatten());
    s.push_back(LayerSpec::dense(a.latent_dim));
    return s;
}

// Mirror of the encoder: dense to the bottleneck, then transposed convs back up.
inline std::vector<LayerSpec> decoder_specs(const Architecture& a) {
    const std::size_t g = a.bottleneck();
    const std::size_t last = a.filters.back();
    std::vector<LayerSpec> s;
    s.push_back(LayerSpec::dense(last * g * g));
    s.push_back(LayerSpec::lrelu(a.lrelu_slope));
    s.push_back(LayerSpec::reshape({last, g, g}));
    for (std::size_t i = a.filters.size(); i-- > 0;) {
        const bool output = i == 0;
        s.push_back(LayerSpec::deconv(output ? 1 : a.filters[i - 1], a.kernel, a.stride));
        s.push_back(output ? LayerSpec::sigmoid() : LayerSpec::lrelu(a.lrelu_slope));
    }
    return s;
}

struct MixaeModel {
    std::size_t k = 0;
    Architecture arch;
    std::vector<Network> encoders;
    std::vector<Network> decoders;
    Network assignment;

    std::vector<Network*> networks() {
        std::vector<Network*> out;
        for (auto& n : encoders) out.push_back(&n);
        for (auto& n : decoders) out.push_back(&n);
        out.push_back(&assignment);
        return out;
    }
    std::vector<const Network*> networks() const {
        std::vector<const Network*> out;
        for (const auto& n : encoders) out.push_back(&n);
        for (const auto& n : decoders) out.push_back(&n);
        out.push_back(&assignment);
        return out;
    }
    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto* net : networks()) n += net->param_count();
        return n;
    }
};

inline MixaeModel make_model(std::size_t k, const Architecture& arch, std::uint64_t seed) {
    require(k >= 2, "make_model: K must be >= 2");
    arch.validate();
    MixaeModel m;
    m.k = k;
    m.arch = arch;
    const nn::Shape image{1, arch.resolution, arch.resolution};
    for (std::size_t i = 0; i < k; ++i) {
        m.encoders.emplace_back(image, encoder_specs(arch), derive_seed(seed, "encoder", {i}));
        m.decoders.emplace_back(nn::Shape{arch.latent_dim}, decoder_specs(arch), derive_seed(seed, "decoder", {i}));
    }
    const std::size_t hidden = arch.assign_hidden ? arch.assign_hidden : 4 * k;
    m.assignment = Network(nn::Shape{k * arch.latent_dim},
                           {LayerSpec::dense(hidden), LayerSpec::lrelu(arch.lrelu_slope), LayerSpec::dense(k)},
                           derive_seed(seed, "assignment"));
    return m;
}

// ---- forward pass --------------------------------------------------------

struct ForwardOutputs {
    std::vector<nn::ForwardResult> encoded;  // latents, (B, latent_dim)
    std::vector<nn::ForwardResult> decoded;  // reconstructions, (B, 1, R, R)
    nn::ForwardResult logits;                // (B, K)
    Tensor p;                                // softmax confidences, (B, K)

    const Tensor& latent(std::size_t k) const { return encoded[k].output; }
    const Tensor& reconstruction(std::size_t k) const { return decoded[k].output; }
};

inline ForwardOutputs mixae_forward(const MixaeModel& model, const Tensor& batch) {
    require(batch.batch() > 0, "mixae_forward: empty batch");
    ForwardOutputs out;
    const std::size_t B = batch.batch(), D = model.arch.latent_dim, K = model.k;
    Tensor concat({B, K * D});
    for (std::size_t k = 0; k < K; ++k) {
        out.encoded.push_back(model.encoders[k].forward(batch));
        out.decoded.push_back(model.decoders[k].forward(out.encoded[k].output));
        const auto& z = out.encoded[k].output.values;
        for (std::size_t b = 0; b < B; ++b)
            std::copy_n(&z[b * D], D, &concat.values[b * K * D + k * D]);
    }
    out.logits = model.assignment.forward(concat);
    out.p = nn::softmax(out.logits.output);
    return out;
}

// ---- loss terms ----------------------------------------------------------

namespace detail {
inline void check_confidences(const Tensor& p, const char* who) {
    require(p.shape.size() == 2 && p.shape[0] >= 1 && p.shape[1] >= 1, std::string(who) + ": expects a (B, K) tensor");
    for (double v : p.values) {
        if (!std::isfinite(v)) throw numeric_domain_error(std::string(who) + ": non-finite confidence");
        require(v >= 0, std::string(who) + ": negative confidence");
    }
}
}  // namespace detail

inline double sample_entropy(const Tensor& p) {
    detail::check_confidences(p, "sample_entropy");
    double s = 0;
    for (double v : p.values) s -= v * std::log(v + entropy_epsilon);
    return s / static_cast<double>(p.shape[0]);
}

inline std::vector<double> batch_marginal(const Tensor& p) {
    const std::size_t B = p.shape[0], K = p.shape[1];
    std::vector<double> pbar(K, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k) pbar[k] += p.values[b * K + k];
    for (double& v : pbar) v /= static_cast<double>(B);
    return pbar;
}

inline double batch_entropy(const Tensor& p) {
    detail::check_confidences(p, "batch_entropy");
    double s = 0;
    for (double v : batch_marginal(p)) s += v * std::log(v + entropy_epsilon);
    return s;
}

struct Weights {
    double theta = 0.1;
    double alpha = 0.01;
    double gamma = 1e5;

    void validate() const {
        require(theta > 0 && alpha > 0 && gamma > 0, "Weights: theta, alpha, gamma must be > 0");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Weights, theta, alpha, gamma)

struct LossBreakdown {
    double total = 0;
    double reconstruction = 0;
    double sample_entropy = 0;
    double batch_entropy = 0;
};

inline LossBreakdown assemble(const Weights& w, double r, double s, double b) {
    return {w.theta * r + w.alpha * s + w.gamma * b, r, s, b};
}

// Per-sample, per-autoencoder mean squared error, laid out (B, K).
inline std::vector<double> reconstruction_errors(const ForwardOutputs& fwd, const Tensor& batch) {
    const std::size_t K = fwd.decoded.size(), B = batch.batch(), P = batch.sample_size();
    std::vector<double> m(B * K, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
        const auto& r = fwd.reconstruction(k);
        require(r.shape == batch.shape, "mixae_loss: reconstruction shape does not match batch");
        for (std::size_t b = 0; b < B; ++b) {
            double s = 0;
            for (std::size_t i = 0; i < P; ++i) {
                const double d = r.values[b * P + i] - batch.values[b * P + i];
                s += d * d;
            }
            m[b * K + k] = s / static_cast<double>(P);
        }
    }
    return m;
}

inline LossBreakdown mixae_loss(const ForwardOutputs& fwd, const Tensor& batch, const Weights& w) {
    const std::size_t K = fwd.p.shape[1], B = batch.batch();
    require(fwd.p.shape[0] == B, "mixae_loss: confidence rows do not match batch size");
    const auto m = reconstruction_errors(fwd, batch);
    double r = 0;
    for (std::size_t i = 0; i < B * K; ++i) r += fwd.p.values[i] * m[i];
    r /= static_cast<double>(B);
    return assemble(w, r, sample_entropy(fwd.p), batch_entropy(fwd.p));
}

// ---- gradients -----------------------------------------------------------

struct ModelGradients {
    std::vector<std::vector<double>> blocks;  // same order as MixaeModel::networks()
    double norm = 0;

    void scale(double f) {
        for (auto& blk : blocks)
            for (double& g : blk) g *= f;
        norm *= f;
    }
};

inline ModelGradients mixae_gradients(const MixaeModel& model, const ForwardOutputs& fwd, const Tensor& batch,
                                      const Weights& w) {
    const std::size_t K = model.k, B = batch.batch(), P = batch.sample_size(), D = model.arch.latent_dim;
    const double invB = 1.0 / static_cast<double>(B);
    const auto m = reconstruction_errors(fwd, batch);
    const auto pbar = batch_marginal(fwd.p);

    Tensor dp({B, K});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k) {
            const double p = fwd.p.values[b * K + k];
            const double dr = m[b * K + k] * invB;
            const double ds = -(std::log(p + entropy_epsilon) + p / (p + entropy_epsilon)) * invB;
            const double db = (std::log(pbar[k] + entropy_epsilon) + pbar[k] / (pbar[k] + entropy_epsilon)) * invB;
            dp.values[b * K + k] = w.theta * dr + w.alpha * ds + w.gamma * db;
        }
    const Tensor dlogits = nn::softmax_backward(fwd.p, dp);
    auto ga = model.assignment.backward(fwd.logits.cache, dlogits);

    ModelGradients out;
    out.blocks.resize(2 * K + 1);
    for (std::size_t k = 0; k < K; ++k) {
        const auto& rec = fwd.reconstruction(k);
        Tensor drec(rec.shape);
        for (std::size_t b = 0; b < B; ++b) {
            const double coef = w.theta * fwd.p.values[b * K + k] * invB * 2.0 / static_cast<double>(P);
            for (std::size_t i = 0; i < P; ++i)
                drec.values[b * P + i] = coef * (rec.values[b * P + i] - batch.values[b * P + i]);
        }
        auto gd = model.decoders[k].backward(fwd.decoded[k].cache, drec);
        Tensor dz = std::move(gd.input);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t d = 0; d < D; ++d) dz.values[b * D + d] += ga.input.values[b * K * D + k * D + d];
        auto ge = model.encoders[k].backward(fwd.encoded[k].cache, dz);
        out.blocks[k] = std::move(ge.params);
        out.blocks[K + k] = std::move(gd.params);
    }
    out.blocks[2 * K] = std::move(ga.params);
    double sq = 0;
    for (const auto& blk : out.blocks)
        for (double g : blk) sq += g * g;
    out.norm = std::sqrt(sq);
    return out;
}

// ---- data helpers --------------------------------------------------------

inline Tensor images_to_batch(const pipeline::ImageSet& set, const std::vector<std::size_t>& idx) {
    const std::size_t P = set.height * set.width;
    Tensor t({idx.size(), 1, set.height, set.width});
    for (std::size_t b = 0; b < idx.size(); ++b) {
        require(idx[b] < set.images.size(), "images_to_batch: index out of range");
        std::copy(set.images[idx[b]].values.begin(), set.images[idx[b]].values.end(), t.values.begin() + b * P);
    }
    return t;
}

// Argmax of p per row, lowest index on ties.
inline metrics::LabelVector argmax_rows(const Tensor& p) {
    const std::size_t B = p.shape[0], K = p.shape[1];
    metrics::LabelVector out(B);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k)
            if (p.values[b * K + k] > p.values[b * K + best]) best = k;
        out[b] = static_cast<long>(best);
    }
    return out;
}

inline Tensor confidences(const MixaeModel& model, const pipeline::ImageSet& set, const std::vector<std::size_t>& idx,
                          std::size_t chunk = 256) {
    Tensor p({idx.size(), model.k});
    for (std::size_t start = 0; start < idx.size(); start += chunk) {
        const std::vector<std::size_t> part(idx.begin() + static_cast<long>(start),
                                            idx.begin() + static_cast<long>(std::min(idx.size(), start + chunk)));
        const auto fwd = mixae_forward(model, images_to_batch(set, part));
        std::copy(fwd.p.values.begin(), fwd.p.values.end(), p.values.begin() + static_cast<long>(start * model.k));
    }
    return p;
}

inline metrics::LabelVector assign_clusters(const MixaeModel& model, const pipeline::ImageSet& set) {
    require(set.height == model.arch.resolution && set.width == model.arch.resolution,
            "assign_clusters: image size " + std::to_string(set.height) + "x" + std::to_string(set.width) +
                " does not match model resolution " + std::to_string(model.arch.resolution));
    std::vector<std::size_t> idx(set.images.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return argmax_rows(confidences(model, set, idx));
}

// ---- training ------------------------------------------------------------

enum class RunStatus { ok, diverged, collapsed };

NLOHMANN_JSON_SERIALIZE_ENUM(RunStatus,
                             {{RunStatus::ok, "ok"}, {RunStatus::diverged, "diverged"}, {RunStatus::collapsed, "collapsed"}})

struct TrainConfig {
    std::size_t k = 2;
    Architecture arch;
    Weights weights;
    std::size_t epochs = 30;
    std::size_t batch_size = 100;
    std::uint64_t seed = 0;
    nn::AdamConfig adam;
    double clip_norm = 5.0;
    double train_fraction = 0.75;
    double collapse_fraction = 0.99;
    std::size_t collapse_patience = 5;

    void validate() const {
        require(k >= 2, "TrainConfig: K must be >= 2");
        arch.validate();
        weights.validate();
        adam.validate();
        require(epochs >= 1 && batch_size >= 1, "TrainConfig: epochs and batch_size must be >= 1");
        require(clip_norm > 0, "TrainConfig: clip_norm must be > 0");
        require(train_fraction > 0 && train_fraction <= 1, "TrainConfig: train_fraction must lie in (0, 1]");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, k, arch, weights, epochs, batch_size, seed, adam,
                                                clip_norm, train_fraction, collapse_fraction, collapse_patience)

struct EpochRecord {
    std::size_t epoch = 0;
    LossBreakdown loss;
    std::optional<double> ari;
    std::optional<double> accuracy;
    double largest_cluster_share = 0;  // on the holdout set
    std::size_t clipped_steps = 0;
};

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> holdout;  // equals train when train_fraction == 1
};

inline Split train_holdout_split(std::size_t n, double train_fraction, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(derive_seed(seed, "holdout-split"));
    rng.shuffle(idx.begin(), idx.end());
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
    Split s;
    s.train.assign(idx.begin(), idx.begin() + static_cast<long>(std::clamp<std::size_t>(n_train, 1, n)));
    s.holdout.assign(idx.begin() + static_cast<long>(s.train.size()), idx.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.holdout.begin(), s.holdout.end());
    if (s.holdout.empty()) s.holdout = s.train;
    return s;
}

struct TrainResult {
    MixaeModel model;
    std::vector<EpochRecord> history;
    RunStatus status = RunStatus::ok;
    std::size_t steps = 0;
    std::size_t clipped_steps = 0;
    Split split;
    std::optional<double> final_ari;
    std::optional<double> final_accuracy;
};

inline TrainResult train_mixae(const pipeline::ImageSet& data, const std::optional<metrics::LabelVector>& labels,
                               const TrainConfig& cfg) {
    cfg.validate();
    require(!data.images.empty(), "train_mixae: empty dataset");
    require(data.height == cfg.arch.resolution && data.width == cfg.arch.resolution,
            "train_mixae: images are " + std::to_string(data.height) + "x" + std::to_string(data.width) +
                " but the architecture expects " + std::to_string(cfg.arch.resolution));
    if (labels) require(labels->size() == data.images.size(), "train_mixae: label count does not match images");

    TrainResult res;
    res.model = make_model(cfg.k, cfg.arch, derive_seed(cfg.seed, "model-init"));
    res.split = train_holdout_split(data.images.size(), cfg.train_fraction, cfg.seed);
    auto nets = res.model.networks();
    std::vector<nn::AdamMoments> moments;
    for (auto* n : nets) moments.emplace_back(n->param_count());

    metrics::LabelVector holdout_truth;
    if (labels)
        for (auto i : res.split.holdout) holdout_truth.push_back((*labels)[i]);

    std::size_t collapse_run = 0;
    auto snapshot = [&] {
        std::vector<std::vector<double>> s;
        for (const auto* n : nets) s.emplace_back(n->params().begin(), n->params().end());
        return s;
    };
    auto last_good = snapshot();

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order = res.split.train;
        Rng rng(derive_seed(cfg.seed, "epoch-order", {epoch}));
        rng.shuffle(order.begin(), order.end());

        double sum_r = 0, sum_s = 0, sum_b = 0;
        std::size_t batches = 0, clipped = 0;
        bool diverged = false;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                               order.begin() + static_cast<long>(std::min(order.size(), start + cfg.batch_size)));
            const Tensor batch = images_to_batch(data, idx);
            const auto fwd = mixae_forward(res.model, batch);
            const auto loss = mixae_loss(fwd, batch, cfg.weights);
            auto grads = mixae_gradients(res.model, fwd, batch, cfg.weights);
            if (!std::isfinite(loss.total) || !std::isfinite(grads.norm)) {
                diverged = true;
                break;
            }
            if (grads.norm > cfg.clip_norm) {
                grads.scale(cfg.clip_norm / grads.norm);
                ++clipped;
            }
            ++res.steps;
            for (std::size_t i = 0; i < nets.size(); ++i)
                nn::adam_update(nets[i]->mutable_params(), grads.blocks[i], moments[i], res.steps, cfg.adam);
            sum_r += loss.reconstruction;
            sum_s += loss.sample_entropy;
            sum_b += loss.batch_entropy;
            ++batches;
        }
        res.clipped_steps += clipped;

        bool finite_params = true;
        for (const auto* n : nets)
            for (double v : n->params()) finite_params = finite_params && std::isfinite(v);
        if (diverged || !finite_params) {
            for (std::size_t i = 0; i < nets.size(); ++i) {
                auto p = nets[i]->mutable_params();
                std::copy(last_good[i].begin(), last_good[i].end(), p.begin());
            }
            res.status = RunStatus::diverged;
            break;
        }

        EpochRecord rec;
        rec.epoch = epoch + 1;
        const double nb = static_cast<double>(batches);
        rec.loss = assemble(cfg.weights, sum_r / nb, sum_s / nb, sum_b / nb);
        rec.clipped_steps = clipped;
        const auto pred = argmax_rows(confidences(res.model, data, res.split.holdout));
        std::vector<std::size_t> counts(cfg.k, 0);
        for (long c : pred) ++counts[static_cast<std::size_t>(c)];
        rec.largest_cluster_share =
            static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(pred.size());
        if (labels && holdout_truth.size() >= 2) {
            const auto report = metrics::evaluate(holdout_truth, pred);
            rec.ari = report.ari;
            rec.accuracy = report.accuracy;
        }
        res.history.push_back(rec);
        last_good = snapshot();

        collapse_run = rec.largest_cluster_share > cfg.collapse_fraction ? collapse_run + 1 : 0;
        if (collapse_run >= cfg.collapse_patience) res.status = RunStatus::collapsed;
    }
    if (!res.history.empty()) {
        res.final_ari = res.history.back().ari;
        res.final_accuracy = res.history.back().accuracy;
    }
    return res;
}

// ---- run artifacts -------------------------------------------------------

inline nlohmann::json checkpoint_header(const MixaeModel& m, const TrainConfig& cfg, std::size_t steps) {
    nlohmann::json nets = nlohmann::json::array();
    for (const auto* n : m.networks())
        nets.push_back({{"input_shape", n->input_shape()}, {"layers", n->specs()}, {"param_count", n->param_count()}});
    return {{"format", "mixae"}, {"k", m.k}, {"architecture", m.arch}, {"networks", nets},
            {"seed", cfg.seed}, {"steps", steps}};
}

inline std::string encode_model(const MixaeModel& m, const TrainConfig& cfg, std::size_t steps) {
    std::vector<std::span<const double>> blocks;
    for (const auto* n : m.networks()) blocks.push_back(n->params());
    return nn::encode_checkpoint(checkpoint_header(m, cfg, steps), blocks);
}

inline MixaeModel decode_model(std::string_view bytes, const std::string& what = "model checkpoint") {
    const auto ck = nn::decode_checkpoint(bytes, what);
    MixaeModel m;
    try {
        m = make_model(ck.header.at("k").get<std::size_t>(), ck.header.at("architecture").get<Architecture>(), 0);
    } catch (const nlohmann::json::exception& e) {
        throw load_error(what + ": bad header: " + e.what());
    }
    if (ck.params.size() != m.param_count())
        throw truncated_error(what + ": expected " + std::to_string(m.param_count()) + " parameters, found " +
                              std::to_string(ck.params.size()));
    std::size_t off = 0;
    for (auto* n : m.networks()) {
        auto p = n->mutable_params();
        for (double& v : p) {
            const float f = ck.params[off++];
            if (!std::isfinite(f)) throw non_finite_error(what + ": non-finite parameter at index " + std::to_string(off - 1));
            v = f;
        }
    }
    return m;
}

inline std::string history_csv(const std::vector<EpochRecord>& h) {
    std::string out = "epoch,r,s,b,total,ari,acc\n";
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    for (const auto& e : h) {
        out += std::to_string(e.epoch) + "," + num(e.loss.reconstruction) + "," + num(e.loss.sample_entropy) + "," +
               num(e.loss.batch_entropy) + "," + num(e.loss.total) + "," + (e.ari ? num(*e.ari) : "") + "," +
               (e.accuracy ? num(*e.accuracy) : "") + "\n";
    }
    return out;
}

inline nlohmann::json run_json(const TrainResult& r, const TrainConfig& cfg) {
    nlohmann::json j = {{"config", cfg},
                        {"seed", cfg.seed},
                        {"status", r.status},
                        {"epochs_completed", r.history.size()},
                        {"steps", r.steps},
                        {"gradient_clipping", {{"max_norm", cfg.clip_norm}, {"clipped_steps", r.clipped_steps}}},
                        {"train_size", r.split.train.size()},
                        {"holdout_size", r.split.holdout.size()}};
    j["final_ari"] = r.final_ari ? nlohmann::json(*r.final_ari) : nlohmann::json();
    j["final_accuracy"] = r.final_accuracy ? nlohmann::json(*r.final_accuracy) : nlohmann::json();
    return j;
}

// ---- grid search ---------------------------------------------------------

struct ExponentRange {
    double lower = 0;
    double upper = 0;
    std::size_t steps = 1;

    std::vector<double> values() const {
        require(lower <= upper, "ExponentRange: lower must be <= upper");
        require(steps >= 1, "ExponentRange: steps must be >= 1");
        std::vector<double> v;
        for (std::size_t i = 0; i < steps; ++i) {
            const double e = steps == 1 ? lower : lower + (upper - lower) * static_cast<double>(i) / static_cast<double>(steps - 1);
            v.push_back(std::pow(10.0, e));
        }
        return v;
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExponentRange, lower, upper, steps)

struct GridSearchSpec {
    ExponentRange theta{-1, 5, 7};
    ExponentRange alpha{-5, -1, 5};
    ExponentRange gamma{3, 5, 3};
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GridSearchSpec, theta, alpha, gamma)

namespace presets {
inline constexpr Weights simulated{0.1, 0.01, 1e5};
inline const Weights experimental{10.0, 0.1, std::pow(10.0, 3.5)};
}  // namespace presets

inline std::uint64_t run_seed(std::uint64_t base, std::size_t run) { return derive_seed(base, "mixae-run", {run}); }

struct CellRun {
    std::uint64_t seed = 0;
    RunStatus status = RunStatus::ok;
    std::optional<double> ari;
    std::optional<double> accuracy;
    double final_total = 0;
};

struct GridCell {
    Weights weights;
    std::vector<CellRun> runs;
    std::optional<double> top1_ari;
    std::optional<double> best_total;  // lowest final total over non-diverged runs
};

struct GridResult {
    std::vector<GridCell> cells;
    std::optional<std::size_t> best;
    bool ranked_by_ari = false;
};

inline GridResult grid_search(const GridSearchSpec& spec, const TrainConfig& base, std::size_t runs_per_cell,
                              const pipeline::ImageSet& data, const std::optional<metrics::LabelVector>& labels) {
    require(runs_per_cell >= 1, "grid_search: runs_per_cell must be >= 1");
    const auto ts = spec.theta.values(), as = spec.alpha.values(), gs = spec.gamma.values();
    GridResult out;
    out.ranked_by_ari = labels.has_value();
    for (double t : ts)
        for (double a : as)
            for (double g : gs) {
                GridCell cell;
                cell.weights = {t, a, g};
                for (std::size_t r = 0; r < runs_per_cell; ++r) {
                    TrainConfig cfg = base;
                    cfg.weights = cell.weights;
                    cfg.seed = run_seed(base.seed, r);
                    const auto res = train_mixae(data, labels, cfg);
                    CellRun cr{cfg.seed, res.status, res.final_ari, res.final_accuracy,
                               res.history.empty() ? std::numeric_limits<double>::quiet_NaN()
                                                   : res.history.back().loss.total};
                    if (cr.ari && (!cell.top1_ari || *cr.ari > *cell.top1_ari)) cell.top1_ari = cr.ari;
                    if (cr.status != RunStatus::diverged && std::isfinite(cr.final_total) &&
                        (!cell.best_total || cr.final_total < *cell.best_total))
                        cell.best_total = cr.final_total;
                    cell.runs.push_back(cr);
                }
                out.cells.push_back(std::move(cell));
            }
    for (std::size_t i = 0; i < out.cells.size(); ++i) {
        const auto& c = out.cells[i];
        if (out.ranked_by_ari) {
            if (c.top1_ari && (!out.best || *c.top1_ari > *out.cells[*out.best].top1_ari)) out.best = i;
        } else if (c.best_total && (!out.best || *c.best_total < *out.cells[*out.best].best_total)) {
            out.best = i;
        }
    }
    return out;
}

inline nlohmann::json to_json(const GridResult& g) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : g.cells) {
        nlohmann::json runs = nlohmann::json::array();
        for (const auto& r : c.runs)
            runs.push_back({{"seed", r.seed}, {"status", r.status}, {"ari", opt(r.ari)}, {"accuracy", opt(r.accuracy)},
                            {"final_total", std::isfinite(r.final_total) ? nlohmann::json(r.final_total) : nlohmann::json()}});
        cells.push_back({{"weights", c.weights}, {"top1_ari", opt(c.top1_ari)}, {"best_total", opt(c.best_total)},
                         {"runs", runs}});
    }
    return {{"cells", cells},
            {"best_cell", g.best ? nlohmann::json(*g.best) : nlohmann::json()},
            {"ranked_by", g.ranked_by_ari ? "top1_ari" : "lowest_total_loss"}};
}

}  // namespace spiralcluster::mixae
