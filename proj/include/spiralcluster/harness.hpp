#pragma once

// Experiment orchestration: labelled/unlabelled partitions, manifest-driven
// pipelines with on-disk artifacts, and repeated-run stability summaries.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spiralcluster/error.hpp"
#include "spiralcluster/io.hpp"
#include "spiralcluster/latent.hpp"
#include "spiralcluster/metrics.hpp"
#include "spiralcluster/mixae.hpp"
#include "spiralcluster/pipeline.hpp"
#include "spiralcluster/random.hpp"
#include "spiralcluster/simkit.hpp"
#include "spiralcluster/stats.hpp"

namespace spiralcluster::harness {

namespace fs = std::filesystem;

// ---- partition -------------------------------------------------------------

struct Partition {
    std::vector<std::size_t> labelled;
    std::vector<std::size_t> unlabelled;
    double fraction = 0;
    std::uint64_t seed = 0;
};

// Stratified draw of round(fraction * n) ids, n being the number of ids that carry
// a class. Per-class quotas use the largest-remainder rule, ties to the smaller
// class id. Ids without a class always land in the unlabelled set.
inline Partition partition_dataset(const std::vector<std::optional<long>>& classes, double fraction,
                                   std::uint64_t seed) {
    require(fraction > 0 && fraction <= 1, "partition_dataset: fraction must lie in (0, 1]");
    std::map<long, std::vector<std::size_t>> by_class;
    std::size_t n = 0;
    for (std::size_t i = 0; i < classes.size(); ++i)
        if (classes[i]) {
            by_class[*classes[i]].push_back(i);
            ++n;
        }
    const auto target = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    require(target >= 1, "partition_dataset: fraction " + std::to_string(fraction) + " of " + std::to_string(n) +
                             " labelled candidates selects no samples");

    struct Quota {
        long cls;
        std::size_t take;
        double remainder;
    };
    std::vector<Quota> quotas;
    std::size_t assigned = 0;
    for (const auto& [cls, ids] : by_class) {
        const double exact = fraction * static_cast<double>(ids.size());
        const auto fl = static_cast<std::size_t>(std::floor(exact));
        quotas.push_back({cls, fl, exact - static_cast<double>(fl)});
        assigned += fl;
    }
    std::vector<std::size_t> order(quotas.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return quotas[a].remainder > quotas[b].remainder; });
    for (std::size_t i = 0; assigned < target && i < order.size(); ++i, ++assigned) ++quotas[order[i]].take;

    Partition p;
    p.fraction = fraction;
    p.seed = seed;
    std::vector<char> chosen(classes.size(), 0);
    for (const auto& q : quotas) {
        auto ids = by_class[q.cls];
        Rng rng(derive_seed(seed, "partition", {static_cast<std::uint64_t>(q.cls)}));
        rng.shuffle(ids.begin(), ids.end());
        for (std::size_t i = 0; i < q.take; ++i) chosen[ids[i]] = 1;
    }
    for (std::size_t i = 0; i < classes.size(); ++i) (chosen[i] ? p.labelled : p.unlabelled).push_back(i);
    return p;
}

// ---- stability study -------------------------------------------------------

struct RunOutcome {
    std::optional<double> ari;
    std::optional<double> accuracy;
    std::string status = "ok";
    nlohmann::json details = nlohmann::json::object();
};

struct StabilityRow {
    std::size_t run = 0;
    std::uint64_t seed = 0;
    RunOutcome outcome;
    std::optional<std::string> failure;  // set when the run threw
};

struct StabilityReport {
    std::vector<StabilityRow> rows;
    Summary ari;
    Summary accuracy;
    std::optional<std::size_t> top1;  // highest ARI, first on ties
    std::size_t missing = 0;          // rows without a score, excluded from the summaries
};

using RunFn = std::function<RunOutcome(std::size_t run, std::uint64_t seed)>;

// Runs `fn` for each run index with seed derive_seed(base, purpose, {run}), or with
// `fixed_seed` for every run when given.
inline StabilityReport stability_study(std::size_t runs, std::uint64_t base_seed, const std::string& purpose,
                                       const RunFn& fn, std::optional<std::uint64_t> fixed_seed = std::nullopt) {
    require(runs >= 2, "stability_study: need at least 2 runs");
    StabilityReport rep;
    std::vector<double> aris, accs;
    for (std::size_t r = 0; r < runs; ++r) {
        StabilityRow row;
        row.run = r;
        row.seed = fixed_seed ? *fixed_seed : derive_seed(base_seed, purpose, {r});
        try {
            row.outcome = fn(r, row.seed);
        } catch (const numeric_domain_error& e) {
            row.outcome.status = "failed";
            row.failure = e.what();
        }
        if (row.outcome.ari && row.outcome.accuracy) {
            aris.push_back(*row.outcome.ari);
            accs.push_back(*row.outcome.accuracy);
            if (!rep.top1 || *row.outcome.ari > *rep.rows[*rep.top1].outcome.ari) rep.top1 = rep.rows.size();
        } else {
            ++rep.missing;
        }
        rep.rows.push_back(std::move(row));
    }
    rep.ari = summarize(aris);
    rep.accuracy = summarize(accs);
    return rep;
}

inline nlohmann::json to_json(const StabilityReport& s) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : s.rows) {
        nlohmann::json j{{"run", r.run},
                         {"seed", r.seed},
                         {"status", r.outcome.status},
                         {"ari", opt(r.outcome.ari)},
                         {"accuracy", opt(r.outcome.accuracy)},
                         {"details", r.outcome.details}};
        if (r.failure) j["failure"] = *r.failure;
        rows.push_back(std::move(j));
    }
    nlohmann::json top1;
    if (s.top1)
        top1 = {{"run", *s.top1},
                {"ari", *s.rows[*s.top1].outcome.ari},
                {"accuracy", *s.rows[*s.top1].outcome.accuracy}};
    return {{"runs", rows},
            {"top1", top1},
            {"ari", {{"mean", s.ari.mean}, {"std", s.ari.std}, {"count", s.ari.count}}},
            {"accuracy", {{"mean", s.accuracy.mean}, {"std", s.accuracy.std}, {"count", s.accuracy.count}}},
            {"missing_runs", s.missing}};
}

// Two-row table: Top 1, then mean +- std.
inline std::string format_summary(const StabilityReport& s) {
    char buf[256];
    std::string out = "          ARI              accuracy\n";
    if (s.top1) {
        std::snprintf(buf, sizeof buf, "Top 1     %-16.4f %.4f\n", *s.rows[*s.top1].outcome.ari,
                      *s.rows[*s.top1].outcome.accuracy);
        out += buf;
    }
    if (s.ari.count > 0) {
        std::snprintf(buf, sizeof buf, "mu+-sigma %.4f+-%.4f    %.4f+-%.4f\n", s.ari.mean, s.ari.std, s.accuracy.mean,
                      s.accuracy.std);
        out += buf;
    } else {
        out += "mu+-sigma n/a              n/a\n";
    }
    if (s.missing) out += std::to_string(s.missing) + " run(s) produced no score and are excluded\n";
    return out;
}

// ---- manifest --------------------------------------------------------------

struct FeatureStage {
    std::size_t dim = 256;
    latent::StandinConfig standin;
    std::size_t pca_components = 0;  // 0 keeps the raw features
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FeatureStage, dim, standin, pca_components)

struct MixaeStage {
    mixae::TrainConfig train;
    std::size_t runs = 10;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MixaeStage, train, runs)

// Every stage seed is derived from `seed`; seed fields inside stage configs are
// overwritten so one number reproduces the whole experiment.
struct ExperimentManifest {
    std::string name = "experiment";
    std::uint64_t seed = 0;
    std::string events;  // JSONL input; empty means simulate
    sim::SimulationConfig simulation;
    pipeline::PreprocessConfig preprocess;
    std::string method = "kmeans";  // "kmeans" or "mixae"
    FeatureStage features;
    latent::KMeansConfig kmeans;
    MixaeStage mixae;
    double labelled_fraction = 1.0;
    std::string output = "runs/experiment";
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentManifest, name, seed, events, simulation, preprocess, method,
                                                features, kmeans, mixae, labelled_fraction, output)

inline std::string manifest_hash(const ExperimentManifest& m) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(nlohmann::json(m).dump())));
    return buf;
}

struct StageSeeds {
    std::uint64_t simulate, features, cluster, partition;
};

inline StageSeeds stage_seeds(std::uint64_t seed) {
    return {derive_seed(seed, "stage-simulate"), derive_seed(seed, "stage-features"),
            derive_seed(seed, "stage-cluster"), derive_seed(seed, "stage-partition")};
}

inline void validate(const ExperimentManifest& m) {
    require(m.method == "kmeans" || m.method == "mixae",
            "manifest: method must be \"kmeans\" or \"mixae\", got \"" + m.method + "\"");
    require(m.labelled_fraction > 0 && m.labelled_fraction <= 1, "manifest: labelled_fraction must lie in (0, 1]");
    require(!m.output.empty(), "manifest: output directory is required");
    if (m.method == "kmeans") {
        m.kmeans.validate();
        require(m.kmeans.n_runs >= 2, "manifest: kmeans.n_runs must be >= 2 for a stability summary");
        require(m.features.dim >= 1, "manifest: features.dim must be >= 1");
    } else {
        m.mixae.train.validate();
        require(m.mixae.runs >= 2, "manifest: mixae.runs must be >= 2");
        require(m.mixae.train.arch.resolution == m.preprocess.resolution,
                "manifest: mixae architecture resolution " + std::to_string(m.mixae.train.arch.resolution) +
                    " differs from preprocess resolution " + std::to_string(m.preprocess.resolution));
    }
    if (m.events.empty()) {
        m.simulation.dataset.validate();
        m.simulation.field.validate();
        m.simulation.noise.validate();
    }
}

// Fails before any computation when an input is missing or the manifest is invalid.
inline void preflight(const ExperimentManifest& m) {
    validate(m);
    if (!m.events.empty() && !fs::is_regular_file(m.events))
        throw io_error("manifest: events file " + m.events + " does not exist");
}

inline ExperimentManifest load_manifest(const fs::path& path) {
    try {
        return nlohmann::json::parse(io::read_file(path)).get<ExperimentManifest>();
    } catch (const nlohmann::json::exception& e) {
        throw load_error(path.string() + ": " + e.what());
    }
}

// ---- pipeline --------------------------------------------------------------

struct PipelineResult {
    fs::path directory;
    nlohmann::json report;
    StabilityReport stability;
};

namespace detail {

template <class F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const bad_magic_error& e) {
        throw bad_magic_error("stage " + name + ": " + e.what());
    } catch (const truncated_error& e) {
        throw truncated_error("stage " + name + ": " + e.what());
    } catch (const non_finite_error& e) {
        throw non_finite_error("stage " + name + ": " + e.what());
    } catch (const load_error& e) {
        throw load_error("stage " + name + ": " + e.what());
    } catch (const io_error& e) {
        throw io_error("stage " + name + ": " + e.what());
    } catch (const contract_violation& e) {
        throw contract_violation("stage " + name + ": " + e.what());
    } catch (const numeric_domain_error& e) {
        throw numeric_domain_error("stage " + name + ": " + e.what());
    }
}

inline std::string json_text(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline std::string assignments_csv(const std::vector<sim::EventCloud>& events, const metrics::LabelVector& pred,
                                   const std::vector<std::size_t>& ids) {
    std::string out = "id,cluster\n";
    for (std::size_t i = 0; i < ids.size(); ++i) out += events[ids[i]].id + "," + std::to_string(pred[i]) + "\n";
    return out;
}

}  // namespace detail

// Runs simulate/load -> preprocess -> features or MIXAE -> evaluate. Artifacts are
// written under `<output>.partial` and renamed to `<output>` once every stage is
// done; a failed run leaves the partial directory in place.
inline PipelineResult run_pipeline(const ExperimentManifest& m) {
    preflight(m);
    const auto seeds = stage_seeds(m.seed);
    const fs::path final_dir = m.output;
    fs::path dir = final_dir;
    dir += ".partial";
    std::error_code ec;
    fs::remove_all(dir, ec);
    fs::create_directories(dir, ec);
    if (ec) throw io_error("cannot create " + dir.string() + ": " + ec.message());
    io::write_file(dir / "manifest.json", detail::json_text(m));

    const auto events = detail::stage("simulate", [&] {
        if (!m.events.empty()) return sim::decode_events_jsonl(io::read_file(m.events));
        auto ds = m.simulation.dataset;
        ds.rng_seed = seeds.simulate;
        auto ev = sim::generate_dataset(ds, m.simulation.field, m.simulation.noise);
        io::write_file(dir / "events.jsonl", sim::encode_events_jsonl(ev));
        return ev;
    });
    io::write_file(dir / "labels.csv", io::encode_labels_csv(pipeline::label_rows(events)));

    std::size_t degenerate = 0;
    const auto images = detail::stage("preprocess", [&] {
        for (const auto& e : events) degenerate += pipeline::preprocess_event(e, m.preprocess).degenerate;
        auto set = pipeline::preprocess_events(events, m.preprocess);
        io::write_file(dir / "images.atc1", pipeline::encode_atc1(set));
        return set;
    });

    // Labels stay here until evaluation; the clustering stages never see them.
    std::vector<std::optional<long>> classes;
    for (const auto& e : events) classes.push_back(e.label ? std::optional<long>(static_cast<long>(*e.label)) : std::nullopt);
    const auto part = detail::stage("partition", [&] { return partition_dataset(classes, m.labelled_fraction, seeds.partition); });
    metrics::LabelVector truth;
    for (auto i : part.labelled) truth.push_back(*classes[i]);

    nlohmann::json report;
    report["name"] = m.name;
    report["manifest_hash"] = manifest_hash(m);
    report["seeds"] = {{"base", m.seed},
                       {"simulate", seeds.simulate},
                       {"features", seeds.features},
                       {"cluster", seeds.cluster},
                       {"partition", seeds.partition}};
    std::map<std::string, std::size_t> per_class;
    for (const auto& e : events) ++per_class[e.label ? std::string(sim::to_string(*e.label)) : std::string("unlabelled")];
    report["dataset"] = {{"events", events.size()},
                         {"labelled", part.labelled.size()},
                         {"per_class", per_class},
                         {"degenerate_images", degenerate}};
    report["method"] = m.method;

    StabilityReport stab;
    if (m.method == "kmeans") {
        auto x = detail::stage("features", [&] {
            auto f = latent::standin_features(images, m.features.dim, seeds.features, m.features.standin);
            if (m.features.pca_components > 0) f = latent::pca(f, m.features.pca_components).projected;
            io::write_file(dir / "features.atl1", latent::encode_atl1(f));
            return f;
        });
        report["features"] = {{"dim", x.dim}, {"sparsity", x.sparsity()}};
        std::vector<metrics::LabelVector> preds;
        stab = detail::stage("kmeans", [&] {
            auto cfg = m.kmeans;
            return stability_study(cfg.n_runs, seeds.cluster, "kmeans-run", [&](std::size_t, std::uint64_t s) {
                cfg.rng_seed = s;
                const auto res = latent::kmeans_best_of(x, cfg);
                metrics::LabelVector pred;
                for (auto i : part.labelled) pred.push_back(res.assignments[i]);
                preds.push_back(res.assignments);
                const auto ev = metrics::evaluate(truth, pred);
                return RunOutcome{ev.ari, ev.accuracy, "ok", {{"inertia", res.inertia}}};
            });
        });
        if (stab.top1) {
            std::vector<std::size_t> all(events.size());
            for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
            io::write_file(dir / "assignments.csv", detail::assignments_csv(events, preds[*stab.top1], all));
        }
    } else {
        std::vector<std::size_t> mixae_steps;
        stab = detail::stage("mixae", [&] {
            return stability_study(m.mixae.runs, seeds.cluster, "mixae-run", [&](std::size_t r, std::uint64_t s) {
                auto cfg = m.mixae.train;
                cfg.seed = s;
                const auto res = mixae::train_mixae(images, std::nullopt, cfg);
                char sub[32];
                std::snprintf(sub, sizeof sub, "run-%02zu", r);
                const fs::path rd = dir / sub;
                fs::create_directories(rd);
                io::write_file(rd / "model.atm1", mixae::encode_model(res.model, cfg, res.steps));
                io::write_file(rd / "history.csv", mixae::history_csv(res.history));
                io::write_file(rd / "run.json", detail::json_text(mixae::run_json(res, cfg)));

                RunOutcome out;
                out.status = nlohmann::json(res.status).get<std::string>();
                out.details = {{"steps", res.steps}, {"clipped_steps", res.clipped_steps}};
                if (res.status == mixae::RunStatus::diverged) return out;
                // Score on labelled ids inside the run's holdout split.
                std::vector<char> labelled(events.size(), 0);
                for (auto i : part.labelled) labelled[i] = 1;
                std::vector<std::size_t> ids;
                metrics::LabelVector t;
                for (auto i : res.split.holdout)
                    if (labelled[i]) {
                        ids.push_back(i);
                        t.push_back(*classes[i]);
                    }
                if (ids.size() < 2) return out;
                const auto pred = mixae::argmax_rows(mixae::confidences(res.model, images, ids));
                const auto ev = metrics::evaluate(t, pred);
                out.ari = ev.ari;
                out.accuracy = ev.accuracy;
                out.details["evaluated"] = ids.size();
                return out;
            });
        });
    }
    report["stability"] = to_json(stab);
    detail::stage("evaluate", [&] {
        io::write_file(dir / "report.json", detail::json_text(report));
        io::write_file(dir / "summary.txt", format_summary(stab));
        return 0;
    });

    fs::remove_all(final_dir, ec);
    fs::rename(dir, final_dir, ec);
    if (ec) throw io_error("cannot move " + dir.string() + " to " + final_dir.string() + ": " + ec.message());
    return {final_dir, report, std::move(stab)};
}

}  // namespace spiralcluster::harness
