#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "spiralcluster/harness.hpp"

namespace fs = std::filesystem;
using namespace spiralcluster;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string manifest;
};

enum exit_code { ok = 0, contract = 2, run_failed = 3, io_failure = 4 };

std::string need_out(const Globals& g, const char* cmd) {
    require(!g.out.empty(), std::string(cmd) + ": --out is required");
    return g.out;
}

fs::path sidecar(const fs::path& p) {
    auto s = p;
    s.replace_extension(".labels.csv");
    return s;
}

std::string json_text(const nlohmann::json& j) { return j.dump(2) + "\n"; }

nlohmann::json read_json(const fs::path& p) {
    const auto text = io::read_file(p);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw load_error(p.string() + ": " + e.what());
    }
}

// Class names to integer ids, sorted so the mapping is stable across files.
struct LabelCodes {
    std::vector<std::string> ids;
    std::vector<std::optional<long>> codes;
    std::vector<std::string> names;
};

LabelCodes encode_labels(const std::vector<io::LabelRow>& rows) {
    std::set<std::string> distinct;
    for (const auto& r : rows)
        if (!r.label.empty()) distinct.insert(r.label);
    LabelCodes out;
    out.names.assign(distinct.begin(), distinct.end());
    std::map<std::string, long> code;
    for (std::size_t i = 0; i < out.names.size(); ++i) code[out.names[i]] = static_cast<long>(i);
    for (const auto& r : rows) {
        out.ids.push_back(r.id);
        out.codes.push_back(r.label.empty() ? std::nullopt : std::optional<long>(code[r.label]));
    }
    return out;
}

metrics::LabelVector all_labelled(const LabelCodes& c, std::size_t rows, const std::string& what) {
    require(c.codes.size() == rows, what + ": " + std::to_string(c.codes.size()) + " labels for " +
                                        std::to_string(rows) + " rows");
    metrics::LabelVector v;
    for (std::size_t i = 0; i < rows; ++i) {
        require(c.codes[i].has_value(), what + ": row " + c.ids[i] + " has no label");
        v.push_back(*c.codes[i]);
    }
    return v;
}

mixae::Architecture arch_for(std::size_t resolution) {
    auto a = resolution == 128 ? mixae::Architecture{} : mixae::Architecture::desk();
    a.resolution = resolution;
    return a;
}

std::string run_dir_name(std::size_t r) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "run-%02zu", r);
    return buf;
}

void write_run(const fs::path& dir, const mixae::TrainResult& res, const mixae::TrainConfig& cfg) {
    fs::create_directories(dir);
    io::write_file(dir / "model.atm1", mixae::encode_model(res.model, cfg, res.steps));
    io::write_file(dir / "history.csv", mixae::history_csv(res.history));
    io::write_file(dir / "run.json", json_text(mixae::run_json(res, cfg)));
}

struct TrainOptions {
    std::string images, labels, config;
    std::size_t k = 2, epochs = 30, batch = 100;
    double theta = mixae::presets::simulated.theta;
    double alpha = mixae::presets::simulated.alpha;
    double gamma = mixae::presets::simulated.gamma;
    double eta = 1e-3;

    void add(CLI::App* c) {
        c->add_option("--images", images, "ATC1 image dataset")->required();
        c->add_option("--labels", labels, "id,label CSV (evaluation only)");
        c->add_option("--config", config, "TrainConfig JSON; flags given explicitly override it");
        c->add_option("--k", k, "number of clusters");
        c->add_option("--theta", theta, "reconstruction weight");
        c->add_option("--alpha", alpha, "sample-entropy weight");
        c->add_option("--gamma", gamma, "batch-entropy weight");
        c->add_option("--epochs", epochs);
        c->add_option("--batch", batch, "mini-batch size");
        c->add_option("--eta", eta, "Adam learning rate");
    }

    mixae::TrainConfig build(CLI::App* c, const pipeline::ImageSet& set, const Globals& g) const {
        mixae::TrainConfig cfg;
        cfg.arch = arch_for(set.height);
        if (!config.empty()) cfg = read_json(config).get<mixae::TrainConfig>();
        auto given = [&](const char* name) { return config.empty() || c->count(name) > 0; };
        if (given("--k")) cfg.k = k;
        if (given("--theta")) cfg.weights.theta = theta;
        if (given("--alpha")) cfg.weights.alpha = alpha;
        if (given("--gamma")) cfg.weights.gamma = gamma;
        if (given("--epochs")) cfg.epochs = epochs;
        if (given("--batch")) cfg.batch_size = batch;
        if (given("--eta")) cfg.adam.eta = eta;
        if (g.seed) cfg.seed = *g.seed;
        return cfg;
    }

    std::optional<metrics::LabelVector> truth(std::size_t rows) const {
        if (labels.empty()) return std::nullopt;
        return all_labelled(encode_labels(io::read_labels_csv(labels)), rows, labels);
    }
};

int report_pipeline(const harness::PipelineResult& r) {
    std::cout << harness::format_summary(r.stability) << "artifacts: " << r.directory.string() << "\n";
    return r.stability.ari.count == 0 ? run_failed : ok;
}

int run(int argc, char** argv) {
    CLI::App app{"spiralcluster: simulated spiral-track events, image preprocessing and unsupervised clustering"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "base seed");
    app.add_option("--out", g.out, "output path");
    app.add_option("--manifest", g.manifest, "experiment manifest JSON");

    // simulate
    auto* sim_cmd = app.add_subcommand("simulate", "generate labelled events as JSON lines");
    std::string sim_config;
    std::optional<std::size_t> protons, carbons, others;
    sim_cmd->add_option("--config", sim_config, "simulation JSON {dataset, field, noise}");
    sim_cmd->add_option("--protons", protons);
    sim_cmd->add_option("--carbons", carbons);
    sim_cmd->add_option("--others", others);

    // preprocess
    auto* pre_cmd = app.add_subcommand("preprocess", "project and rasterize events into an ATC1 image file");
    std::string pre_events;
    pipeline::PreprocessConfig pre_cfg;
    pre_cmd->add_option("--events", pre_events)->required();
    pre_cmd->add_option("--resolution", pre_cfg.resolution);
    pre_cmd->add_option("--bounds", pre_cfg.bounds, "half-width in mm");
    pre_cmd->add_flag("--nn-filter", pre_cfg.apply_nn_filter);
    pre_cmd->add_option("--nn-radius", pre_cfg.nn_radius);
    pre_cmd->add_option("--nn-min-neighbors", pre_cfg.nn_min_neighbors);
    pre_cmd->add_flag("--hough", pre_cfg.apply_hough);
    pre_cmd->add_option("--hough-keep", pre_cfg.hough_params.keep_distance, "keep distance in mm");
    pre_cmd->add_option("--hough-radius-min", pre_cfg.hough_params.radius_min);
    pre_cmd->add_option("--hough-radius-max", pre_cfg.hough_params.radius_max);

    // features
    auto* feat_cmd = app.add_subcommand("features", "stand-in latent features for an image file");
    std::string feat_images;
    std::size_t feat_dim = 256, feat_pca = 0;
    feat_cmd->add_option("--images", feat_images)->required();
    feat_cmd->add_option("--dim", feat_dim);
    feat_cmd->add_option("--pca", feat_pca, "project onto this many principal components (0 = off)");

    // kmeans
    auto* km_cmd = app.add_subcommand("kmeans", "repeated k-means on a latent file");
    std::string km_latents, km_labels, km_assign;
    std::size_t km_pca = 0;
    latent::KMeansConfig km_cfg;
    km_cmd->add_option("--latents", km_latents)->required();
    km_cmd->add_option("--labels", km_labels)->required();
    km_cmd->add_option("--pca", km_pca);
    km_cmd->add_option("--k", km_cfg.k);
    km_cmd->add_option("--m-inits", km_cfg.m_inits);
    km_cmd->add_option("--n-runs", km_cfg.n_runs);
    km_cmd->add_option("--max-iter", km_cfg.max_iter);
    km_cmd->add_option("--assignments", km_assign, "write the top-1 run's id,cluster CSV here");

    // mixae
    auto* mx_cmd = app.add_subcommand("mixae", "mixture-of-autoencoders clustering");
    mx_cmd->require_subcommand(1);
    auto* mx_train = mx_cmd->add_subcommand("train", "train one model into a run directory");
    TrainOptions train_opts;
    train_opts.add(mx_train);
    auto* mx_grid = mx_cmd->add_subcommand("grid", "log-spaced search over (theta, alpha, gamma)");
    TrainOptions grid_opts;
    grid_opts.add(mx_grid);
    std::string grid_spec;
    std::size_t runs_per_cell = 3;
    mx_grid->add_option("--spec", grid_spec, "GridSearchSpec JSON");
    mx_grid->add_option("--runs-per-cell", runs_per_cell);
    auto* mx_stab = mx_cmd->add_subcommand("stability", "N seeded runs with Top-1 and mean/std summary");
    TrainOptions stab_opts;
    stab_opts.add(mx_stab);
    std::size_t mx_runs = 10;
    mx_stab->add_option("--runs", mx_runs);

    // evaluate
    auto* ev_cmd = app.add_subcommand("evaluate", "ARI, accuracy and contingency for predicted clusters");
    std::string ev_truth, ev_pred;
    ev_cmd->add_option("--truth", ev_truth)->required();
    ev_cmd->add_option("--pred", ev_pred)->required();

    // pipeline / stability
    auto* pipe_cmd = app.add_subcommand("pipeline", "run a manifest end to end");
    auto* st_cmd = app.add_subcommand("stability", "run a manifest with an explicit run count");
    std::size_t st_runs = 10;
    st_cmd->add_option("--runs", st_runs);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? ok : contract;
    }

    if (sim_cmd->parsed()) {
        sim::SimulationConfig cfg;
        if (!sim_config.empty()) cfg = read_json(sim_config).get<sim::SimulationConfig>();
        if (protons) cfg.dataset.proton_count = *protons;
        if (carbons) cfg.dataset.carbon_count = *carbons;
        if (others) cfg.dataset.other_count = *others;
        if (g.seed) cfg.dataset.rng_seed = *g.seed;
        const fs::path out = need_out(g, "simulate");
        const auto events = sim::generate_dataset(cfg.dataset, cfg.field, cfg.noise);
        io::write_file(out, sim::encode_events_jsonl(events));
        io::write_file(sidecar(out), io::encode_labels_csv(pipeline::label_rows(events)));
        std::cout << events.size() << " events -> " << out.string() << "\n";
    } else if (pre_cmd->parsed()) {
        const fs::path out = need_out(g, "preprocess");
        const auto events = sim::decode_events_jsonl(io::read_file(pre_events));
        const auto set = pipeline::preprocess_events(events, pre_cfg);
        io::write_file(out, pipeline::encode_atc1(set));
        io::write_file(sidecar(out), io::encode_labels_csv(pipeline::label_rows(events)));
        std::cout << set.images.size() << " images " << set.height << "x" << set.width << " -> " << out.string() << "\n";
    } else if (feat_cmd->parsed()) {
        const fs::path out = need_out(g, "features");
        const auto set = pipeline::read_atc1(feat_images);
        auto x = latent::standin_features(set, feat_dim, g.seed.value_or(0), {});
        if (feat_pca > 0) x = latent::pca(x, feat_pca).projected;
        io::write_file(out, latent::encode_atl1(x));
        if (fs::exists(sidecar(feat_images))) io::write_file(sidecar(out), io::read_file(sidecar(feat_images)));
        std::cout << x.rows << " x " << x.dim << " features (sparsity " << x.sparsity() << ") -> " << out.string()
                  << "\n";
    } else if (km_cmd->parsed()) {
        const fs::path out = need_out(g, "kmeans");
        auto x = latent::load_latents(km_latents);
        if (km_pca > 0) x = latent::pca(x, km_pca).projected;
        const auto codes = encode_labels(io::read_labels_csv(km_labels));
        const auto y = all_labelled(codes, x.rows, km_labels);
        if (g.seed) km_cfg.rng_seed = *g.seed;
        const auto stats = latent::kmeans_experiment(x, y, km_cfg);
        io::write_file(out, json_text(latent::to_json(stats)));
        if (!km_assign.empty()) {
            auto rc = km_cfg;
            rc.rng_seed = stats.runs[stats.top1_index].seed;
            const auto res = latent::kmeans_best_of(x, rc);
            std::string csv = "id,cluster\n";
            for (std::size_t i = 0; i < x.rows; ++i) csv += codes.ids[i] + "," + std::to_string(res.assignments[i]) + "\n";
            io::write_file(km_assign, csv);
        }
        std::cout << "top-1 ARI " << stats.top1.ari << ", ARI " << stats.ari.mean << " +- " << stats.ari.std << "\n";
    } else if (mx_train->parsed()) {
        const fs::path out = need_out(g, "mixae train");
        const auto set = pipeline::read_atc1(train_opts.images);
        const auto cfg = train_opts.build(mx_train, set, g);
        const auto res = mixae::train_mixae(set, train_opts.truth(set.images.size()), cfg);
        write_run(out, res, cfg);
        const auto status = nlohmann::json(res.status).get<std::string>();
        std::cout << "status " << status << ", " << res.steps << " steps (" << res.clipped_steps << " clipped)";
        if (res.final_ari) std::cout << ", holdout ARI " << *res.final_ari;
        std::cout << "\n";
        return res.status == mixae::RunStatus::ok ? ok : run_failed;
    } else if (mx_grid->parsed()) {
        const fs::path out = need_out(g, "mixae grid");
        const auto set = pipeline::read_atc1(grid_opts.images);
        const auto cfg = grid_opts.build(mx_grid, set, g);
        const auto spec = grid_spec.empty() ? mixae::GridSearchSpec{} : read_json(grid_spec).get<mixae::GridSearchSpec>();
        const auto res = mixae::grid_search(spec, cfg, runs_per_cell, set, grid_opts.truth(set.images.size()));
        io::write_file(out, json_text(mixae::to_json(res)));
        if (!res.best) {
            std::cout << "no usable cell\n";
            return run_failed;
        }
        const auto& w = res.cells[*res.best].weights;
        std::cout << "best cell theta=" << w.theta << " alpha=" << w.alpha << " gamma=" << w.gamma << "\n";
    } else if (mx_stab->parsed()) {
        const fs::path out = need_out(g, "mixae stability");
        const auto set = pipeline::read_atc1(stab_opts.images);
        const auto base = stab_opts.build(mx_stab, set, g);
        const auto truth = stab_opts.truth(set.images.size());
        const auto report = harness::stability_study(
            mx_runs, base.seed, "mixae-run", [&](std::size_t r, std::uint64_t s) {
                auto cfg = base;
                cfg.seed = s;
                const auto res = mixae::train_mixae(set, truth, cfg);
                write_run(out / run_dir_name(r), res, cfg);
                harness::RunOutcome o;
                o.status = nlohmann::json(res.status).get<std::string>();
                if (res.status != mixae::RunStatus::diverged) {
                    o.ari = res.final_ari;
                    o.accuracy = res.final_accuracy;
                }
                o.details = {{"steps", res.steps}, {"clipped_steps", res.clipped_steps}};
                return o;
            });
        io::write_file(out / "stability.json", json_text(harness::to_json(report)));
        io::write_file(out / "summary.txt", harness::format_summary(report));
        std::cout << harness::format_summary(report);
        bool any_ok = false;
        for (const auto& row : report.rows) any_ok |= row.outcome.status == "ok";
        return any_ok ? ok : run_failed;
    } else if (ev_cmd->parsed()) {
        const fs::path out = need_out(g, "evaluate");
        const auto truth = encode_labels(io::read_labels_csv(ev_truth));
        auto pred_rows = io::read_labels_csv(ev_pred);
        if (!pred_rows.empty() && pred_rows.front().id == "id") pred_rows.erase(pred_rows.begin());
        std::map<std::string, long> cluster_of;
        for (const auto& r : pred_rows) {
            try {
                std::size_t used = 0;
                cluster_of[r.id] = std::stol(r.label, &used);
                require(used == r.label.size(), "");
            } catch (const std::exception&) {
                throw load_error(ev_pred + ": cluster id \"" + r.label + "\" for " + r.id + " is not an integer");
            }
        }
        metrics::LabelVector y_true, y_pred;
        for (std::size_t i = 0; i < truth.ids.size(); ++i) {
            const auto it = cluster_of.find(truth.ids[i]);
            if (!truth.codes[i] || it == cluster_of.end()) continue;
            y_true.push_back(*truth.codes[i]);
            y_pred.push_back(it->second);
        }
        require(!y_true.empty(), "evaluate: no labelled id appears in both files");
        const auto rep = metrics::evaluate(y_true, y_pred);
        io::write_file(out, json_text(metrics::to_json(rep)));
        std::cout << metrics::format_contingency(rep.table, truth.names) << "ARI " << rep.ari << ", accuracy "
                  << rep.accuracy << " over " << y_true.size() << " events\n";
    } else if (pipe_cmd->parsed() || st_cmd->parsed()) {
        require(!g.manifest.empty(), "--manifest is required");
        auto m = harness::load_manifest(g.manifest);
        if (g.seed) m.seed = *g.seed;
        if (!g.out.empty()) m.output = g.out;
        if (st_cmd->parsed()) {
            m.kmeans.n_runs = st_runs;
            m.mixae.runs = st_runs;
        }
        return report_pipeline(harness::run_pipeline(m));
    }
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const contract_violation& e) {
        std::cerr << "error: " << e.what() << "\n";
        return contract;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: invalid configuration: " << e.what() << "\n";
        return contract;
    } catch (const numeric_domain_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return run_failed;
    } catch (const io_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return io_failure;
    }
}
