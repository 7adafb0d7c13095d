#pragma once

// Synthetic track events: charged particles spiralling in a solenoid field
// while losing energy, plus detector-style noise.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "spiralcluster/error.hpp"
#include "spiralcluster/random.hpp"

namespace spiralcluster::sim {

namespace constants {
inline constexpr double speed_of_light = 299792458.0;         // m/s
inline constexpr double elementary_charge = 1.602176634e-19;  // C
inline constexpr double mev_per_c2_in_kg = 1.78266192e-30;
inline constexpr double mev_in_joule = 1.602176634e-13;
inline constexpr double proton_mass = 938.27208816;    // MeV/c^2
inline constexpr double carbon12_mass = 11177.929;     // MeV/c^2, bare nucleus
// Proton cyclotron angular frequency at 1 T; the drag coefficient is expressed in these units.
inline constexpr double reference_rate = elementary_charge / (proton_mass * mev_per_c2_in_kg);
inline constexpr double reference_speed = speed_of_light / 100.0;
}  // namespace constants

enum class Label { proton, carbon, other };

inline std::string_view to_string(Label l) {
    switch (l) {
        case Label::proton: return "proton";
        case Label::carbon: return "carbon";
        case Label::other: return "other";
    }
    return "other";
}

inline Label label_from_string(std::string_view s) {
    if (s == "proton") return Label::proton;
    if (s == "carbon") return Label::carbon;
    if (s == "other") return Label::other;
    throw contract_violation("unknown label \"" + std::string(s) + "\"");
}

struct Vec3 {
    double x = 0, y = 0, z = 0;
    friend bool operator==(const Vec3&, const Vec3&) = default;
};

struct ParticleSpec {
    double mass = constants::proton_mass;  // MeV/c^2
    double charge = 1.0;                   // units of e
    double initial_energy = 1.0;           // MeV, kinetic
    double polar_angle = std::numbers::pi / 2;
    double azimuthal_angle = 0.0;
    Vec3 vertex;  // mm

    void validate() const {
        require(mass > 0, "ParticleSpec: mass must be > 0");
        require(charge != 0, "ParticleSpec: charge must be nonzero");
        require(initial_energy > 0, "ParticleSpec: initial_energy must be > 0");
        require(polar_angle >= 0 && polar_angle <= std::numbers::pi, "ParticleSpec: polar_angle outside [0, pi]");
    }
};

// Drag acceleration is a = -k * s * w * v_ref * (|v| / v_ref)^n along -v, where w is the
// proton cyclotron rate at 1 T, v_ref = c/100, and s = charge^2 * m_p / mass scales
// the stopping power by species.
struct FieldConfig {
    double b_field = 2.0;  // T along z
    double drag_coefficient = 0.5;
    double drag_exponent = 1.0;

    void validate() const {
        require(b_field >= 0, "FieldConfig: b_field must be >= 0");
        require(drag_coefficient >= 0, "FieldConfig: drag_coefficient must be >= 0");
    }
};

struct Point {
    double x = 0, y = 0, z = 0, charge = 0;
    friend bool operator==(const Point&, const Point&) = default;
};

struct EventCloud {
    std::string id;
    std::vector<Point> points;
    std::optional<Label> label;
    friend bool operator==(const EventCloud&, const EventCloud&) = default;

    void validate() const {
        for (const auto& p : points) {
            if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) || !std::isfinite(p.charge))
                throw numeric_domain_error("EventCloud " + id + ": non-finite point");
            require(p.charge >= 0, "EventCloud " + id + ": negative charge");
        }
    }
};

struct NoiseConfig {
    int uniform_count = 0;
    int structured_arc_count = 0;
    double charge_jitter = 0.0;
    double noise_charge_mean = 3.0;  // mean deposit of injected points, same units as track charge

    void validate() const {
        require(uniform_count >= 0 && structured_arc_count >= 0, "NoiseConfig: counts must be >= 0");
        require(charge_jitter >= 0, "NoiseConfig: charge_jitter must be >= 0");
        require(noise_charge_mean >= 0, "NoiseConfig: noise_charge_mean must be >= 0");
    }
};

struct Range {
    double lo = 0, hi = 0;
    double sample(Rng& rng) const { return rng.uniform(lo, hi); }
};

struct SimDatasetConfig {
    int proton_count = 0;
    int carbon_count = 0;
    int other_count = 0;
    double detector_radius = 250.0;  // mm
    double detector_length = 1000.0; // mm, z in [0, length]
    int time_buckets = 512;
    std::uint64_t rng_seed = 0;

    // kinematics sampled per event
    Range proton_energy{0.5, 3.0};
    Range carbon_energy{1.0, 4.0};
    Range polar_angle{std::numbers::pi / 6, 5 * std::numbers::pi / 6};
    Range vertex_z{200.0, 800.0};
    double vertex_xy_sigma = 2.0;  // mm, beam spot

    // "other" events are pure noise
    int other_uniform_count = 60;
    int other_arc_count = 2;

    // integration
    int steps_per_turn = 200;
    int sample_every = 1;
    long max_steps = 100000;
    double stop_speed_fraction = 1e-3;

    void validate() const {
        require(proton_count >= 0 && carbon_count >= 0 && other_count >= 0, "SimDatasetConfig: counts must be >= 0");
        require(detector_radius > 0 && detector_length > 0, "SimDatasetConfig: detector dimensions must be > 0");
        require(time_buckets > 0, "SimDatasetConfig: time_buckets must be > 0");
        require(steps_per_turn > 0 && sample_every > 0 && max_steps > 0, "SimDatasetConfig: step settings must be > 0");
        require(stop_speed_fraction > 0 && stop_speed_fraction < 1, "SimDatasetConfig: stop_speed_fraction in (0,1)");
    }
};

// Species from (charge, mass); anything that is not a proton or a 12C nucleus is "other".
inline Label species_label(const ParticleSpec& p) {
    if (p.charge == 1 && std::abs(p.mass - constants::proton_mass) < 1.0) return Label::proton;
    if (p.charge == 6 && std::abs(p.mass - constants::carbon12_mass) < 10.0) return Label::carbon;
    return Label::other;
}

using State = std::array<double, 6>;  // x, y, z, vx, vy, vz
using Accel = std::array<double, 3>;

inline bool all_finite(const State& s) {
    for (double v : s)
        if (!std::isfinite(v)) return false;
    return true;
}

// Classical RK4 for x' = v, v' = a(x, v).
template <class Dynamics>
State rk4_step(const State& s, double dt, Dynamics&& accel) {
    if (!all_finite(s)) throw numeric_domain_error("rk4_step: non-finite state");
    require(dt > 0, "rk4_step: dt must be > 0");

    auto deriv = [&](const State& y) {
        const Accel a = accel(y);
        return State{y[3], y[4], y[5], a[0], a[1], a[2]};
    };
    auto axpy = [](const State& y, double h, const State& k) {
        State r;
        for (int i = 0; i < 6; ++i) r[i] = y[i] + h * k[i];
        return r;
    };
    const State k1 = deriv(s);
    const State k2 = deriv(axpy(s, dt / 2, k1));
    const State k3 = deriv(axpy(s, dt / 2, k2));
    const State k4 = deriv(axpy(s, dt, k3));
    State out;
    for (int i = 0; i < 6; ++i) out[i] = s[i] + dt / 6 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
    if (!all_finite(out)) throw numeric_domain_error("rk4_step: integration produced a non-finite state");
    return out;
}

// Lorentz force in a uniform field along z plus speed-dependent drag, SI units.
struct LorentzDrag {
    double charge_over_mass = 0;  // C/kg
    double b_field = 0;           // T
    double drag_scale = 0;        // m/s^2 at |v| = reference_speed
    double drag_exponent = 1;

    Accel operator()(const State& s) const {
        const double vx = s[3], vy = s[4], vz = s[5];
        const double w = charge_over_mass * b_field;
        Accel a{w * vy, -w * vx, 0.0};
        const double speed = std::sqrt(vx * vx + vy * vy + vz * vz);
        if (drag_scale > 0 && speed > 0) {
            const double mag = drag_scale * std::pow(speed / constants::reference_speed, drag_exponent);
            a[0] -= mag * vx / speed;
            a[1] -= mag * vy / speed;
            a[2] -= mag * vz / speed;
        }
        return a;
    }

    static LorentzDrag make(const ParticleSpec& p, const FieldConfig& f) {
        using namespace constants;
        LorentzDrag d;
        d.charge_over_mass = p.charge * elementary_charge / (p.mass * mev_per_c2_in_kg);
        d.b_field = f.b_field;
        const double species = p.charge * p.charge * proton_mass / p.mass;
        d.drag_scale = f.drag_coefficient * species * reference_rate * reference_speed;
        d.drag_exponent = f.drag_exponent;
        return d;
    }
};

inline double initial_speed(const ParticleSpec& p) {
    return constants::speed_of_light * std::sqrt(2.0 * p.initial_energy / p.mass);
}

inline double kinetic_energy_mev(const ParticleSpec& p, const State& s) {
    const double v2 = s[3] * s[3] + s[4] * s[4] + s[5] * s[5];
    return 0.5 * p.mass * v2 / (constants::speed_of_light * constants::speed_of_light);
}

// Radius of the circle a drag-free particle would follow in the transverse plane, mm.
inline double bending_radius_mm(const ParticleSpec& p, const FieldConfig& f) {
    const double v_perp = initial_speed(p) * std::sin(p.polar_angle);
    const double w = std::abs(p.charge) * constants::elementary_charge * f.b_field /
                     (p.mass * constants::mev_per_c2_in_kg);
    return v_perp / w * 1e3;
}

enum class StopReason { stopped, exited, truncated };

struct SimulatedTrack {
    EventCloud cloud;
    std::vector<double> kinetic_energy;  // MeV, one entry per integration step including the start
    long steps = 0;
    double dt = 0;  // s
    StopReason reason = StopReason::stopped;
    bool truncated() const { return reason == StopReason::truncated; }
};

inline double integration_dt(const ParticleSpec& p, const FieldConfig& f, const SimDatasetConfig& det) {
    const auto dyn = LorentzDrag::make(p, f);
    const double v0 = initial_speed(p);
    const double cyclotron = std::abs(dyn.charge_over_mass * f.b_field);
    const double drag = dyn.drag_scale * std::pow(v0 / constants::reference_speed, f.drag_exponent) / v0;
    double rate = std::max(cyclotron, drag);
    if (rate <= 0) rate = 2 * std::numbers::pi * v0 / (det.detector_radius * 1e-3);
    return 2 * std::numbers::pi / (rate * det.steps_per_turn);
}

// Integrates one particle until it stops, leaves the detector, or hits the step cap.
// Emitted charge is the kinetic energy lost since the previous emitted point, in keV.
inline SimulatedTrack simulate_track(const ParticleSpec& particle, const FieldConfig& field,
                                     const SimDatasetConfig& det, Rng& rng) {
    particle.validate();
    field.validate();
    det.validate();
    (void)rng;  // the track itself is deterministic given the spec; noise draws come later

    const auto dyn = LorentzDrag::make(particle, field);
    const double v0 = initial_speed(particle);
    const double st = std::sin(particle.polar_angle), ct = std::cos(particle.polar_angle);
    State s{particle.vertex.x * 1e-3, particle.vertex.y * 1e-3, particle.vertex.z * 1e-3,
            v0 * st * std::cos(particle.azimuthal_angle), v0 * st * std::sin(particle.azimuthal_angle), v0 * ct};

    SimulatedTrack track;
    track.dt = integration_dt(particle, field, det);
    track.cloud.label = species_label(particle);

    const double bucket = det.detector_length / det.time_buckets;
    const double r_max = det.detector_radius * 1e-3;
    const double z_max = det.detector_length * 1e-3;
    const double v_stop = det.stop_speed_fraction * v0;

    double energy = kinetic_energy_mev(particle, s);
    double emitted_energy = energy;
    track.kinetic_energy.push_back(energy);
    track.reason = StopReason::truncated;
    for (long step = 1; step <= det.max_steps; ++step) {
        const State next = rk4_step(s, track.dt, dyn);
        const double r = std::hypot(next[0], next[1]);
        if (r > r_max || next[2] < 0 || next[2] > z_max) {
            track.reason = StopReason::exited;
            break;
        }
        s = next;
        track.steps = step;
        energy = kinetic_energy_mev(particle, s);
        track.kinetic_energy.push_back(energy);
        const double speed = std::sqrt(s[3] * s[3] + s[4] * s[4] + s[5] * s[5]);
        const bool stopping = speed < v_stop;
        if (step % det.sample_every == 0 || stopping) {
            const double z_mm = s[2] * 1e3;
            const double z_q = (std::floor(z_mm / bucket) + 0.5) * bucket;
            track.cloud.points.push_back(
                {s[0] * 1e3, s[1] * 1e3, z_q, std::max(0.0, (emitted_energy - energy) * 1e3)});
            emitted_energy = energy;
        }
        if (stopping) {
            track.reason = StopReason::stopped;
            break;
        }
    }
    return track;
}

inline Point sample_in_cylinder(const SimDatasetConfig& det, Rng& rng) {
    const double r = det.detector_radius * std::sqrt(rng.uniform());
    const double phi = rng.uniform(0, 2 * std::numbers::pi);
    return {r * std::cos(phi), r * std::sin(phi), rng.uniform(0, det.detector_length), 0.0};
}

// Appends uncorrelated points and random circular-arc chains, then jitters every
// charge multiplicatively. Existing points keep their order and coordinates.
inline EventCloud inject_noise(EventCloud cloud, const NoiseConfig& noise, const SimDatasetConfig& det, Rng& rng) {
    noise.validate();
    auto noise_charge = [&] { return -noise.noise_charge_mean * std::log(1.0 - rng.uniform()); };

    for (int i = 0; i < noise.uniform_count; ++i) {
        Point p = sample_in_cylinder(det, rng);
        p.charge = noise_charge();
        cloud.points.push_back(p);
    }
    for (int a = 0; a < noise.structured_arc_count; ++a) {
        const Point c = sample_in_cylinder(det, rng);
        const double radius = rng.uniform(20.0, 150.0);
        const double start = rng.uniform(0, 2 * std::numbers::pi);
        const double span = rng.uniform(std::numbers::pi / 6, std::numbers::pi);
        const double dz = rng.uniform(-0.2, 0.2) * radius;
        const int n = std::max(3, static_cast<int>(radius * span / 2.0));  // ~2 mm spacing
        for (int i = 0; i < n; ++i) {
            const double t = static_cast<double>(i) / (n - 1);
            const double phi = start + span * t;
            Point p{c.x + radius * std::cos(phi), c.y + radius * std::sin(phi), c.z + dz * t, noise_charge()};
            if (std::hypot(p.x, p.y) <= det.detector_radius && p.z >= 0 && p.z <= det.detector_length)
                cloud.points.push_back(p);
        }
    }
    if (noise.charge_jitter > 0) {
        for (auto& p : cloud.points) p.charge *= std::max(0.0, 1.0 + noise.charge_jitter * rng.normal());
    }
    return cloud;
}

inline ParticleSpec sample_particle(Label label, const SimDatasetConfig& cfg, Rng& rng) {
    ParticleSpec p;
    if (label == Label::carbon) {
        p.mass = constants::carbon12_mass;
        p.charge = 6;
        p.initial_energy = cfg.carbon_energy.sample(rng);
    } else {
        p.initial_energy = cfg.proton_energy.sample(rng);
    }
    p.polar_angle = cfg.polar_angle.sample(rng);
    p.azimuthal_angle = rng.uniform(0, 2 * std::numbers::pi);
    p.vertex = {cfg.vertex_xy_sigma * rng.normal(), cfg.vertex_xy_sigma * rng.normal(), cfg.vertex_z.sample(rng)};
    return p;
}

inline std::string event_id(std::size_t index) {
    std::string digits = std::to_string(index);
    return "evt-" + std::string(digits.size() < 6 ? 6 - digits.size() : 0, '0') + digits;
}

// One event from its own sub-seed; pure function of (config, index, label).
inline EventCloud generate_event(std::size_t index, Label label, const SimDatasetConfig& cfg,
                                 const FieldConfig& field, const NoiseConfig& noise) {
    Rng rng(derive_seed(cfg.rng_seed, "event", {index}));
    EventCloud cloud;
    if (label == Label::other) {
        NoiseConfig pure = noise;
        pure.uniform_count = std::max(noise.uniform_count, cfg.other_uniform_count);
        pure.structured_arc_count = std::max(noise.structured_arc_count, cfg.other_arc_count);
        cloud = inject_noise(std::move(cloud), pure, cfg, rng);
    } else {
        const ParticleSpec particle = sample_particle(label, cfg, rng);
        cloud = simulate_track(particle, field, cfg, rng).cloud;
        cloud = inject_noise(std::move(cloud), noise, cfg, rng);
    }
    cloud.id = event_id(index);
    cloud.label = label;
    return cloud;
}

// Class multiset exactly as configured, in a seeded shuffled order.
inline std::vector<Label> dataset_labels(const SimDatasetConfig& cfg) {
    std::vector<Label> labels;
    labels.insert(labels.end(), static_cast<std::size_t>(cfg.proton_count), Label::proton);
    labels.insert(labels.end(), static_cast<std::size_t>(cfg.carbon_count), Label::carbon);
    labels.insert(labels.end(), static_cast<std::size_t>(cfg.other_count), Label::other);
    Rng rng(derive_seed(cfg.rng_seed, "event-order"));
    rng.shuffle(labels.begin(), labels.end());
    return labels;
}

inline std::vector<EventCloud> generate_dataset(const SimDatasetConfig& cfg, const FieldConfig& field,
                                                const NoiseConfig& noise) {
    cfg.validate();
    field.validate();
    noise.validate();
    const auto labels = dataset_labels(cfg);
    std::vector<EventCloud> events;
    events.reserve(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) events.push_back(generate_event(i, labels[i], cfg, field, noise));
    return events;
}

// ---- serialization -------------------------------------------------------

inline void to_json(nlohmann::json& j, const Range& r) { j = nlohmann::json::array({r.lo, r.hi}); }
inline void from_json(const nlohmann::json& j, Range& r) {
    require(j.is_array() && j.size() == 2, "range must be a two-element array");
    r.lo = j[0].get<double>();
    r.hi = j[1].get<double>();
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FieldConfig, b_field, drag_coefficient, drag_exponent)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(NoiseConfig, uniform_count, structured_arc_count, charge_jitter,
                                                noise_charge_mean)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SimDatasetConfig, proton_count, carbon_count, other_count,
                                                detector_radius, detector_length, time_buckets, rng_seed,
                                                proton_energy, carbon_energy, polar_angle, vertex_z,
                                                vertex_xy_sigma, other_uniform_count, other_arc_count,
                                                steps_per_turn, sample_every, max_steps, stop_speed_fraction)

// Simulation config document: {"dataset": {...}, "field": {...}, "noise": {...}}.
struct SimulationConfig {
    SimDatasetConfig dataset;
    FieldConfig field;
    NoiseConfig noise;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SimulationConfig, dataset, field, noise)

inline nlohmann::json event_to_json(const EventCloud& e) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : e.points) pts.push_back({p.x, p.y, p.z, p.charge});
    nlohmann::json j;
    j["id"] = e.id;
    j["label"] = e.label ? nlohmann::json(std::string(to_string(*e.label))) : nlohmann::json(nullptr);
    j["points"] = std::move(pts);
    return j;
}

inline EventCloud event_from_json(const nlohmann::json& j) {
    EventCloud e;
    e.id = j.at("id").get<std::string>();
    const auto& l = j.at("label");
    if (!l.is_null()) e.label = label_from_string(l.get<std::string>());
    for (const auto& p : j.at("points")) {
        require(p.is_array() && p.size() == 4, "event " + e.id + ": each point must be [x,y,z,charge]");
        e.points.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>(), p[3].get<double>()});
    }
    e.validate();
    return e;
}

inline std::string encode_events_jsonl(const std::vector<EventCloud>& events) {
    std::string out;
    for (const auto& e : events) {
        out += event_to_json(e).dump();
        out += '\n';
    }
    return out;
}

inline std::vector<EventCloud> decode_events_jsonl(std::string_view text) {
    std::vector<EventCloud> events;
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        const auto line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        try {
            events.push_back(event_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& ex) {
            throw load_error("events line " + std::to_string(line_no) + ": " + ex.what());
        }
    }
    return events;
}

}  // namespace spiralcluster::sim
