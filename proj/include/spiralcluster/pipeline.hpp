#pragma once

// Point cloud -> normalized 2-D charge image, with optional nearest-neighbour
// and circular-Hough cleaning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "spiralcluster/error.hpp"
#include "spiralcluster/io.hpp"
#include "spiralcluster/simkit.hpp"

namespace spiralcluster::pipeline {

using sim::EventCloud;

struct ImageGrid {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;  // row-major, row = y bin, column = x bin

    ImageGrid() = default;
    ImageGrid(std::size_t h, std::size_t w) : height(h), width(w), values(h * w, 0.0) {}

    double& at(std::size_t row, std::size_t col) { return values[row * width + col]; }
    double at(std::size_t row, std::size_t col) const { return values[row * width + col]; }
    friend bool operator==(const ImageGrid&, const ImageGrid&) = default;
};

struct Point2D {
    double x = 0, y = 0, charge = 0;
    friend bool operator==(const Point2D&, const Point2D&) = default;
};

using Points2D = std::vector<Point2D>;

struct HoughParams {
    double radius_min = 10.0;     // mm
    double radius_max = 150.0;    // mm
    double radius_step = 2.0;     // mm
    double cell_size = 2.0;       // mm, accumulator resolution in the centre plane
    double keep_distance = 2.0;   // mm

    void validate() const {
        require(radius_min > 0 && radius_max >= radius_min, "HoughParams: need 0 < radius_min <= radius_max");
        require(radius_step > 0 && cell_size > 0, "HoughParams: steps must be > 0");
        require(keep_distance >= 0, "HoughParams: keep_distance must be >= 0");
    }
};

struct PreprocessConfig {
    std::size_t resolution = 128;
    double bounds = 250.0;  // mm, symmetric half-width
    bool apply_nn_filter = false;
    double nn_radius = 10.0;
    int nn_min_neighbors = 1;
    bool apply_hough = false;
    HoughParams hough_params;

    void validate() const {
        require(resolution > 0, "PreprocessConfig: resolution must be > 0");
        require(bounds > 0, "PreprocessConfig: bounds must be > 0");
        require(nn_radius > 0, "PreprocessConfig: nn_radius must be > 0");
        require(nn_min_neighbors >= 1, "PreprocessConfig: nn_min_neighbors must be >= 1");
        hough_params.validate();
    }
};

inline Points2D project_xy(const EventCloud& cloud) {
    Points2D out;
    out.reserve(cloud.points.size());
    for (const auto& p : cloud.points) out.push_back({p.x, p.y, p.charge});
    return out;
}

struct Rasterized {
    ImageGrid image;
    std::size_t dropped = 0;
};

// Bin index for v in [-bounds, bounds]; bins are [lo, hi) except the last, which is closed.
inline long bin_index(double v, double bounds, std::size_t resolution) {
    if (!(v >= -bounds && v <= bounds)) return -1;
    const auto n = static_cast<long>(resolution);
    const long i = static_cast<long>(std::floor((v + bounds) / (2 * bounds) * static_cast<double>(resolution)));
    return std::min(i, n - 1);
}

inline Rasterized rasterize(const Points2D& points, const PreprocessConfig& cfg) {
    require(cfg.resolution > 0 && cfg.bounds > 0, "rasterize: invalid resolution or bounds");
    Rasterized r{ImageGrid(cfg.resolution, cfg.resolution), 0};
    for (const auto& p : points) {
        const long ix = bin_index(p.x, cfg.bounds, cfg.resolution);
        const long iy = bin_index(p.y, cfg.bounds, cfg.resolution);
        if (ix < 0 || iy < 0) {
            ++r.dropped;
            continue;
        }
        r.image.at(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) += p.charge;
    }
    return r;
}

struct Scaled {
    ImageGrid image;
    bool degenerate = false;
};

// v <- ln(1 + v), then per-image min-max to [0, 1]. A constant image maps to zeros.
inline Scaled log_minmax_scale(const ImageGrid& image) {
    Scaled s{image, false};
    if (s.image.values.empty()) {
        s.degenerate = true;
        return s;
    }
    for (double& v : s.image.values) {
        require(v >= 0, "log_minmax_scale: negative pixel value");
        v = std::log1p(v);
    }
    const auto [lo, hi] = std::minmax_element(s.image.values.begin(), s.image.values.end());
    const double mn = *lo, mx = *hi;
    if (mx == mn) {
        std::fill(s.image.values.begin(), s.image.values.end(), 0.0);
        s.degenerate = true;
        return s;
    }
    for (double& v : s.image.values) v = (v - mn) / (mx - mn);
    return s;
}

// Keeps points with at least min_neighbors other points within radius (3-D).
inline EventCloud nn_filter(const EventCloud& cloud, double radius, int min_neighbors) {
    require(radius > 0, "nn_filter: radius must be > 0");
    require(min_neighbors >= 1, "nn_filter: min_neighbors must be >= 1");
    const auto& pts = cloud.points;
    const double r2 = radius * radius;
    EventCloud out{cloud.id, {}, cloud.label};
    for (std::size_t i = 0; i < pts.size(); ++i) {
        int count = 0;
        for (std::size_t j = 0; j < pts.size() && count < min_neighbors; ++j) {
            if (i == j) continue;
            const double dx = pts[i].x - pts[j].x, dy = pts[i].y - pts[j].y, dz = pts[i].z - pts[j].z;
            if (dx * dx + dy * dy + dz * dz <= r2) ++count;
        }
        if (count >= min_neighbors) out.points.push_back(pts[i]);
    }
    return out;
}

struct Circle {
    double cx = 0, cy = 0, r = 0;
};

struct HoughResult {
    Points2D points;
    Circle best;
    double votes = 0;
    bool warning = false;  // input too small to vote on; returned unchanged
};

namespace detail {

// Algebraic (Kasa) least-squares circle through the given points.
inline bool fit_circle(const Points2D& pts, Circle& c) {
    if (pts.size() < 3) return false;
    double mx = 0, my = 0;
    for (const auto& p : pts) {
        mx += p.x;
        my += p.y;
    }
    mx /= static_cast<double>(pts.size());
    my /= static_cast<double>(pts.size());
    double suu = 0, svv = 0, suv = 0, suuu = 0, svvv = 0, suvv = 0, svuu = 0;
    for (const auto& p : pts) {
        const double u = p.x - mx, v = p.y - my;
        suu += u * u;
        svv += v * v;
        suv += u * v;
        suuu += u * u * u;
        svvv += v * v * v;
        suvv += u * v * v;
        svuu += v * u * u;
    }
    const double det = suu * svv - suv * suv;
    if (std::abs(det) < 1e-12) return false;
    const double b1 = 0.5 * (suuu + suvv), b2 = 0.5 * (svvv + svuu);
    const double uc = (b1 * svv - b2 * suv) / det;
    const double vc = (suu * b2 - suv * b1) / det;
    c.cx = uc + mx;
    c.cy = vc + my;
    c.r = std::sqrt(uc * uc + vc * vc + (suu + svv) / static_cast<double>(pts.size()));
    return std::isfinite(c.r);
}

inline Points2D near_circle(const Points2D& pts, const Circle& c, double keep) {
    Points2D out;
    for (const auto& p : pts)
        if (std::abs(std::hypot(p.x - c.cx, p.y - c.cy) - c.r) <= keep) out.push_back(p);
    return out;
}

// Adds one point's charge to every cell on the circle of radius r around it,
// at most once per cell.
inline void vote(const Point2D& p, double r, std::size_t n_angles, double ox, double oy, double cell_size,
                 std::size_t nx, std::vector<double>& acc, std::vector<std::uint32_t>& stamp, std::uint32_t tick) {
    for (std::size_t a = 0; a < n_angles; ++a) {
        const double t = 2 * std::numbers::pi * static_cast<double>(a) / static_cast<double>(n_angles);
        const auto ix = static_cast<std::size_t>((p.x + r * std::cos(t) - ox) / cell_size);
        const auto iy = static_cast<std::size_t>((p.y + r * std::sin(t) - oy) / cell_size);
        const std::size_t cell = iy * nx + ix;
        if (stamp[cell] == tick) continue;
        stamp[cell] = tick;
        acc[cell] += p.charge;
    }
}

}  // namespace detail

// Charge-weighted circle votes over (centre_x, centre_y, radius); keeps the points
// within keep_distance of the best circle after a least-squares refinement.
inline HoughResult hough_circle_filter(const Points2D& points, const HoughParams& params) {
    params.validate();
    HoughResult res;
    if (points.size() < 3) {
        res.points = points;
        res.warning = true;
        return res;
    }
    double xmin = points[0].x, xmax = xmin, ymin = points[0].y, ymax = ymin;
    for (const auto& p : points) {
        xmin = std::min(xmin, p.x);
        xmax = std::max(xmax, p.x);
        ymin = std::min(ymin, p.y);
        ymax = std::max(ymax, p.y);
    }
    const double ox = xmin - params.radius_max, oy = ymin - params.radius_max;
    const auto nx = static_cast<std::size_t>(std::ceil((xmax - xmin + 2 * params.radius_max) / params.cell_size)) + 1;
    const auto ny = static_cast<std::size_t>(std::ceil((ymax - ymin + 2 * params.radius_max) / params.cell_size)) + 1;

    std::vector<double> acc(nx * ny);
    std::vector<std::uint32_t> stamp(nx * ny, 0);  // one vote per point per cell
    std::uint32_t tick = 0;
    const auto n_radii = static_cast<std::size_t>(std::floor((params.radius_max - params.radius_min) / params.radius_step)) + 1;
    bool found = false;
    for (std::size_t ri = 0; ri < n_radii; ++ri) {
        const double r = params.radius_min + params.radius_step * static_cast<double>(ri);
        std::fill(acc.begin(), acc.end(), 0.0);
        const auto n_angles = std::max<std::size_t>(8, static_cast<std::size_t>(std::ceil(2 * std::numbers::pi * r / (0.5 * params.cell_size))));
        for (const auto& p : points) detail::vote(p, r, n_angles, ox, oy, params.cell_size, nx, acc, stamp, ++tick);
        const auto top = std::max_element(acc.begin(), acc.end());
        if (!found || *top > res.votes) {
            found = true;
            res.votes = *top;
            const auto cell = static_cast<std::size_t>(top - acc.begin());
            res.best = {ox + (static_cast<double>(cell % nx) + 0.5) * params.cell_size,
                        oy + (static_cast<double>(cell / nx) + 0.5) * params.cell_size, r};
        }
    }
    // The accumulator cell is only accurate to half a cell; refine on the inliers
    // gathered with a tolerance that covers the quantization, then reselect.
    const double coarse = params.keep_distance + params.cell_size + params.radius_step;
    Circle refined;
    if (detail::fit_circle(detail::near_circle(points, res.best, coarse), refined)) res.best = refined;
    res.points = detail::near_circle(points, res.best, params.keep_distance);
    return res;
}

struct PreprocessResult {
    ImageGrid image;
    bool degenerate = false;
    bool hough_warning = false;
    std::size_t dropped = 0;
};

inline PreprocessResult preprocess_event(const EventCloud& cloud, const PreprocessConfig& cfg) {
    cfg.validate();
    PreprocessResult out;
    const EventCloud filtered = cfg.apply_nn_filter ? nn_filter(cloud, cfg.nn_radius, cfg.nn_min_neighbors) : cloud;
    Points2D pts = project_xy(filtered);
    if (cfg.apply_hough) {
        auto h = hough_circle_filter(pts, cfg.hough_params);
        out.hough_warning = h.warning;
        pts = std::move(h.points);
    }
    auto raster = rasterize(pts, cfg);
    out.dropped = raster.dropped;
    auto scaled = log_minmax_scale(raster.image);
    out.image = std::move(scaled.image);
    out.degenerate = scaled.degenerate;
    return out;
}

// ---- image dataset files -------------------------------------------------

struct ImageSet {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<ImageGrid> images;
};

inline std::string encode_atc1(const ImageSet& set) {
    io::Float32Table t;
    t.header = {static_cast<std::uint32_t>(set.images.size()), static_cast<std::uint32_t>(set.height),
                static_cast<std::uint32_t>(set.width)};
    t.values.reserve(set.images.size() * set.height * set.width);
    for (const auto& img : set.images) {
        require(img.height == set.height && img.width == set.width, "encode_atc1: image shape mismatch");
        for (double v : img.values) t.values.push_back(static_cast<float>(v));
    }
    return io::encode_table("ATC1", t);
}

inline ImageSet decode_atc1(std::string_view bytes, const std::string& what = "image dataset") {
    const auto t = io::decode_table(bytes, "ATC1", 3, what);
    ImageSet set;
    set.height = t.header[1];
    set.width = t.header[2];
    const std::size_t px = set.height * set.width;
    for (std::size_t i = 0; i < t.header[0]; ++i) {
        ImageGrid g(set.height, set.width);
        for (std::size_t k = 0; k < px; ++k) {
            const float v = t.values[i * px + k];
            if (!std::isfinite(v)) throw non_finite_error(what + ": non-finite pixel in image " + std::to_string(i));
            g.values[k] = v;
        }
        set.images.push_back(std::move(g));
    }
    return set;
}

inline ImageSet read_atc1(const std::filesystem::path& path) { return decode_atc1(io::read_file(path), path.string()); }

// Batch preprocessing; images are stored as float32 on disk, so round-trip through
// float here too and keep in-memory and on-disk datasets identical.
inline ImageSet preprocess_events(const std::vector<EventCloud>& events, const PreprocessConfig& cfg) {
    ImageSet set{cfg.resolution, cfg.resolution, {}};
    set.images.reserve(events.size());
    for (const auto& e : events) {
        auto img = preprocess_event(e, cfg).image;
        for (double& v : img.values) v = static_cast<float>(v);
        set.images.push_back(std::move(img));
    }
    return set;
}

inline std::vector<io::LabelRow> label_rows(const std::vector<EventCloud>& events) {
    std::vector<io::LabelRow> rows;
    for (const auto& e : events) rows.push_back({e.id, e.label ? std::string(sim::to_string(*e.label)) : std::string()});
    return rows;
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(HoughParams, radius_min, radius_max, radius_step, cell_size,
                                                keep_distance)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PreprocessConfig, resolution, bounds, apply_nn_filter, nn_radius,
                                                nn_min_neighbors, apply_hough, hough_params)

}  // namespace spiralcluster::pipeline
