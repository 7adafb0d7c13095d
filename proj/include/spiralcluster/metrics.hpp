#pragma once

// External clustering validation: contingency table, Hungarian-matched
// clustering accuracy, adjusted Rand index and per-cluster purity.
//
// Orientation is fixed throughout: rows are predicted clusters, columns are
// ground-truth classes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spiralcluster/error.hpp"

namespace spiralcluster::metrics {

using LabelVector = std::vector<long>;

struct ContingencyTable {
    std::vector<std::vector<std::int64_t>> w;  // w[i][j]: predicted i, truth j
    std::vector<std::int64_t> e;               // row sums
    std::vector<std::int64_t> f;               // column sums
    std::int64_t n = 0;
    std::vector<long> row_ids;  // original predicted ids, first-appearance order
    std::vector<long> col_ids;  // original truth ids, first-appearance order

    std::size_t rows() const { return w.size(); }
    std::size_t cols() const { return f.size(); }
};

namespace detail {

inline std::vector<std::size_t> canonicalize(const LabelVector& v, std::vector<long>& ids) {
    std::map<long, std::size_t> index;
    std::vector<std::size_t> out;
    out.reserve(v.size());
    for (long x : v) {
        require(x >= 0, "label ids must be >= 0");
        auto [it, inserted] = index.emplace(x, ids.size());
        if (inserted) ids.push_back(x);
        out.push_back(it->second);
    }
    return out;
}

inline std::int64_t choose2(std::int64_t x) { return x < 2 ? 0 : x * (x - 1) / 2; }

}  // namespace detail

inline ContingencyTable contingency(const LabelVector& y_true, const LabelVector& y_pred) {
    require(y_true.size() == y_pred.size(), "contingency: label vectors differ in length (" +
                                                std::to_string(y_true.size()) + " vs " +
                                                std::to_string(y_pred.size()) + ")");
    require(!y_true.empty(), "contingency: empty label vectors");
    ContingencyTable t;
    const auto cols = detail::canonicalize(y_true, t.col_ids);
    const auto rows = detail::canonicalize(y_pred, t.row_ids);
    t.w.assign(t.row_ids.size(), std::vector<std::int64_t>(t.col_ids.size(), 0));
    t.e.assign(t.row_ids.size(), 0);
    t.f.assign(t.col_ids.size(), 0);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        ++t.w[rows[k]][cols[k]];
        ++t.e[rows[k]];
        ++t.f[cols[k]];
    }
    t.n = static_cast<std::int64_t>(y_true.size());
    return t;
}

using Matrix = std::vector<std::vector<double>>;

struct Assignment {
    std::vector<long> row_to_col;  // -1 where the row is left unmatched
    double cost = 0;
};

namespace detail {

// Shortest-augmenting-path Hungarian algorithm on a square matrix. Returns the
// optimal assignment and a feasible dual (u_i + v_j <= c_ij) attaining the optimum.
struct HungarianSolution {
    std::vector<std::size_t> row_to_col;
    std::vector<double> u, v;
};

inline HungarianSolution solve_square(const Matrix& c) {
    const std::size_t n = c.size();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0), v(n + 1, 0), minv(n + 1);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = c[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    HungarianSolution s;
    s.row_to_col.assign(n, 0);
    for (std::size_t j = 1; j <= n; ++j) s.row_to_col[p[j] - 1] = j - 1;
    s.u.assign(u.begin() + 1, u.end());
    s.v.assign(v.begin() + 1, v.end());
    return s;
}

// Alternating-path search in the tight-edge graph, skipping fixed rows/columns.
inline bool augment(std::size_t row, const std::vector<std::vector<char>>& tight, std::vector<long>& col_owner,
                    std::vector<char>& seen, const std::vector<char>& col_blocked) {
    for (std::size_t j = 0; j < tight.size(); ++j) {
        if (!tight[row][j] || seen[j] || col_blocked[j]) continue;
        seen[j] = 1;
        if (col_owner[j] < 0 ||
            augment(static_cast<std::size_t>(col_owner[j]), tight, col_owner, seen, col_blocked)) {
            col_owner[j] = static_cast<long>(row);
            return true;
        }
    }
    return false;
}

}  // namespace detail

// Minimum-cost one-to-one assignment covering min(rows, cols) pairs. Among all
// optimal assignments the lexicographically smallest row->column map is returned.
inline Assignment hungarian(const Matrix& cost) {
    Assignment out;
    if (cost.empty() || cost[0].empty()) {
        out.row_to_col.assign(cost.size(), -1);
        return out;
    }
    const std::size_t rows = cost.size(), cols = cost[0].size();
    double pad = 0;
    for (const auto& r : cost) {
        require(r.size() == cols, "hungarian: ragged cost matrix");
        for (double x : r) {
            if (!std::isfinite(x)) throw numeric_domain_error("hungarian: non-finite cost");
            pad = std::max(pad, x);
        }
    }
    const std::size_t n = std::max(rows, cols);
    Matrix sq(n, std::vector<double>(n, pad));
    double scale = 1;
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            sq[i][j] = cost[i][j];
            scale = std::max(scale, std::abs(cost[i][j]));
        }

    const auto sol = detail::solve_square(sq);

    // Every optimal assignment uses only edges that are tight under an optimal dual,
    // so the lexicographic minimum is a matching problem on the tight graph.
    const double tol = 1e-9 * scale;
    std::vector<std::vector<char>> tight(n, std::vector<char>(n, 0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) tight[i][j] = std::abs(sq[i][j] - sol.u[i] - sol.v[j]) <= tol;

    std::vector<long> col_owner(n, -1);
    for (std::size_t i = 0; i < n; ++i) col_owner[sol.row_to_col[i]] = static_cast<long>(i);
    std::vector<char> col_fixed(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (!tight[i][j] || col_fixed[j]) continue;
            if (col_owner[j] == static_cast<long>(i)) {
                col_fixed[j] = 1;
                break;
            }
            // Try to move row i onto column j: the displaced row must re-match within
            // the unfixed part of the graph, using row i's old column if needed.
            auto trial = col_owner;
            const auto displaced = static_cast<std::size_t>(trial[j]);
            for (auto& o : trial)
                if (o == static_cast<long>(i)) o = -1;
            trial[j] = static_cast<long>(i);
            auto blocked = col_fixed;
            blocked[j] = 1;
            std::vector<char> seen(n, 0);
            if (detail::augment(displaced, tight, trial, seen, blocked)) {
                col_owner = std::move(trial);
                col_fixed[j] = 1;
                break;
            }
        }
    }
    std::vector<long> row_to_col(n, -1);
    for (std::size_t j = 0; j < n; ++j) row_to_col[static_cast<std::size_t>(col_owner[j])] = static_cast<long>(j);

    out.row_to_col.assign(rows, -1);
    for (std::size_t i = 0; i < rows; ++i) {
        const long j = row_to_col[i];
        if (j >= 0 && static_cast<std::size_t>(j) < cols) {
            out.row_to_col[i] = j;
            out.cost += cost[i][static_cast<std::size_t>(j)];
        }
    }
    return out;
}

struct AccuracyResult {
    double accuracy = 0;
    std::vector<long> row_to_col;  // predicted row index -> truth column index, -1 if unmatched
};

// cost = max(W) - W, solved as an assignment; accuracy = (sum of matched w) / n.
inline AccuracyResult clustering_accuracy_detail(const ContingencyTable& t) {
    std::int64_t wmax = 0;
    for (const auto& r : t.w)
        for (auto x : r) wmax = std::max(wmax, x);
    Matrix cost(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) cost[i][j] = static_cast<double>(wmax - t.w[i][j]);
    const auto a = hungarian(cost);
    std::int64_t matched = 0;
    for (std::size_t i = 0; i < t.rows(); ++i)
        if (a.row_to_col[i] >= 0) matched += t.w[i][static_cast<std::size_t>(a.row_to_col[i])];
    return {static_cast<double>(matched) / static_cast<double>(t.n), a.row_to_col};
}

inline double clustering_accuracy(const ContingencyTable& t) { return clustering_accuracy_detail(t).accuracy; }

struct AriResult {
    double value = 0;
    bool degenerate = false;  // zero denominator; value set to 1 by convention
};

inline AriResult ari_detail(const ContingencyTable& t) {
    require(t.n >= 2, "ari: need at least two samples");
    using detail::choose2;
    std::int64_t index = 0, sum_e = 0, sum_f = 0;
    for (const auto& r : t.w)
        for (auto x : r) index += choose2(x);
    for (auto x : t.e) sum_e += choose2(x);
    for (auto x : t.f) sum_f += choose2(x);
    const std::int64_t pairs = choose2(t.n);

    // Denominator is zero iff (sum_e + sum_f) * pairs == 2 * sum_e * sum_f; checked in integers.
    const __int128 lhs = static_cast<__int128>(sum_e + sum_f) * pairs;
    const __int128 rhs = static_cast<__int128>(2) * sum_e * sum_f;
    if (lhs == rhs) return {1.0, true};

    // (index - sum_e sum_f / pairs) / ((sum_e + sum_f) / 2 - sum_e sum_f / pairs), scaled by 2 pairs so
    // numerator and denominator are exact integers and only the final division rounds.
    const __int128 num = static_cast<__int128>(2) * index * pairs - rhs;
    const __int128 den = lhs - rhs;
    return {static_cast<double>(num) / static_cast<double>(den), false};
}

inline double ari(const ContingencyTable& t) { return ari_detail(t).value; }

// max_j w_ij / e_i for every non-empty predicted cluster.
inline std::vector<double> purity(const ContingencyTable& t) {
    std::vector<double> out;
    for (std::size_t i = 0; i < t.rows(); ++i) {
        if (t.e[i] == 0) continue;
        const auto m = *std::max_element(t.w[i].begin(), t.w[i].end());
        out.push_back(static_cast<double>(m) / static_cast<double>(t.e[i]));
    }
    return out;
}

struct ClusterReport {
    std::int64_t n = 0;
    double accuracy = 0;
    double ari = 0;
    bool ari_degenerate = false;
    std::vector<double> purity;
    std::map<long, long> matching;  // predicted cluster id -> truth class id
    ContingencyTable table;
};

inline ClusterReport evaluate(const LabelVector& y_true, const LabelVector& y_pred) {
    ClusterReport r;
    r.table = contingency(y_true, y_pred);
    r.n = r.table.n;
    const auto acc = clustering_accuracy_detail(r.table);
    r.accuracy = acc.accuracy;
    for (std::size_t i = 0; i < acc.row_to_col.size(); ++i)
        if (acc.row_to_col[i] >= 0)
            r.matching[r.table.row_ids[i]] = r.table.col_ids[static_cast<std::size_t>(acc.row_to_col[i])];
    const auto a = ari_detail(r.table);
    r.ari = a.value;
    r.ari_degenerate = a.degenerate;
    r.purity = purity(r.table);
    return r;
}

inline nlohmann::json to_json(const ClusterReport& r) {
    nlohmann::json matching = nlohmann::json::object();
    for (const auto& [k, v] : r.matching) matching[std::to_string(k)] = v;
    return {
        {"n", r.n},
        {"accuracy", r.accuracy},
        {"ari", r.ari},
        {"ari_degenerate", r.ari_degenerate},
        {"purity", r.purity},
        {"matching", matching},
        {"contingency",
         {{"orientation", "rows=predicted,cols=truth"},
          {"w", r.table.w},
          {"row_ids", r.table.row_ids},
          {"col_ids", r.table.col_ids}}},
    };
}

// Text rendering of W with marginals, rows = predicted clusters.
inline std::string format_contingency(const ContingencyTable& t, const std::vector<std::string>& col_names = {}) {
    std::ostringstream os;
    os << "pred\\truth";
    for (std::size_t j = 0; j < t.cols(); ++j)
        os << '\t' << (j < col_names.size() ? col_names[j] : std::to_string(t.col_ids[j]));
    os << "\tsum\n";
    for (std::size_t i = 0; i < t.rows(); ++i) {
        os << t.row_ids[i];
        for (auto x : t.w[i]) os << '\t' << x;
        os << '\t' << t.e[i] << '\n';
    }
    os << "sum";
    for (auto x : t.f) os << '\t' << x;
    os << '\t' << t.n << '\n';
    return os.str();
}

}  // namespace spiralcluster::metrics
