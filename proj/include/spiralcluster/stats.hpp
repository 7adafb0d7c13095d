#pragma once

#include <cmath>
#include <span>

namespace spiralcluster {

struct Summary {
    double mean = 0;
    double std = 0;  // population standard deviation
    std::size_t count = 0;
};

inline Summary summarize(std::span<const double> xs) {
    Summary s;
    s.count = xs.size();
    if (xs.empty()) return s;
    double sum = 0;
    for (double x : xs) sum += x;
    s.mean = sum / static_cast<double>(xs.size());
    double ss = 0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(xs.size()));
    return s;
}

}  // namespace spiralcluster
