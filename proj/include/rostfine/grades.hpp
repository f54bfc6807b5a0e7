#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>

#include "rostfine/errors.hpp"

namespace rostfine {

inline constexpr std::array<char, 5> kGradeNames{'A', 'B', 'C', 'D', 'E'};

using GradeCounts = std::array<std::uint32_t, 5>;
using GradeProbs = std::array<double, 5>;

/// probs = counts / sum(counts).
inline GradeProbs normalize_counts(const GradeCounts& counts) {
    const std::uint64_t total = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
    if (total == 0) throw ValueError("grade counts are all zero");
    GradeProbs p{};
    for (std::size_t i = 0; i < 5; ++i) p[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
    return p;
}

/// Expert-vote histogram over grades A (best) to E (worst).
struct GradeDistribution {
    GradeCounts counts{};

    std::uint32_t total() const { return std::accumulate(counts.begin(), counts.end(), std::uint32_t{0}); }
    GradeProbs probs() const { return normalize_counts(counts); }

    friend bool operator==(const GradeDistribution&, const GradeDistribution&) = default;
};

/// Index of the n-th largest entry (n is 1-based). Equal entries rank the
/// better grade (lower index) first.
inline std::size_t nth_grade(std::span<const double> dist, std::size_t n) {
    if (dist.size() != 5) throw DimensionError("nth_grade: expected 5 grades, got " + std::to_string(dist.size()));
    if (n < 1 || n > 5) throw ValueError("nth_grade: n must lie in [1, 5], got " + std::to_string(n), "n");
    std::array<std::size_t, 5> order{0, 1, 2, 3, 4};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
    return order[n - 1];
}

inline std::size_t most_selected(const GradeDistribution& g) {
    const auto p = g.probs();
    return nth_grade(p, 1);
}

} // namespace rostfine
