#pragma once

// Normalized-entropy confidence, triage into accepted (A) and deferred
// (A-bar) epochs, and transitioning-epoch flags.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "somnus/errors.hpp"

namespace somnus {

enum class ConfidenceMeasure { entropy, max_probability };

inline void check_distribution(std::span<const double> probs) {
    if (probs.size() < 2) throw DataError("confidence needs at least two classes");
    double total = 0.0;
    for (double p : probs) {
        if (!std::isfinite(p) || p < 0.0) throw DataError("probability vector has a negative or non-finite entry");
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-6) throw DataError("probability vector sums to " + std::to_string(total) + ", not 1");
}

/// H(p) = -sum p_c log p_c / log C with 0 log 0 = 0. Terms are summed in
/// ascending order in extended precision, which makes the result invariant
/// to the order of `probs` and exact at the uniform and one-hot extremes.
inline double normalized_entropy(std::span<const double> probs) {
    check_distribution(probs);
    std::vector<double> sorted(probs.begin(), probs.end());
    std::sort(sorted.begin(), sorted.end());
    long double h = 0.0L;
    for (double p : sorted)
        if (p > 0.0) h += static_cast<long double>(p) * std::log(1.0L / static_cast<long double>(p));
    return static_cast<double>(h / std::log(static_cast<long double>(probs.size())));
}

/// Conf = 1 - H, clamped to [0, 1].
inline double confidence(std::span<const double> probs, ConfidenceMeasure measure = ConfidenceMeasure::entropy) {
    if (measure == ConfidenceMeasure::max_probability) {
        check_distribution(probs);
        return *std::max_element(probs.begin(), probs.end());
    }
    return std::clamp(1.0 - normalized_entropy(probs), 0.0, 1.0);
}

struct TriageConfig {
    enum class Mode { threshold, percentile };
    Mode mode = Mode::threshold;
    double threshold = 0.5;
    double percentile = 20.0;

    void validate() const {
        if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("triage.threshold must lie in [0, 1]");
        if (!(percentile > 0.0 && percentile < 100.0)) throw ConfigError("triage.percentile must lie in (0, 100)");
    }
};

inline const char* to_string(TriageConfig::Mode m) { return m == TriageConfig::Mode::threshold ? "threshold" : "percentile"; }

struct TriagePartition {
    std::vector<std::size_t> accepted;  // A
    std::vector<std::size_t> deferred;  // A-bar
    std::vector<bool> is_deferred;      // per epoch
};

/// Threshold mode defers every epoch with confidence strictly below the
/// threshold. Percentile mode defers the floor(p/100 * n) least confident
/// epochs, breaking ties by epoch index.
inline TriagePartition triage(std::span<const double> confidences, const TriageConfig& cfg) {
    cfg.validate();
    const std::size_t n = confidences.size();
    TriagePartition out;
    out.is_deferred.assign(n, false);
    if (cfg.mode == TriageConfig::Mode::threshold) {
        for (std::size_t i = 0; i < n; ++i) out.is_deferred[i] = confidences[i] < cfg.threshold;
    } else {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return confidences[a] < confidences[b]; });
        const auto k = static_cast<std::size_t>(std::floor(cfg.percentile / 100.0 * static_cast<double>(n)));
        for (std::size_t i = 0; i < k; ++i) out.is_deferred[order[i]] = true;
    }
    for (std::size_t i = 0; i < n; ++i) (out.is_deferred[i] ? out.deferred : out.accepted).push_back(i);
    return out;
}

/// Epoch i is transitioning when its code differs from an existing
/// neighbour's. Codes are compared literally, excluded (255) included.
inline std::vector<bool> flag_transitioning(std::span<const std::uint8_t> hypnogram) {
    const std::size_t n = hypnogram.size();
    std::vector<bool> flags(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        flags[i] = (i > 0 && hypnogram[i] != hypnogram[i - 1]) || (i + 1 < n && hypnogram[i] != hypnogram[i + 1]);
    }
    return flags;
}

}  // namespace somnus
