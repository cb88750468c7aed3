#pragma once

// Attention-based interpretability: per-frame heat maps, attention-weighted
// EEG resynthesis and sequence-level influence profiles.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "somnus/encoder.hpp"
#include "somnus/errors.hpp"
#include "somnus/signal.hpp"

namespace somnus {

enum class HeadAggregation { sum, mean };

/// Combines the per-head matrices of a record into one l x l matrix.
inline std::vector<double> aggregate_heads(const AttentionRecord& rec, HeadAggregation how = HeadAggregation::sum) {
    const std::size_t l = rec.length;
    std::vector<double> out(l * l, 0.0);
    for (std::size_t h = 0; h < rec.heads; ++h)
        for (std::size_t k = 0; k < l * l; ++k) out[k] += rec.scores[h * l * l + k];
    if (how == HeadAggregation::mean)
        for (double& v : out) v /= static_cast<double>(rec.heads);
    return out;
}

/// Head-summed matrix with every row rescaled to sum to one.
inline std::vector<double> row_normalized(const AttentionRecord& rec) {
    auto m = aggregate_heads(rec, HeadAggregation::sum);
    const std::size_t l = rec.length;
    for (std::size_t i = 0; i < l; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < l; ++j) s += m[i * l + j];
        if (s <= 0.0) throw NumericError("attention row sums to zero");
        for (std::size_t j = 0; j < l; ++j) m[i * l + j] /= s;
    }
    return m;
}

inline const AttentionRecord& pick_layer(std::span<const AttentionRecord> records, std::optional<std::size_t> layer) {
    if (records.empty()) throw UsageError("no attention records captured");
    const std::size_t idx = layer.value_or(records.size() - 1);
    if (idx >= records.size()) throw UsageError("attention layer " + std::to_string(idx) + " was not captured");
    return records[idx];
}

struct Heatmap {
    std::vector<double> values;  // one weight per frame, in [0, 1]
    bool degenerate = false;     // constant column sums; values are all zero
};

/// Column sums of the aggregated attention matrix, min-max scaled to [0, 1].
inline Heatmap epoch_heatmap(const AttentionRecord& rec, HeadAggregation how = HeadAggregation::sum) {
    const auto m = aggregate_heads(rec, how);
    const std::size_t l = rec.length;
    Heatmap out;
    out.values.assign(l, 0.0);
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < l; ++j) out.values[j] += m[i * l + j];
    const auto [lo, hi] = std::minmax_element(out.values.begin(), out.values.end());
    const double min = *lo, range = *hi - *lo;
    if (!(range > 1e-9 * std::max(1.0, std::abs(*hi)))) {
        std::fill(out.values.begin(), out.values.end(), 0.0);
        out.degenerate = true;
        return out;
    }
    for (double& v : out.values) v = (v - min) / range;
    return out;
}

/// Defaults to the last captured layer.
inline Heatmap epoch_heatmap(std::span<const AttentionRecord> records, std::optional<std::size_t> layer = std::nullopt,
                             HeadAggregation how = HeadAggregation::sum) {
    return epoch_heatmap(pick_layer(records, layer), how);
}

/// Left-multiplies the linear magnitude matrix by each layer's
/// row-normalized attention in order, then resynthesizes with the
/// spectrogram's own phase.
inline std::vector<double> attended_eeg(const Spectrogram& spec, std::span<const AttentionRecord> records,
                                        const NormStats* stats = nullptr) {
    if (!spec.has_phase()) throw UsageError("attended_eeg needs the spectrogram phase");
    auto mag = linear_magnitudes(spec, stats);
    std::vector<double> next(mag.size());
    for (const auto& rec : records) {
        if (rec.length != kFrames) throw UsageError("attended_eeg needs epoch-level attention records");
        const auto a = row_normalized(rec);
        std::fill(next.begin(), next.end(), 0.0);
        for (std::size_t i = 0; i < kFrames; ++i)
            for (std::size_t j = 0; j < kFrames; ++j) {
                const double w = a[i * kFrames + j];
                for (std::size_t k = 0; k < kFullBins; ++k) next[i * kFullBins + k] += w * mag[j * kFullBins + k];
            }
        mag.swap(next);
    }
    return istft(mag, spec.phase);
}

/// Influence matrix of a sequence-level record: row i is how much each
/// epoch of the window contributes to epoch i. Defaults to the last layer.
inline std::vector<double> influence_rows(std::span<const AttentionRecord> records,
                                          std::optional<std::size_t> layer = std::nullopt) {
    return row_normalized(pick_layer(records, layer));
}

/// Window start that centres `epoch` within a stride-1 tiling of a
/// recording of `n` epochs.
inline std::size_t centered_window_start(std::size_t epoch, std::size_t n, std::size_t length) {
    if (n < length) throw UsageError("recording shorter than the sequence length");
    const std::size_t half = length / 2;
    const std::size_t s = epoch > half ? epoch - half : 0;
    return std::min(s, n - length);
}

/// Spreads per-frame weights over the samples of an epoch. Each frame's
/// weight is held over the hop span around its centre; adjacent frames are
/// cross-faded linearly over `fade` samples centred on their shared boundary.
inline std::vector<double> heatmap_to_samples(std::span<const double> frame_weights, std::size_t fade = 20) {
    if (frame_weights.size() != kFrames) throw UsageError("heat map must have one weight per frame");
    std::vector<double> out(kEpochSamples);
    const double half = static_cast<double>(kFrameLength) / 2.0;
    const double hop = static_cast<double>(kFrameHop);
    const double f = static_cast<double>(fade) / (2.0 * hop);  // half fade width in frame units
    for (std::size_t n = 0; n < kEpochSamples; ++n) {
        // frame t is centred at t * hop + half; boundaries sit halfway between centres
        const double pos = (static_cast<double>(n) + 0.5 - half) / hop;
        const double nearest = std::clamp(std::round(pos), 0.0, static_cast<double>(kFrames - 1));
        const double boundary = std::round(pos - 0.5) + 0.5;  // nearest frame boundary
        const double d = pos - boundary;
        const double lower = boundary - 0.5;
        if (f > 0.0 && std::abs(d) < f && lower >= 0.0 && lower + 1.0 <= static_cast<double>(kFrames - 1)) {
            const auto t = static_cast<std::size_t>(lower);
            const double u = (d + f) / (2.0 * f);
            out[n] = (1.0 - u) * frame_weights[t] + u * frame_weights[t + 1];
        } else {
            out[n] = frame_weights[static_cast<std::size_t>(nearest)];
        }
    }
    return out;
}

}  // namespace somnus
