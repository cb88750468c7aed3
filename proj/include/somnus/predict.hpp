#pragma once

// Whole-recording inference: epoch encodings are computed once per epoch,
// then every stride-1 window runs through the sequence level and the
// overlapping outputs are fused.

#include <algorithm>
#include <string>
#include <vector>

#include "somnus/data.hpp"
#include "somnus/features.hpp"
#include "somnus/model.hpp"
#include "somnus/parallel.hpp"
#include "somnus/train.hpp"

namespace somnus {

struct RecordingPrediction {
    std::string id;
    std::size_t length = 0;                                  // L
    std::vector<double> probs;                               // n x C, fused
    std::vector<std::uint8_t> predicted;                     // n
    std::vector<std::vector<AttentionRecord>> epoch_attention;  // [n][N_E], when captured
    std::vector<std::size_t> window_starts;                  // stride-1 windows
    std::vector<AttentionRecord> window_attention;           // last sequence layer per window, when captured

    std::size_t epochs() const { return predicted.size(); }
    std::span<const double> row(std::size_t e) const { return std::span<const double>(probs).subspan(e * kClasses, kClasses); }
};

/// `rec` must hold normalized spectrograms. Throws DataError when the
/// recording is shorter than the model's sequence length.
template <typename T>
RecordingPrediction predict_recording(const SleepTransformer<T>& model, const FeatureRecording& rec, bool capture_attention,
                                      std::size_t chunk = 32) {
    const auto& cfg = model.config();
    const std::size_t n = rec.epochs(), L = cfg.sequence_length, F = cfg.bins, C = cfg.classes;
    if (n < L) {
        throw DataError("recording " + rec.id + " has " + std::to_string(n) + " epochs, fewer than sequence length " +
                        std::to_string(L));
    }
    RecordingPrediction out;
    out.id = rec.id;
    out.length = L;
    ForwardContext ctx;
    ctx.capture_attention = capture_attention;

    std::vector<T> pooled(n * F);
    if (capture_attention) out.epoch_attention.resize(n);
    const std::size_t epoch_chunks = (n + chunk * L - 1) / (chunk * L);
    parallel_for(epoch_chunks, [&](std::size_t k) {
        NoGradGuard no_grad;
        const std::size_t from = k * chunk * L, count = std::min(chunk * L, n - from);
        std::vector<const Spectrogram*> specs;
        for (std::size_t i = from; i < from + count; ++i) specs.push_back(&rec.spectrograms[i]);
        auto enc = model.encode_epochs(model.input_tensor(specs), ctx);
        std::copy(enc.pooled.values().begin(), enc.pooled.values().end(), pooled.begin() + static_cast<std::ptrdiff_t>(from * F));
        if (capture_attention)
            for (std::size_t i = 0; i < count; ++i) out.epoch_attention[from + i] = std::move(enc.attention[i]);
    });

    out.window_starts = window_starts(rec.labels, L, 1, WindowMode::inference);
    const std::size_t W = out.window_starts.size();
    std::vector<WindowOutput> windows(W);
    if (capture_attention) out.window_attention.resize(W);
    const std::size_t window_chunks = (W + chunk - 1) / chunk;
    parallel_for(window_chunks, [&](std::size_t k) {
        NoGradGuard no_grad;
        const std::size_t from = k * chunk, count = std::min(chunk, W - from);
        std::vector<T> x(count * L * F);
        for (std::size_t b = 0; b < count; ++b) {
            const std::size_t s = out.window_starts[from + b];
            std::copy_n(pooled.begin() + static_cast<std::ptrdiff_t>(s * F), L * F,
                        x.begin() + static_cast<std::ptrdiff_t>(b * L * F));
        }
        std::vector<std::vector<AttentionRecord>> attention;
        const auto probs = model.classify_sequences(Tensor<T>::from({count, L, F}, std::move(x)), ctx, &attention);
        for (std::size_t b = 0; b < count; ++b) {
            auto& w = windows[from + b];
            w.start = out.window_starts[from + b];
            w.probs.resize(L * C);
            for (std::size_t i = 0; i < L * C; ++i) w.probs[i] = static_cast<double>(probs[b * L * C + i]);
            if (capture_attention) out.window_attention[from + b] = std::move(attention[b].back());
        }
    });

    out.probs = fuse_predictions(windows, n, L, C);
    out.predicted.resize(n);
    for (std::size_t e = 0; e < n; ++e) out.predicted[e] = argmax_stage(out.row(e));
    return out;
}

}  // namespace somnus
