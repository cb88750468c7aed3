#pragma once

// Time-frequency features for single-channel EEG epochs.
//
// A 30 s epoch at 100 Hz is cut into 29 frames of 2 s with 50% overlap,
// Hamming-windowed, zero-padded to 256 points and transformed. The model
// sees log(|X| + 1e-12) for bins 1..128; bin 0 is dropped from the image
// but its magnitude and every bin's phase are kept so the epoch can be
// resynthesized by weighted overlap-add.

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "somnus/errors.hpp"

namespace somnus {

inline constexpr std::size_t kEpochSamples = 3000;
inline constexpr std::size_t kSampleRate = 100;
inline constexpr std::size_t kFrameLength = 200;
inline constexpr std::size_t kFrameHop = 100;
inline constexpr std::size_t kFftSize = 256;
inline constexpr std::size_t kFrames = (kEpochSamples - kFrameLength) / kFrameHop + 1;
inline constexpr std::size_t kFullBins = kFftSize / 2 + 1;
inline constexpr std::size_t kBins = kFullBins - 1;
inline constexpr double kLogFloor = 1e-12;
inline constexpr double kStdFloor = 1e-8;
inline constexpr double kWindowEnergyFloor = 1e-8;

static_assert(kFrames == 29 && kBins == 128);

struct RawEpoch {
    std::vector<double> samples;
    std::string channel;
    std::size_t epoch_index = 0;
};

struct Spectrogram {
    std::vector<float> values;         // kFrames x kBins, row-major, log-amplitude
    std::vector<float> phase;          // kFrames x kFullBins x (cos, sin); empty when unknown
    std::vector<float> dc_magnitude;   // kFrames linear amplitudes of bin 0; empty reads as zero
    bool normalized = false;

    float at(std::size_t frame, std::size_t bin) const { return values[frame * kBins + bin]; }
    bool has_phase() const { return phase.size() == kFrames * kFullBins * 2; }
};

struct NormStats {
    std::vector<double> mean;  // kBins
    std::vector<double> std;   // kBins, floored at kStdFloor

    static NormStats identity() { return {std::vector<double>(kBins, 0.0), std::vector<double>(kBins, 1.0)}; }
};

/// Symmetric Hamming window 0.54 - 0.46 cos(2 pi n / (N - 1)).
inline const std::array<double, kFrameLength>& hamming_window() {
    static const auto window = [] {
        std::array<double, kFrameLength> w{};
        for (std::size_t n = 0; n < kFrameLength; ++n) {
            w[n] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / (kFrameLength - 1));
        }
        return w;
    }();
    return window;
}

namespace detail {

// Plans are created once; fftw_execute_dft_* on fresh arrays is thread-safe.
struct FftPlans {
    fftw_plan forward;
    fftw_plan inverse;

    FftPlans() {
        std::vector<double> real(kFftSize);
        std::vector<fftw_complex> spectrum(kFullBins);
        forward = fftw_plan_dft_r2c_1d(static_cast<int>(kFftSize), real.data(), spectrum.data(),
                                       FFTW_ESTIMATE | FFTW_UNALIGNED);
        inverse = fftw_plan_dft_c2r_1d(static_cast<int>(kFftSize), spectrum.data(), real.data(),
                                       FFTW_ESTIMATE | FFTW_UNALIGNED);
    }
    ~FftPlans() {
        fftw_destroy_plan(forward);
        fftw_destroy_plan(inverse);
    }
    FftPlans(const FftPlans&) = delete;
    FftPlans& operator=(const FftPlans&) = delete;
};

inline const FftPlans& fft_plans() {
    static const FftPlans plans;
    return plans;
}

}  // namespace detail

inline Spectrogram stft_epoch(std::span<const double> samples) {
    if (samples.size() != kEpochSamples) {
        throw DataError("epoch must have " + std::to_string(kEpochSamples) + " samples, got " +
                        std::to_string(samples.size()));
    }
    const auto& window = hamming_window();
    const auto& plans = detail::fft_plans();
    Spectrogram spec;
    spec.values.resize(kFrames * kBins);
    spec.phase.resize(kFrames * kFullBins * 2);
    spec.dc_magnitude.resize(kFrames);
    std::vector<double> frame(kFftSize, 0.0);
    std::vector<fftw_complex> bins(kFullBins);
    for (std::size_t t = 0; t < kFrames; ++t) {
        for (std::size_t n = 0; n < kFrameLength; ++n) frame[n] = samples[t * kFrameHop + n] * window[n];
        fftw_execute_dft_r2c(plans.forward, frame.data(), bins.data());
        for (std::size_t k = 0; k < kFullBins; ++k) {
            const double re = bins[k][0], im = bins[k][1];
            const double mag = std::hypot(re, im);
            float* ph = spec.phase.data() + (t * kFullBins + k) * 2;
            ph[0] = mag > 0.0 ? static_cast<float>(re / mag) : 1.0f;
            ph[1] = mag > 0.0 ? static_cast<float>(im / mag) : 0.0f;
            if (k == 0) {
                spec.dc_magnitude[t] = static_cast<float>(mag);
            } else {
                spec.values[t * kBins + k - 1] = static_cast<float>(std::log(mag + kLogFloor));
            }
        }
    }
    return spec;
}

inline Spectrogram stft_epoch(const RawEpoch& epoch) { return stft_epoch(epoch.samples); }

/// Per-bin mean and standard deviation over every frame of every spectrogram.
inline NormStats compute_norm_stats(std::span<const Spectrogram> specs) {
    NormStats stats{std::vector<double>(kBins, 0.0), std::vector<double>(kBins, 0.0)};
    std::size_t count = 0;
    for (const auto& s : specs) {
        if (s.normalized) throw UsageError("norm stats must be computed from unnormalized spectrograms");
        for (std::size_t t = 0; t < kFrames; ++t)
            for (std::size_t f = 0; f < kBins; ++f) stats.mean[f] += s.at(t, f);
        count += kFrames;
    }
    if (count == 0) throw DataError("cannot compute norm stats from zero spectrograms");
    for (double& m : stats.mean) m /= static_cast<double>(count);
    for (const auto& s : specs)
        for (std::size_t t = 0; t < kFrames; ++t)
            for (std::size_t f = 0; f < kBins; ++f) {
                const double d = s.at(t, f) - stats.mean[f];
                stats.std[f] += d * d;
            }
    for (double& v : stats.std) v = std::max(std::sqrt(v / static_cast<double>(count)), kStdFloor);
    return stats;
}

inline Spectrogram normalize(Spectrogram spec, const NormStats& stats) {
    if (spec.normalized) throw UsageError("spectrogram is already normalized");
    if (stats.mean.size() != kBins || stats.std.size() != kBins) throw UsageError("norm stats have wrong width");
    for (std::size_t t = 0; t < kFrames; ++t)
        for (std::size_t f = 0; f < kBins; ++f) {
            float& v = spec.values[t * kBins + f];
            v = static_cast<float>((v - stats.mean[f]) / stats.std[f]);
        }
    spec.normalized = true;
    return spec;
}

inline Spectrogram denormalize(Spectrogram spec, const NormStats& stats) {
    if (!spec.normalized) throw UsageError("spectrogram is not normalized");
    for (std::size_t t = 0; t < kFrames; ++t)
        for (std::size_t f = 0; f < kBins; ++f) {
            float& v = spec.values[t * kBins + f];
            v = static_cast<float>(v * stats.std[f] + stats.mean[f]);
        }
    spec.normalized = false;
    return spec;
}

/// Linear magnitudes kFrames x kFullBins (bin 0 first) from log features.
/// Normalization is undone with `stats` when the spectrogram carries it.
inline std::vector<double> linear_magnitudes(const Spectrogram& spec, const NormStats* stats = nullptr) {
    if (spec.normalized && stats == nullptr) throw UsageError("normalized spectrogram needs norm stats to invert");
    std::vector<double> mag(kFrames * kFullBins, 0.0);
    for (std::size_t t = 0; t < kFrames; ++t) {
        if (!spec.dc_magnitude.empty()) mag[t * kFullBins] = spec.dc_magnitude[t];
        for (std::size_t f = 0; f < kBins; ++f) {
            double v = spec.at(t, f);
            if (spec.normalized) v = v * stats->std[f] + stats->mean[f];
            mag[t * kFullBins + f + 1] = std::max(std::exp(v) - kLogFloor, 0.0);
        }
    }
    return mag;
}

/// Weighted overlap-add resynthesis from linear magnitudes and unit phasors.
/// Samples whose summed squared window is below kWindowEnergyFloor are zero.
inline std::vector<double> istft(std::span<const double> magnitudes, std::span<const float> phase) {
    if (phase.size() != kFrames * kFullBins * 2) throw UsageError("istft needs the phase of every bin");
    if (magnitudes.size() != kFrames * kFullBins) throw UsageError("istft needs kFrames x kFullBins magnitudes");
    const auto& window = hamming_window();
    const auto& plans = detail::fft_plans();
    std::vector<double> signal(kEpochSamples, 0.0), energy(kEpochSamples, 0.0);
    std::vector<fftw_complex> bins(kFullBins);
    std::vector<double> frame(kFftSize);
    for (std::size_t t = 0; t < kFrames; ++t) {
        for (std::size_t k = 0; k < kFullBins; ++k) {
            const double m = magnitudes[t * kFullBins + k];
            bins[k][0] = m * phase[(t * kFullBins + k) * 2];
            bins[k][1] = m * phase[(t * kFullBins + k) * 2 + 1];
        }
        // The Nyquist and DC bins of a real signal have no imaginary part.
        bins[0][1] = 0.0;
        bins[kFullBins - 1][1] = 0.0;
        fftw_execute_dft_c2r(plans.inverse, bins.data(), frame.data());
        for (std::size_t n = 0; n < kFrameLength; ++n) {
            const double w = window[n];
            signal[t * kFrameHop + n] += w * frame[n] / static_cast<double>(kFftSize);
            energy[t * kFrameHop + n] += w * w;
        }
    }
    for (std::size_t i = 0; i < kEpochSamples; ++i) {
        signal[i] = energy[i] < kWindowEnergyFloor ? 0.0 : signal[i] / energy[i];
    }
    return signal;
}

/// Resynthesizes the time-domain epoch of a (possibly normalized) spectrogram.
inline std::vector<double> reconstruct(const Spectrogram& spec, const NormStats* stats = nullptr) {
    if (!spec.has_phase()) throw UsageError("spectrogram has no phase record");
    return istft(linear_magnitudes(spec, stats), spec.phase);
}

}  // namespace somnus
