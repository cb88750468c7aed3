#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "somnus/signal.hpp"

using namespace somnus;

namespace {

std::vector<double> sine(double hz, double amplitude = 1.0, double phase = 0.0) {
    std::vector<double> x(kEpochSamples);
    for (std::size_t n = 0; n < x.size(); ++n) {
        x[n] = amplitude * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(n) / kSampleRate + phase);
    }
    return x;
}

std::vector<double> white_noise(std::uint64_t seed, double sigma = 20.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, sigma);
    std::vector<double> x(kEpochSamples);
    for (double& v : x) v = dist(rng);
    return x;
}

// O(N^2) DFT magnitude of one windowed, zero-padded frame.
std::vector<double> brute_force_frame_magnitude(const std::vector<double>& x, std::size_t frame) {
    std::vector<double> mag(kFullBins);
    for (std::size_t k = 0; k < kFullBins; ++k) {
        std::complex<double> acc{};
        for (std::size_t n = 0; n < kFrameLength; ++n) {
            const double w = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / (kFrameLength - 1));
            acc += w * x[frame * kFrameHop + n] *
                   std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * n) / kFftSize);
        }
        mag[k] = std::abs(acc);
    }
    return mag;
}

std::size_t dominant_bin(const std::vector<double>& x) {
    std::size_t best = 0;
    double best_mag = -1.0;
    for (std::size_t k = 1; k < x.size() / 2; ++k) {
        std::complex<double> acc{};
        for (std::size_t n = 0; n < x.size(); ++n) {
            acc += x[n] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * n) / x.size());
        }
        if (std::abs(acc) > best_mag) best_mag = std::abs(acc), best = k;
    }
    return best;
}

double interior_relative_error(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = kFrameHop; i < kEpochSamples - kFrameHop; ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num / den);
}

}  // namespace

TEST(Stft, FrameArithmetic) {
    EXPECT_EQ((kEpochSamples - kFrameLength) / kFrameHop + 1, 29u);
    EXPECT_EQ(kFrames, 29u);
    EXPECT_EQ(kBins, 128u);
}

TEST(Stft, ShapeIsAlways29By128) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto spec = stft_epoch(white_noise(seed));
        EXPECT_EQ(spec.values.size(), 29u * 128u);
        EXPECT_EQ(spec.phase.size(), 29u * 129u * 2u);
        EXPECT_TRUE(spec.has_phase());
        EXPECT_FALSE(spec.normalized);
    }
}

TEST(Stft, WrongSampleCountIsDataError) {
    std::vector<double> short_epoch(2999, 0.0);
    EXPECT_THROW(stft_epoch(short_epoch), DataError);
}

TEST(Stft, MatchesBruteForceDft) {
    const auto x = white_noise(17);
    const auto spec = stft_epoch(x);
    for (std::size_t frame : {0u, 13u, 28u}) {
        const auto mag = brute_force_frame_magnitude(x, frame);
        EXPECT_NEAR(spec.dc_magnitude[frame], mag[0], 1e-3 * mag[0] + 1e-6);
        for (std::size_t k = 1; k < kFullBins; ++k) {
            EXPECT_NEAR(spec.at(frame, k - 1), std::log(mag[k] + kLogFloor), 1e-5) << "frame " << frame << " bin " << k;
        }
    }
}

TEST(Stft, TenHertzSinePeaksAtBin26) {
    const auto spec = stft_epoch(sine(10.0, 50.0));
    std::size_t best = 0;
    double best_mean = -1e300;
    for (std::size_t f = 0; f < kBins; ++f) {
        double m = 0.0;
        for (std::size_t t = 0; t < kFrames; ++t) m += spec.at(t, f);
        if (m > best_mean) best_mean = m, best = f;
    }
    // 10 Hz / (100/256 Hz per bin) = 25.6 -> full-spectrum bin 26 -> column 25
    EXPECT_EQ(best, 25u);
    const auto oracle = brute_force_frame_magnitude(sine(10.0, 50.0), 5);
    EXPECT_EQ(std::max_element(oracle.begin() + 1, oracle.end()) - oracle.begin(), 26);
}

TEST(Stft, ScalingShiftsLogAmplitudeByLogC) {
    const auto x = white_noise(3);
    auto scaled = x;
    for (double& v : scaled) v *= 7.0;
    const auto a = stft_epoch(x), b = stft_epoch(scaled);
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        EXPECT_NEAR(b.values[i] - a.values[i], std::log(7.0), 1e-5);
    }
}

TEST(Normalize, SelfStatsGiveZeroColumnMeans) {
    const auto spec = stft_epoch(white_noise(8));
    const std::vector<Spectrogram> one{spec};
    const auto stats = compute_norm_stats(one);
    const auto n = normalize(spec, stats);
    EXPECT_TRUE(n.normalized);
    for (std::size_t f = 0; f < kBins; ++f) {
        double m = 0.0;
        for (std::size_t t = 0; t < kFrames; ++t) m += n.at(t, f);
        EXPECT_NEAR(m / kFrames, 0.0, 1e-6);
    }
}

TEST(Normalize, IdentityStatsLeaveValuesUnchanged) {
    const auto spec = stft_epoch(white_noise(9));
    const auto n = normalize(spec, NormStats::identity());
    EXPECT_EQ(n.values, spec.values);
}

TEST(Normalize, DenormalizeRoundTrips) {
    const auto spec = stft_epoch(white_noise(10));
    const std::vector<Spectrogram> train{stft_epoch(white_noise(11)), stft_epoch(white_noise(12))};
    const auto stats = compute_norm_stats(train);
    const auto back = denormalize(normalize(spec, stats), stats);
    for (std::size_t i = 0; i < spec.values.size(); ++i) EXPECT_NEAR(back.values[i], spec.values[i], 1e-5);
}

TEST(Normalize, DoubleNormalizationIsUsageError) {
    const auto n = normalize(stft_epoch(white_noise(1)), NormStats::identity());
    EXPECT_THROW(normalize(n, NormStats::identity()), UsageError);
}

TEST(Normalize, StdIsFlooredForConstantBins) {
    std::vector<Spectrogram> zeros{stft_epoch(std::vector<double>(kEpochSamples, 0.0))};
    const auto stats = compute_norm_stats(zeros);
    for (double s : stats.std) EXPECT_GE(s, kStdFloor);
}

TEST(Istft, RoundTripReconstructsInterior) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto x = white_noise(seed);
        const auto y = reconstruct(stft_epoch(x));
        ASSERT_EQ(y.size(), kEpochSamples);
        EXPECT_LE(interior_relative_error(y, x), 1e-3) << "seed " << seed;
    }
}

TEST(Istft, RoundTripThroughNormalization) {
    const auto x = white_noise(77);
    const std::vector<Spectrogram> train{stft_epoch(white_noise(78))};
    const auto stats = compute_norm_stats(train);
    const auto y = reconstruct(normalize(stft_epoch(x), stats), &stats);
    EXPECT_LE(interior_relative_error(y, x), 1e-3);
}

TEST(Istft, ZeroMagnitudeGivesZeroSignal) {
    const auto spec = stft_epoch(white_noise(5));
    const std::vector<double> zeros(kFrames * kFullBins, 0.0);
    for (double v : istft(zeros, spec.phase)) EXPECT_EQ(v, 0.0);
}

TEST(Istft, FiveHertzSineKeepsDominantFrequency) {
    const auto x = sine(5.0, 30.0, 0.3);
    const auto y = reconstruct(stft_epoch(x));
    EXPECT_EQ(dominant_bin(y), dominant_bin(x));
    EXPECT_EQ(dominant_bin(x), 150u);  // 5 Hz * 3000 / 100
}

TEST(Istft, MissingPhaseIsUsageError) {
    auto spec = stft_epoch(white_noise(2));
    spec.phase.clear();
    EXPECT_THROW(reconstruct(spec), UsageError);
}

TEST(Istft, DcDroppedWhenMagnitudeUnknown) {
    // Feature files do not carry bin-0 magnitude; reconstruction then
    // loses only the per-frame DC content.
    std::vector<double> x = sine(6.0, 25.0);
    auto spec = stft_epoch(x);
    spec.dc_magnitude.clear();
    const auto y = reconstruct(spec);
    EXPECT_LE(interior_relative_error(y, x), 0.05);
}
