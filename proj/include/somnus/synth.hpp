#pragma once

// Synthetic band-coded EEG with Markov stage dynamics.
//
// Each stage has a characteristic spectral signature built from sums of
// random-phase sinusoids. An epoch that starts a new stage is blended with
// the previous stage's signature and scored by majority: it carries the label
// of whichever stage has the larger weight. Blends near even are ambiguous.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "somnus/data.hpp"
#include "somnus/edf.hpp"
#include "somnus/errors.hpp"

namespace somnus {

struct SynthProfile {
    std::size_t recordings = 60;
    std::size_t epochs = 150;            // per recording, including wake margins
    std::size_t train = 40, validation = 10, test = 10;
    std::size_t sample_rate = 100;       // EDF sample rate; resampled on extraction
    double transition_blend_min = 0.3;   // weight of the new stage in a transition epoch
    double transition_blend_max = 0.7;
    double noise = 4.0;                  // white noise sigma (uV)
    double unknown_rate = 0.005;         // fraction of epochs labelled UNKNOWN/MOVEMENT
    std::string channel = "EEG Fpz-Cz";

    void validate() const {
        if (recordings == 0) throw ConfigError("synth.recordings must be >= 1");
        if (train + validation + test != recordings) {
            throw ConfigError("synth.train + synth.validation + synth.test must equal synth.recordings");
        }
        if (epochs < 30) throw ConfigError("synth.epochs must be >= 30");
        if (sample_rate == 0) throw ConfigError("synth.sample_rate must be >= 1");
        if (!(transition_blend_min >= 0.0 && transition_blend_min <= transition_blend_max && transition_blend_max <= 1.0)) {
            throw ConfigError("synth.transition_blend_min/max must satisfy 0 <= min <= max <= 1");
        }
        if (!(noise >= 0.0)) throw ConfigError("synth.noise must be >= 0");
        if (!(unknown_rate >= 0.0 && unknown_rate < 1.0)) throw ConfigError("synth.unknown_rate must lie in [0, 1)");
    }
};

namespace synth {

// Row = current stage (W, N1, N2, N3, REM); column = next stage.
inline constexpr std::array<std::array<double, 5>, 5> kTransitions = {{
    {0.88, 0.10, 0.00, 0.00, 0.02},
    {0.05, 0.75, 0.17, 0.00, 0.03},
    {0.02, 0.03, 0.87, 0.06, 0.02},
    {0.01, 0.00, 0.09, 0.90, 0.00},
    {0.03, 0.05, 0.03, 0.00, 0.89},
}};

inline void add_band(std::vector<double>& x, double lo, double hi, double rms, std::mt19937_64& rng,
                     std::size_t rate, std::size_t components = 12) {
    std::uniform_real_distribution<double> freq(lo, hi), phase(0.0, 2.0 * std::numbers::pi);
    const double amp = rms * std::sqrt(2.0 / static_cast<double>(components));
    for (std::size_t c = 0; c < components; ++c) {
        const double f = freq(rng), p = phase(rng);
        const double w = 2.0 * std::numbers::pi * f / static_cast<double>(rate);
        for (std::size_t n = 0; n < x.size(); ++n) x[n] += amp * std::sin(w * static_cast<double>(n) + p);
    }
}

/// Hann-windowed burst of a band, e.g. a spindle.
inline void add_burst(std::vector<double>& x, double lo, double hi, double peak, double seconds, std::mt19937_64& rng,
                      std::size_t rate) {
    const auto len = static_cast<std::size_t>(seconds * static_cast<double>(rate));
    if (len >= x.size()) return;
    std::uniform_int_distribution<std::size_t> start_dist(0, x.size() - len);
    const std::size_t start = start_dist(rng);
    std::vector<double> burst(len, 0.0);
    add_band(burst, lo, hi, peak / std::sqrt(2.0), rng, rate, 3);
    for (std::size_t n = 0; n < len; ++n) {
        const double env = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(len - 1));
        x[start + n] += env * burst[n];
    }
}

/// One 30-second epoch of stage `s` at `rate` Hz, before noise.
inline std::vector<double> stage_signal(std::uint8_t s, std::size_t rate, std::mt19937_64& rng) {
    std::vector<double> x(30 * rate, 0.0);
    std::uniform_real_distribution<double> gain_dist(0.85, 1.15);
    const double g = gain_dist(rng);
    switch (s) {
        case kWake:
            add_band(x, 8.0, 12.0, 22.0 * g, rng, rate);
            add_band(x, 16.0, 30.0, 9.0 * g, rng, rate);
            for (int i = 0; i < 3; ++i) add_burst(x, 9.0, 11.0, 40.0 * g, 3.0, rng, rate);
            break;
        case kN1:
            add_band(x, 4.0, 7.0, 20.0 * g, rng, rate);
            add_band(x, 8.0, 12.0, 6.0 * g, rng, rate);
            break;
        case kN2:
            add_band(x, 4.0, 7.0, 16.0 * g, rng, rate);
            for (int i = 0; i < 3; ++i) add_burst(x, 11.0, 16.0, 45.0 * g, 1.2, rng, rate);
            break;
        case kN3:
            add_band(x, 0.5, 2.0, 65.0 * g, rng, rate);
            add_band(x, 4.0, 7.0, 8.0 * g, rng, rate);
            break;
        case kRem:
            add_band(x, 2.0, 6.0, 9.0 * g, rng, rate);
            add_band(x, 15.0, 25.0, 7.0 * g, rng, rate);
            break;
        default: throw UsageError("stage_signal: invalid stage");
    }
    return x;
}

/// Markov hypnogram: wake margins around a sleep period starting in N1.
inline std::vector<std::uint8_t> hypnogram(std::size_t epochs, std::mt19937_64& rng, std::size_t* sleep_onset = nullptr,
                                           std::size_t* sleep_end = nullptr) {
    std::uniform_int_distribution<std::size_t> margin(8, 16);
    const std::size_t lead = margin(rng), tail = margin(rng);
    const std::size_t onset = std::min(lead, epochs / 4), end = epochs - std::min(tail, epochs / 4);
    std::vector<std::uint8_t> h(epochs, kWake);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uint8_t s = kN1;
    for (std::size_t i = onset; i < end; ++i) {
        h[i] = s;
        const double r = u(rng);
        double acc = 0.0;
        for (std::uint8_t next = 0; next < 5; ++next) {
            acc += kTransitions[s][next];
            if (r < acc || next == 4) {
                s = next;
                break;
            }
        }
    }
    if (sleep_onset) *sleep_onset = onset;
    if (sleep_end) *sleep_end = end - 1;
    return h;
}

}  // namespace synth

/// Generates one recording. Samples are at `profile.sample_rate`.
inline Recording synthesize_recording(const SynthProfile& profile, const std::string& id, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::size_t onset = 0, end = 0;
    const auto stages = synth::hypnogram(profile.epochs, rng, &onset, &end);
    const std::size_t rate = profile.sample_rate, per_epoch = 30 * rate;

    Recording rec;
    rec.id = id;
    rec.channel = profile.channel;
    rec.samples.reserve(profile.epochs * per_epoch);
    rec.in_bed_start = onset;
    rec.in_bed_end = end;
    std::uniform_real_distribution<double> blend(profile.transition_blend_min, profile.transition_blend_max);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < stages.size(); ++i) {
        auto x = synth::stage_signal(stages[i], rate, rng);
        std::uint8_t scored = stages[i];
        if (i > 0 && stages[i] != stages[i - 1]) {
            const double w = blend(rng);
            if (w < 0.5) scored = stages[i - 1];
            const auto prev = synth::stage_signal(stages[i - 1], rate, rng);
            for (std::size_t n = 0; n < x.size(); ++n) x[n] = w * x[n] + (1.0 - w) * prev[n];
        }
        for (double& v : x) v += profile.noise * noise(rng);
        rec.samples.insert(rec.samples.end(), x.begin(), x.end());

        RawStage raw = to_raw_stage(scored);
        const bool deep = u(rng) < 0.3;  // drawn unconditionally to keep the stream label-independent
        if (raw == RawStage::N3 && deep) raw = RawStage::N4;  // R&K deep sleep split
        if (u(rng) < profile.unknown_rate) raw = u(rng) < 0.5 ? RawStage::Movement : RawStage::Unknown;
        rec.hypnogram.push_back(raw);
    }
    return rec;
}

/// Writes `profile.recordings` recordings as EDF + hypnogram CSV plus a
/// manifest with a subject-level random split. Returns the manifest.
inline Manifest write_synthetic_dataset(const std::filesystem::path& out_dir, const SynthProfile& profile,
                                        std::uint64_t seed) {
    profile.validate();
    std::filesystem::create_directories(out_dir);
    Manifest m;
    m.base_dir = out_dir;
    m.profile.exclude_incomplete = false;
    m.profile.trim = true;
    std::vector<std::string> ids;
    for (std::size_t r = 0; r < profile.recordings; ++r) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "synth-%03zu", r);
        ids.emplace_back(buf);
    }
    const auto split = random_split(ids, static_cast<double>(profile.test) / static_cast<double>(profile.recordings),
                                    profile.validation, seed ^ 0x5eed5eedULL);
    std::mt19937_64 seeds(seed);
    for (const auto& id : ids) {
        const auto rec = synthesize_recording(profile, id, seeds());
        ManifestEntry e;
        e.id = id;
        e.edf = out_dir / (id + ".edf");
        e.hypnogram = out_dir / (id + ".csv");
        e.channel = profile.channel;
        e.in_bed_start = rec.in_bed_start;
        e.in_bed_end = rec.in_bed_end;
        if (std::find(split.validation.begin(), split.validation.end(), id) != split.validation.end()) {
            e.split = Split::validation;
        } else if (std::find(split.test.begin(), split.test.end(), id) != split.test.end()) {
            e.split = Split::test;
        } else {
            e.split = Split::train;
        }
        double peak = 0.0;
        for (double v : rec.samples) peak = std::max(peak, std::abs(v));
        const double range = std::max(500.0, std::ceil(peak / 100.0) * 100.0);
        edf::write(e.edf, {edf::Signal{rec.channel, static_cast<double>(profile.sample_rate), rec.samples, -range, range}},
                   id);
        write_hypnogram_csv(e.hypnogram, rec.hypnogram);
        m.recordings.push_back(std::move(e));
    }
    write_manifest(out_dir / "manifest.json", m);
    return m;
}

}  // namespace somnus
