#pragma once

// Per-recording feature files and normalization statistics on disk.
//
// Layout (little-endian):
//   "SOMNFEAT" | u32 version | u64 n_epochs | u32 T | u32 F
//   per epoch: T*F f32 log-amplitudes | T*(F+1)*2 f32 (cos, sin) phase | u8 stage

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "somnus/checkpoint.hpp"
#include "somnus/errors.hpp"
#include "somnus/jsonio.hpp"
#include "somnus/signal.hpp"
#include "somnus/stages.hpp"

namespace somnus {

inline constexpr char kFeatureMagic[8] = {'S', 'O', 'M', 'N', 'F', 'E', 'A', 'T'};
inline constexpr std::uint32_t kFeatureVersion = 1;

/// One recording's spectrograms (unnormalized) and mapped stage codes.
struct FeatureRecording {
    std::string id;
    std::vector<Spectrogram> spectrograms;
    std::vector<std::uint8_t> labels;

    std::size_t epochs() const { return spectrograms.size(); }
};

inline void write_features(const std::filesystem::path& path, const FeatureRecording& rec) {
    if (rec.spectrograms.size() != rec.labels.size()) throw UsageError("feature recording label count mismatch");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write feature file " + path.string());
    os.write(kFeatureMagic, sizeof kFeatureMagic);
    io::write_pod(os, kFeatureVersion);
    io::write_pod(os, static_cast<std::uint64_t>(rec.epochs()));
    io::write_pod(os, static_cast<std::uint32_t>(kFrames));
    io::write_pod(os, static_cast<std::uint32_t>(kBins));
    const std::vector<float> no_phase(kFrames * kFullBins * 2, 0.0f);
    for (std::size_t i = 0; i < rec.epochs(); ++i) {
        const auto& s = rec.spectrograms[i];
        if (s.normalized) throw UsageError("feature files store unnormalized spectrograms");
        if (s.values.size() != kFrames * kBins) throw ShapeError("spectrogram is not 29x128");
        const auto& phase = s.has_phase() ? s.phase : no_phase;
        os.write(reinterpret_cast<const char*>(s.values.data()), static_cast<std::streamsize>(s.values.size() * 4));
        os.write(reinterpret_cast<const char*>(phase.data()), static_cast<std::streamsize>(phase.size() * 4));
        io::write_pod(os, rec.labels[i]);
    }
    if (!os) throw DataError("failed writing feature file " + path.string());
}

inline FeatureRecording read_features(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open feature file " + path.string());
    char magic[8];
    if (!is.read(magic, sizeof magic) || !std::equal(magic, magic + 8, kFeatureMagic)) {
        throw DataError(path.string() + ": not a feature file");
    }
    try {
        const auto version = io::read_pod<std::uint32_t>(is, path.string());
        if (version != kFeatureVersion) throw DataError(path.string() + ": unsupported feature version " + std::to_string(version));
        const auto n = io::read_pod<std::uint64_t>(is, path.string());
        const auto t = io::read_pod<std::uint32_t>(is, path.string());
        const auto f = io::read_pod<std::uint32_t>(is, path.string());
        if (t != kFrames || f != kBins) throw DataError(path.string() + ": feature shape is not 29x128");
        FeatureRecording rec;
        rec.id = path.stem().string();
        rec.spectrograms.resize(n);
        rec.labels.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            auto& s = rec.spectrograms[i];
            s.values.resize(kFrames * kBins);
            s.phase.resize(kFrames * kFullBins * 2);
            if (!is.read(reinterpret_cast<char*>(s.values.data()), static_cast<std::streamsize>(s.values.size() * 4)) ||
                !is.read(reinterpret_cast<char*>(s.phase.data()), static_cast<std::streamsize>(s.phase.size() * 4))) {
                throw DataError(path.string() + ": truncated at epoch " + std::to_string(i));
            }
            rec.labels[i] = io::read_pod<std::uint8_t>(is, path.string());
            if (rec.labels[i] >= kStageNames.size() && rec.labels[i] != kExcluded) {
                throw DataError(path.string() + ": invalid stage code at epoch " + std::to_string(i));
            }
        }
        return rec;
    } catch (const DataError&) {
        throw;
    } catch (const std::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

inline void write_norm_stats(const std::filesystem::path& path, const NormStats& stats) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write " + path.string());
    os << nlohmann::json{{"mean", json_numbers(stats.mean)}, {"std", json_numbers(stats.std)}}.dump() << '\n';
}

inline NormStats norm_stats_from_json(const nlohmann::json& j) {
    NormStats s;
    try {
        j.at("mean").get_to(s.mean);
        j.at("std").get_to(s.std);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed normalization statistics: ") + e.what());
    }
    if (s.mean.size() != kBins || s.std.size() != kBins) throw DataError("normalization statistics must have 128 bins");
    return s;
}

inline NormStats read_norm_stats(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open normalization statistics " + path.string());
    try {
        return norm_stats_from_json(nlohmann::json::parse(is));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

}  // namespace somnus
