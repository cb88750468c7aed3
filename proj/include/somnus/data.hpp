#pragma once

// Recordings, label policy, sequence windows and dataset splits.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "somnus/errors.hpp"
#include "somnus/signal.hpp"
#include "somnus/stages.hpp"

namespace somnus {

/// R&K scoring alphabet as found in hypnograms.
enum class RawStage : std::uint8_t { W, N1, N2, N3, N4, REM, Movement, Unknown };

inline RawStage parse_raw_stage(std::string token) {
    for (char& c : token) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (token == "W" || token == "WAKE" || token == "0") return RawStage::W;
    if (token == "N1" || token == "S1" || token == "1") return RawStage::N1;
    if (token == "N2" || token == "S2" || token == "2") return RawStage::N2;
    if (token == "N3" || token == "S3" || token == "3") return RawStage::N3;
    if (token == "N4" || token == "S4" || token == "4") return RawStage::N4;
    if (token == "REM" || token == "R" || token == "5") return RawStage::REM;
    if (token == "MOVEMENT" || token == "MT" || token == "M" || token == "6") return RawStage::Movement;
    if (token == "UNKNOWN" || token == "?" || token == "9") return RawStage::Unknown;
    throw DataError("unknown stage code '" + token + "'");
}

inline const char* raw_stage_token(RawStage s) {
    switch (s) {
        case RawStage::W: return "W";
        case RawStage::N1: return "N1";
        case RawStage::N2: return "N2";
        case RawStage::N3: return "N3";
        case RawStage::N4: return "N4";
        case RawStage::REM: return "REM";
        case RawStage::Movement: return "MOVEMENT";
        case RawStage::Unknown: return "UNKNOWN";
    }
    return "UNKNOWN";
}

/// N4 merges into N3; movement and unknown epochs are excluded (255).
inline std::uint8_t map_stage(RawStage s) {
    switch (s) {
        case RawStage::W: return kWake;
        case RawStage::N1: return kN1;
        case RawStage::N2: return kN2;
        case RawStage::N3:
        case RawStage::N4: return kN3;
        case RawStage::REM: return kRem;
        case RawStage::Movement:
        case RawStage::Unknown: return kExcluded;
    }
    throw DataError("invalid raw stage");
}

inline std::vector<std::uint8_t> map_stages(const std::vector<RawStage>& raw) {
    std::vector<std::uint8_t> out(raw.size());
    std::transform(raw.begin(), raw.end(), out.begin(), map_stage);
    return out;
}

/// Inverse view of a mapped code in the raw alphabet (excluded -> Unknown).
inline RawStage to_raw_stage(std::uint8_t code) {
    switch (code) {
        case kWake: return RawStage::W;
        case kN1: return RawStage::N1;
        case kN2: return RawStage::N2;
        case kN3: return RawStage::N3;
        case kRem: return RawStage::REM;
        case kExcluded: return RawStage::Unknown;
        default: throw DataError("invalid stage code " + std::to_string(code));
    }
}

struct Recording {
    std::string id;
    std::string channel;
    std::vector<double> samples;  // 100 Hz
    std::vector<RawStage> hypnogram;
    std::optional<std::size_t> in_bed_start, in_bed_end;  // epoch indices, inclusive

    std::size_t epochs() const { return hypnogram.size(); }

    RawEpoch epoch(std::size_t i) const {
        RawEpoch e;
        e.samples.assign(samples.begin() + static_cast<std::ptrdiff_t>(i * kEpochSamples),
                         samples.begin() + static_cast<std::ptrdiff_t>((i + 1) * kEpochSamples));
        e.channel = channel;
        e.epoch_index = i;
        return e;
    }

    /// Enforces hypnogram length == floor(samples / 3000): a longer signal
    /// is cut to the scored epochs, a shorter one is an error.
    void reconcile() {
        const std::size_t signal_epochs = samples.size() / kEpochSamples;
        if (signal_epochs < hypnogram.size()) {
            throw DataError("recording " + id + ": hypnogram has " + std::to_string(hypnogram.size()) +
                            " epochs but the signal only " + std::to_string(signal_epochs));
        }
        samples.resize(hypnogram.size() * kEpochSamples);
    }
};

inline constexpr std::size_t kTrimMarginEpochs = 60;  // 30 minutes

/// Keeps [in_bed_start - 60, in_bed_end + 60] clamped to the recording.
/// Without in-bed metadata the recording is returned unchanged and
/// `warning` (when given) is filled.
inline Recording trim_recording(Recording rec, std::string* warning = nullptr) {
    if (!rec.in_bed_start || !rec.in_bed_end || rec.hypnogram.empty()) {
        if (warning) *warning = "recording " + rec.id + " has no in-bed metadata; not trimmed";
        return rec;
    }
    const std::size_t n = rec.hypnogram.size();
    const std::size_t first = *rec.in_bed_start > kTrimMarginEpochs ? *rec.in_bed_start - kTrimMarginEpochs : 0;
    const std::size_t last = std::min(n - 1, *rec.in_bed_end + kTrimMarginEpochs);
    if (first > last) throw DataError("recording " + rec.id + ": in-bed interval lies outside the recording");
    rec.hypnogram = std::vector<RawStage>(rec.hypnogram.begin() + static_cast<std::ptrdiff_t>(first),
                                          rec.hypnogram.begin() + static_cast<std::ptrdiff_t>(last + 1));
    if (!rec.samples.empty()) {
        rec.samples = std::vector<double>(
            rec.samples.begin() + static_cast<std::ptrdiff_t>(first * kEpochSamples),
            rec.samples.begin() + static_cast<std::ptrdiff_t>(std::min(rec.samples.size(), (last + 1) * kEpochSamples)));
    }
    *rec.in_bed_start -= first;
    *rec.in_bed_end = std::min(*rec.in_bed_end, last) - first;
    return rec;
}

enum class WindowMode { training, inference };

/// Start indices of L-epoch windows over a recording of `labels.size()`
/// epochs. A final window aligned to the end is added when the strided
/// windows miss the tail. In training mode windows touching an excluded
/// epoch are dropped. Fewer than L epochs yields no windows (and a warning).
inline std::vector<std::size_t> window_starts(std::span<const std::uint8_t> labels, std::size_t length, std::size_t stride,
                                              WindowMode mode, std::string* warning = nullptr) {
    if (length == 0 || stride == 0) throw ConfigError("sequence length and stride must be >= 1");
    const std::size_t n = labels.size();
    std::vector<std::size_t> starts;
    if (n < length) {
        if (warning) {
            *warning = "recording has " + std::to_string(n) + " epochs, fewer than sequence length " +
                       std::to_string(length);
        }
        return starts;
    }
    for (std::size_t s = 0; s + length <= n; s += stride) starts.push_back(s);
    if (starts.back() + length < n) starts.push_back(n - length);
    if (mode == WindowMode::training) {
        std::erase_if(starts, [&](std::size_t s) {
            return std::any_of(labels.begin() + static_cast<std::ptrdiff_t>(s),
                               labels.begin() + static_cast<std::ptrdiff_t>(s + length),
                               [](std::uint8_t c) { return c == kExcluded; });
        });
    }
    return starts;
}

/// True when every one of the five stages occurs in the mapped hypnogram.
inline bool has_all_stages(std::span<const std::uint8_t> labels) {
    std::array<bool, 5> seen{};
    for (auto c : labels)
        if (c < 5) seen[c] = true;
    return std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
}

/// Drops recordings whose mapped hypnogram lacks any stage.
template <typename Rec, typename LabelsOf>
std::vector<Rec> exclude_incomplete_recordings(std::vector<Rec> dataset, LabelsOf labels_of) {
    std::erase_if(dataset, [&](const Rec& r) { return !has_all_stages(labels_of(r)); });
    return dataset;
}

inline std::vector<Recording> exclude_incomplete_recordings(std::vector<Recording> dataset) {
    return exclude_incomplete_recordings(std::move(dataset),
                                         [](const Recording& r) { return map_stages(r.hypnogram); });
}

// ---------------------------------------------------------------------------
// Hypnogram CSV: header "epoch_index,stage_code", one row per epoch.
// ---------------------------------------------------------------------------

inline std::vector<RawStage> read_hypnogram_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open hypnogram " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw DataError("empty hypnogram " + path.string());
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "epoch_index,stage_code") throw DataError(path.string() + ": expected header 'epoch_index,stage_code'");
    std::vector<RawStage> stages;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw DataError(path.string() + ":" + std::to_string(line_no) + ": missing comma");
        std::size_t index = 0;
        try {
            index = std::stoul(line.substr(0, comma));
        } catch (const std::exception&) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": bad epoch index");
        }
        if (index != stages.size()) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": epoch index " + std::to_string(index) +
                            " out of sequence");
        }
        try {
            stages.push_back(parse_raw_stage(line.substr(comma + 1)));
        } catch (const DataError& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return stages;
}

inline void write_hypnogram_csv(const std::filesystem::path& path, const std::vector<RawStage>& stages) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write hypnogram " + path.string());
    os << "epoch_index,stage_code\n";
    for (std::size_t i = 0; i < stages.size(); ++i) os << i << ',' << raw_stage_token(stages[i]) << '\n';
}

// ---------------------------------------------------------------------------
// Dataset manifest (JSON)
// ---------------------------------------------------------------------------

enum class Split { train, validation, test };

inline const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::validation: return "validation";
        case Split::test: return "test";
    }
    return "test";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "validation") return Split::validation;
    if (s == "test") return Split::test;
    throw ConfigError("unknown split '" + s + "' (expected train, validation or test)");
}

struct ManifestEntry {
    std::string id;
    std::filesystem::path edf;        // resolved against the manifest directory
    std::filesystem::path hypnogram;
    std::string channel;
    Split split = Split::train;
    std::optional<std::size_t> in_bed_start, in_bed_end;
};

struct DatasetProfile {
    bool exclude_incomplete = false;
    bool trim = false;
};

struct Manifest {
    std::filesystem::path base_dir;
    DatasetProfile profile;
    std::vector<ManifestEntry> recordings;

    std::vector<std::string> ids(Split split) const {
        std::vector<std::string> out;
        for (const auto& r : recordings)
            if (r.split == split) out.push_back(r.id);
        return out;
    }
};

/// Split assignment of recording ids; ids must be pairwise disjoint.
struct DatasetSplit {
    std::vector<std::string> train, validation, test;

    void verify_disjoint() const {
        std::set<std::string> seen;
        for (const auto* part : {&train, &validation, &test}) {
            for (const auto& id : *part) {
                if (!seen.insert(id).second) throw DataError("recording '" + id + "' appears in more than one split");
            }
        }
    }
};

inline DatasetSplit split_of(const Manifest& m) {
    DatasetSplit s{m.ids(Split::train), m.ids(Split::validation), m.ids(Split::test)};
    s.verify_disjoint();
    return s;
}

/// Random subject-level split: `test_fraction` of subjects held out, then
/// `validation_count` of the remaining subjects held out for validation.
inline DatasetSplit random_split(std::vector<std::string> ids, double test_fraction, std::size_t validation_count,
                                 std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(ids.size()) + 0.5));
    if (n_test + validation_count > ids.size()) throw ConfigError("split sizes exceed the number of recordings");
    DatasetSplit s;
    s.test.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_test));
    s.validation.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_test),
                        ids.begin() + static_cast<std::ptrdiff_t>(n_test + validation_count));
    s.train.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_test + validation_count), ids.end());
    return s;
}

inline Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open manifest " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed manifest " + path.string() + ": " + e.what());
    }
    Manifest m;
    m.base_dir = path.parent_path();
    auto field = [&](const nlohmann::json& obj, const char* key, const std::string& where) -> const nlohmann::json& {
        if (!obj.contains(key)) throw ConfigError("manifest " + where + "." + key + " is required");
        return obj.at(key);
    };
    try {
        if (j.contains("profile")) {
            const auto& p = j.at("profile");
            for (const auto& [key, value] : p.items()) {
                if (key != "exclude_incomplete" && key != "trim") throw ConfigError("manifest profile." + key + " is not a known key");
            }
            m.profile.exclude_incomplete = p.value("exclude_incomplete", false);
            m.profile.trim = p.value("trim", false);
        }
        const auto& recs = field(j, "recordings", "");
        for (std::size_t i = 0; i < recs.size(); ++i) {
            const auto& r = recs[i];
            const std::string where = "recordings[" + std::to_string(i) + "]";
            ManifestEntry e;
            e.id = field(r, "id", where).get<std::string>();
            e.edf = m.base_dir / field(r, "edf", where).get<std::string>();
            e.hypnogram = m.base_dir / field(r, "hypnogram", where).get<std::string>();
            e.channel = field(r, "channel", where).get<std::string>();
            e.split = parse_split(field(r, "split", where).get<std::string>());
            if (r.contains("in_bed_start")) e.in_bed_start = r.at("in_bed_start").get<std::size_t>();
            if (r.contains("in_bed_end")) e.in_bed_end = r.at("in_bed_end").get<std::size_t>();
            m.recordings.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("manifest " + path.string() + ": " + e.what());
    }
    split_of(m);
    return m;
}

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["profile"] = {{"exclude_incomplete", m.profile.exclude_incomplete}, {"trim", m.profile.trim}};
    j["recordings"] = nlohmann::json::array();
    for (const auto& r : m.recordings) {
        nlohmann::json e = {{"id", r.id},
                            {"edf", std::filesystem::relative(r.edf, m.base_dir).generic_string()},
                            {"hypnogram", std::filesystem::relative(r.hypnogram, m.base_dir).generic_string()},
                            {"channel", r.channel},
                            {"split", to_string(r.split)}};
        if (r.in_bed_start) e["in_bed_start"] = *r.in_bed_start;
        if (r.in_bed_end) e["in_bed_end"] = *r.in_bed_end;
        j["recordings"].push_back(std::move(e));
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write manifest " + path.string());
    os << j.dump(2) << '\n';
}

}  // namespace somnus
