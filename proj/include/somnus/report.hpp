#pragma once

// Scored recordings and review bundles (JSON, one file per recording).

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "somnus/errors.hpp"
#include "somnus/interpret.hpp"
#include "somnus/jsonio.hpp"
#include "somnus/predict.hpp"
#include "somnus/stages.hpp"
#include "somnus/uncertainty.hpp"

namespace somnus {

inline constexpr int kScoredSchemaVersion = 1;
inline constexpr int kBundleSchemaVersion = 1;

struct ScoredEpoch {
    std::size_t index = 0;
    std::optional<std::uint8_t> true_stage;  // 0-4, or 255 when excluded
    std::uint8_t predicted_stage = 0;
    std::array<double, 5> probs{};
    double confidence = 0.0;
    bool triaged = false;
    bool transitioning = false;
    std::vector<double> heatmap;             // one weight per frame
    bool heatmap_degenerate = false;
    std::vector<double> influence;           // L weights over the window
    std::size_t window_offset = 0;           // first epoch of that window
    std::vector<double> attended_eeg;        // optional, 3000 samples
    std::vector<double> raw_eeg;             // optional, 3000 samples
};

struct ScoredRecording {
    std::string recording_id;
    std::size_t sequence_length = 0;
    std::vector<ScoredEpoch> epochs;

    bool has_labels() const { return !epochs.empty() && epochs.front().true_stage.has_value(); }

    std::vector<double> confidences() const {
        std::vector<double> c;
        for (const auto& e : epochs) c.push_back(e.confidence);
        return c;
    }
};

/// Builds per-epoch outputs from a prediction made with attention capture.
/// `labels` may be empty when the ground truth is unknown; transitioning
/// flags then come from the predicted hypnogram.
inline ScoredRecording score_recording(const RecordingPrediction& pred, std::span<const std::uint8_t> labels,
                                       HeadAggregation heads = HeadAggregation::sum) {
    const std::size_t n = pred.epochs(), L = pred.length;
    if (!labels.empty() && labels.size() != n) throw UsageError("score_recording: label count mismatch");
    if (pred.epoch_attention.size() != n || pred.window_attention.size() != pred.window_starts.size()) {
        throw UsageError("score_recording needs a prediction with captured attention");
    }
    ScoredRecording out;
    out.recording_id = pred.id;
    out.sequence_length = L;
    const auto transitions = flag_transitioning(labels.empty() ? std::span<const std::uint8_t>(pred.predicted) : labels);
    for (std::size_t e = 0; e < n; ++e) {
        ScoredEpoch s;
        s.index = e;
        if (!labels.empty()) s.true_stage = labels[e];
        s.predicted_stage = pred.predicted[e];
        std::copy_n(pred.row(e).begin(), 5, s.probs.begin());
        s.confidence = confidence(pred.row(e));
        s.transitioning = transitions[e];
        const auto hm = epoch_heatmap(pred.epoch_attention[e], std::nullopt, heads);
        s.heatmap = hm.values;
        s.heatmap_degenerate = hm.degenerate;
        // stride-1 windows start at 0..n-L, so window index == start
        const std::size_t start = centered_window_start(e, n, L);
        const auto rows = row_normalized(pred.window_attention[start]);
        const std::size_t i = e - start;
        s.influence.assign(rows.begin() + static_cast<std::ptrdiff_t>(i * L), rows.begin() + static_cast<std::ptrdiff_t>((i + 1) * L));
        s.window_offset = start;
        out.epochs.push_back(std::move(s));
    }
    return out;
}

inline void apply_triage(ScoredRecording& rec, const TriageConfig& cfg) {
    const auto part = triage(rec.confidences(), cfg);
    for (std::size_t i = 0; i < rec.epochs.size(); ++i) rec.epochs[i].triaged = part.is_deferred[i];
}

inline nlohmann::json stage_code_table() {
    nlohmann::json t = nlohmann::json::object();
    for (std::size_t c = 0; c < kStageNames.size(); ++c) t[std::to_string(c)] = kStageNames[c];
    t["255"] = "excluded";
    return t;
}

/// With a triage config this writes the review-bundle form, which adds the
/// triage flags and the configuration that produced them.
inline nlohmann::json to_json(const ScoredRecording& rec, const TriageConfig* triage_cfg = nullptr) {
    nlohmann::json j;
    j["schema_version"] = triage_cfg ? kBundleSchemaVersion : kScoredSchemaVersion;
    j["kind"] = triage_cfg ? "review_bundle" : "scored";
    j["recording_id"] = rec.recording_id;
    j["sequence_length"] = rec.sequence_length;
    j["stage_codes"] = stage_code_table();
    if (triage_cfg) {
        nlohmann::json t = {{"mode", to_string(triage_cfg->mode)}};
        if (triage_cfg->mode == TriageConfig::Mode::threshold) {
            t["threshold"] = json_number(triage_cfg->threshold);
        } else {
            t["percentile"] = json_number(triage_cfg->percentile);
        }
        std::size_t deferred = 0;
        for (const auto& e : rec.epochs) deferred += e.triaged ? 1 : 0;
        t["triaged_count"] = deferred;
        j["triage"] = t;
    }
    auto epochs = nlohmann::json::array();
    for (const auto& e : rec.epochs) {
        nlohmann::json o;
        o["index"] = e.index;
        if (e.true_stage) o["true_stage"] = *e.true_stage;
        o["predicted_stage"] = e.predicted_stage;
        o["probs"] = json_numbers(std::span<const double>(e.probs));
        o["confidence"] = json_number(e.confidence);
        if (triage_cfg) o["triaged"] = e.triaged;
        o["transitioning"] = e.transitioning;
        o["heatmap"] = json_numbers(e.heatmap);
        o["heatmap_degenerate"] = e.heatmap_degenerate;
        o["influence"] = {{"weights", json_numbers(e.influence)}, {"window_offset", e.window_offset}};
        if (!e.attended_eeg.empty()) o["attended_eeg"] = json_numbers(e.attended_eeg);
        if (!e.raw_eeg.empty()) o["raw_eeg"] = json_numbers(e.raw_eeg);
        epochs.push_back(std::move(o));
    }
    j["epochs"] = std::move(epochs);
    return j;
}

inline ScoredRecording scored_from_json(const nlohmann::json& j) {
    ScoredRecording rec;
    try {
        if (j.at("schema_version").get<int>() != kScoredSchemaVersion) throw DataError("unsupported scored schema version");
        j.at("recording_id").get_to(rec.recording_id);
        j.at("sequence_length").get_to(rec.sequence_length);
        for (const auto& o : j.at("epochs")) {
            ScoredEpoch e;
            o.at("index").get_to(e.index);
            if (o.contains("true_stage")) e.true_stage = o.at("true_stage").get<std::uint8_t>();
            o.at("predicted_stage").get_to(e.predicted_stage);
            const auto probs = o.at("probs").get<std::vector<double>>();
            if (probs.size() != 5) throw DataError("epoch " + std::to_string(e.index) + " does not have 5 probabilities");
            std::copy(probs.begin(), probs.end(), e.probs.begin());
            o.at("confidence").get_to(e.confidence);
            if (o.contains("triaged")) o.at("triaged").get_to(e.triaged);
            o.at("transitioning").get_to(e.transitioning);
            o.at("heatmap").get_to(e.heatmap);
            o.at("heatmap_degenerate").get_to(e.heatmap_degenerate);
            o.at("influence").at("weights").get_to(e.influence);
            o.at("influence").at("window_offset").get_to(e.window_offset);
            if (o.contains("attended_eeg")) o.at("attended_eeg").get_to(e.attended_eeg);
            if (o.contains("raw_eeg")) o.at("raw_eeg").get_to(e.raw_eeg);
            rec.epochs.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed scored recording: ") + e.what());
    }
    return rec;
}

inline ScoredRecording read_scored(const std::filesystem::path& path) {
    try {
        return scored_from_json(read_json(path));
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Reviewer corrections: CSV with header
// epoch_index,original_stage,corrected_stage,note,timestamp
// Stages are codes 0-4. Notes follow RFC 4180 quoting.
// ---------------------------------------------------------------------------

struct Correction {
    std::size_t epoch_index = 0;
    std::uint8_t original_stage = 0;
    std::uint8_t corrected_stage = 0;
    std::string note;
    std::string timestamp;  // ISO 8601

    bool operator==(const Correction&) const = default;
};

inline constexpr const char* kCorrectionsHeader = "epoch_index,original_stage,corrected_stage,note,timestamp";

namespace detail {

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

// Splits CSV text into records of fields, honouring quoted fields.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
                field += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            if (any || !field.empty()) {
                row.push_back(std::move(field));
                rows.push_back(std::move(row));
            }
            row.clear();
            field.clear();
            any = false;
        } else {
            field += c;
            any = true;
        }
    }
    if (quoted) throw DataError("unterminated quoted field");
    if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::size_t parse_index(const std::string& s, const std::string& what) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (s.empty() || used != s.size() || s[0] == '-') throw DataError(what + " '" + s + "' is not a non-negative integer");
    return static_cast<std::size_t>(v);
}

}  // namespace detail

inline void write_corrections_csv(const std::filesystem::path& path, std::span<const Correction> rows) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + path.string());
    os << kCorrectionsHeader << '\n';
    for (const auto& c : rows) {
        os << c.epoch_index << ',' << int(c.original_stage) << ',' << int(c.corrected_stage) << ','
           << detail::csv_field(c.note) << ',' << detail::csv_field(c.timestamp) << '\n';
    }
}

inline std::vector<Correction> read_corrections_csv(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open corrections file " + path.string());
    const std::string text{std::istreambuf_iterator<char>(is), {}};
    try {
        const auto rows = detail::parse_csv(text);
        if (rows.empty() || rows[0] != std::vector<std::string>{"epoch_index", "original_stage", "corrected_stage", "note", "timestamp"}) {
            throw DataError(std::string("header must be ") + kCorrectionsHeader);
        }
        std::vector<Correction> out;
        for (std::size_t r = 1; r < rows.size(); ++r) {
            const auto& f = rows[r];
            const std::string where = "row " + std::to_string(r + 1);
            if (f.size() != 5) throw DataError(where + " has " + std::to_string(f.size()) + " fields, expected 5");
            Correction c;
            c.epoch_index = detail::parse_index(f[0], where + " epoch_index");
            const auto orig = detail::parse_index(f[1], where + " original_stage");
            const auto corr = detail::parse_index(f[2], where + " corrected_stage");
            if (orig > kRem || corr > kRem) throw DataError(where + ": stages must be codes 0-4");
            c.original_stage = static_cast<std::uint8_t>(orig);
            c.corrected_stage = static_cast<std::uint8_t>(corr);
            c.note = f[3];
            c.timestamp = f[4];
            out.push_back(std::move(c));
        }
        return out;
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

/// Merges by epoch index; later rows win. Result is ordered by epoch index.
inline std::vector<Correction> merge_corrections(std::span<const Correction> existing, std::span<const Correction> incoming) {
    std::map<std::size_t, Correction> by_epoch;
    for (const auto& c : existing) by_epoch[c.epoch_index] = c;
    for (const auto& c : incoming) by_epoch[c.epoch_index] = c;
    std::vector<Correction> out;
    for (auto& [_, c] : by_epoch) out.push_back(std::move(c));
    return out;
}

}  // namespace somnus
