#pragma once

// Command implementations behind the `somnus` executable. Each command
// validates its inputs, writes its artifacts under the output directory and
// returns a summary that the caller writes as <command>_summary.json.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "somnus/data.hpp"
#include "somnus/edf.hpp"
#include "somnus/errors.hpp"
#include "somnus/features.hpp"
#include "somnus/interpret.hpp"
#include "somnus/jsonio.hpp"
#include "somnus/metrics.hpp"
#include "somnus/model.hpp"
#include "somnus/parallel.hpp"
#include "somnus/predict.hpp"
#include "somnus/report.hpp"
#include "somnus/synth.hpp"
#include "somnus/train.hpp"
#include "somnus/uncertainty.hpp"

namespace somnus {

namespace fs = std::filesystem;

inline constexpr int kSummarySchemaVersion = 1;

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    TriageConfig triage;
    SynthProfile synth;
    std::uint64_t seed = 1;
    fs::path manifest, features, checkpoint, scored, out = ".";
    std::string split = "test";  // train | validation | test | all
    std::optional<std::string> recording;
    std::vector<std::size_t> epochs;  // explain: explicit epoch indices
    HeadAggregation heads = HeadAggregation::sum;
    bool verbose = true;

    void validate() const {
        model.validate();
        train.validate();
        triage.validate();
        synth.validate();
        if (split != "all") parse_split(split);
    }
};

// ---------------------------------------------------------------------------
// Config file: a JSON document of sections; unknown keys are rejected.
// ---------------------------------------------------------------------------

namespace config_detail {

template <typename V>
V get(const nlohmann::json& j, const std::string& path) {
    try {
        if constexpr (std::is_same_v<V, std::size_t> || std::is_same_v<V, std::uint64_t>) {
            if (!j.is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer");
        } else if constexpr (std::is_same_v<V, double>) {
            if (!j.is_number()) throw ConfigError(path + ": expected a number");
        } else if constexpr (std::is_same_v<V, bool>) {
            if (!j.is_boolean()) throw ConfigError(path + ": expected true or false");
        } else if constexpr (std::is_same_v<V, std::string>) {
            if (!j.is_string()) throw ConfigError(path + ": expected a string");
        }
        return j.get<V>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

using Setter = std::function<void(const nlohmann::json&, const std::string&)>;

inline void apply_section(const nlohmann::json& j, const std::string& section, const std::map<std::string, Setter>& fields) {
    if (!j.is_object()) throw ConfigError(section + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        const std::string path = section.empty() ? key : section + "." + key;
        const auto it = fields.find(key);
        if (it == fields.end()) throw ConfigError(path + ": unknown configuration key");
        it->second(value, path);
    }
}

template <typename V>
Setter into(V& target) {
    return [&target](const nlohmann::json& j, const std::string& path) { target = get<V>(j, path); };
}

}  // namespace config_detail

/// Overlays a JSON config document on `cfg`. Field paths in errors are
/// dotted, e.g. "model.ff_width".
inline void apply_config_json(RunConfig& cfg, const nlohmann::json& doc) {
    using namespace config_detail;
    auto& m = cfg.model;
    auto& t = cfg.train;
    auto& s = cfg.synth;
    const std::map<std::string, Setter> model_fields = {
        {"sequence_length", into(m.sequence_length)}, {"epoch_layers", into(m.epoch_layers)},
        {"sequence_layers", into(m.sequence_layers)}, {"heads", into(m.heads)},
        {"ff_width", into(m.ff_width)},               {"fc_width", into(m.fc_width)},
        {"attention_size", into(m.attention_size)},   {"dropout", into(m.dropout)},
        {"scale_per_head", into(m.scale_per_head)},
    };
    const std::map<std::string, Setter> train_fields = {
        {"learning_rate", into(t.learning_rate)},
        {"beta1", into(t.beta1)},
        {"beta2", into(t.beta2)},
        {"epsilon", into(t.epsilon)},
        {"batch_size", into(t.batch_size)},
        {"validate_every", into(t.validate_every)},
        {"patience", into(t.patience)},
        {"min_validation_steps", into(t.min_validation_steps)},
        {"max_steps", into(t.max_steps)},
        {"micro_batch", into(t.micro_batch)},
        {"clip_norm", into(t.clip_norm)},
        {"target_accuracy", into(t.target_accuracy)},
    };
    const std::map<std::string, Setter> triage_fields = {
        {"mode",
         [&](const nlohmann::json& j, const std::string& path) {
             const auto v = get<std::string>(j, path);
             if (v == "threshold") {
                 cfg.triage.mode = TriageConfig::Mode::threshold;
             } else if (v == "percentile") {
                 cfg.triage.mode = TriageConfig::Mode::percentile;
             } else {
                 throw ConfigError(path + ": expected \"threshold\" or \"percentile\"");
             }
         }},
        {"threshold", into(cfg.triage.threshold)},
        {"percentile", into(cfg.triage.percentile)},
    };
    const std::map<std::string, Setter> synth_fields = {
        {"recordings", into(s.recordings)},
        {"epochs", into(s.epochs)},
        {"train", into(s.train)},
        {"validation", into(s.validation)},
        {"test", into(s.test)},
        {"sample_rate", into(s.sample_rate)},
        {"transition_blend_min", into(s.transition_blend_min)},
        {"transition_blend_max", into(s.transition_blend_max)},
        {"noise", into(s.noise)},
        {"unknown_rate", into(s.unknown_rate)},
        {"channel", into(s.channel)},
    };
    auto path_field = [](fs::path& target) {
        return [&target](const nlohmann::json& j, const std::string& path) { target = get<std::string>(j, path); };
    };
    const std::map<std::string, Setter> top = {
        {"seed", into(cfg.seed)},
        {"manifest", path_field(cfg.manifest)},
        {"features", path_field(cfg.features)},
        {"checkpoint", path_field(cfg.checkpoint)},
        {"scored", path_field(cfg.scored)},
        {"out", path_field(cfg.out)},
        {"split", into(cfg.split)},
        {"heads",
         [&](const nlohmann::json& j, const std::string& path) {
             const auto v = get<std::string>(j, path);
             if (v != "sum" && v != "mean") throw ConfigError(path + ": expected \"sum\" or \"mean\"");
             cfg.heads = v == "sum" ? HeadAggregation::sum : HeadAggregation::mean;
         }},
        {"model", [&](const nlohmann::json& j, const std::string& path) { apply_section(j, path, model_fields); }},
        {"train", [&](const nlohmann::json& j, const std::string& path) { apply_section(j, path, train_fields); }},
        {"triage", [&](const nlohmann::json& j, const std::string& path) { apply_section(j, path, triage_fields); }},
        {"synth", [&](const nlohmann::json& j, const std::string& path) { apply_section(j, path, synth_fields); }},
    };
    apply_section(doc, "", top);
}

inline void load_config_file(RunConfig& cfg, const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(is, nullptr, true, true);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    apply_config_json(cfg, doc);
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

inline nlohmann::json summary_header(const std::string& command) {
    return {{"schema_version", kSummarySchemaVersion}, {"command", command}, {"status", "ok"}};
}

inline void progress(const RunConfig& cfg, const std::string& line) {
    if (cfg.verbose) std::cerr << line << std::endl;
}

inline fs::path feature_path(const fs::path& dir, const std::string& id) { return dir / (id + ".feat"); }

/// Recording ids to process: manifest entries of the requested split, or
/// every feature file in the features directory when no manifest is given.
inline std::vector<std::string> select_recordings(const RunConfig& cfg) {
    std::vector<std::string> ids;
    if (cfg.recording) return {*cfg.recording};
    if (!cfg.manifest.empty()) {
        const auto m = read_manifest(cfg.manifest);
        for (const auto& r : m.recordings)
            if (cfg.split == "all" || parse_split(cfg.split) == r.split) ids.push_back(r.id);
        return ids;
    }
    if (!fs::is_directory(cfg.features)) throw DataError("features directory " + cfg.features.string() + " does not exist");
    for (const auto& entry : fs::directory_iterator(cfg.features))
        if (entry.path().extension() == ".feat") ids.push_back(entry.path().stem().string());
    std::sort(ids.begin(), ids.end());
    return ids;
}

inline FeatureRecording normalized_copy(const FeatureRecording& rec, const NormStats& stats, bool keep_phase) {
    FeatureRecording out;
    out.id = rec.id;
    out.labels = rec.labels;
    out.spectrograms.reserve(rec.epochs());
    for (const auto& s : rec.spectrograms) {
        Spectrogram n;
        n.values = s.values;
        if (keep_phase) n.phase = s.phase;
        out.spectrograms.push_back(normalize(std::move(n), stats));
    }
    return out;
}

inline void require_path(const fs::path& p, const char* name) {
    if (p.empty()) throw ConfigError(std::string(name) + " is required");
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

inline nlohmann::json cmd_synth(const RunConfig& cfg) {
    cfg.synth.validate();
    const auto m = write_synthetic_dataset(cfg.out, cfg.synth, cfg.seed);
    auto s = summary_header("synth");
    s["manifest"] = (cfg.out / "manifest.json").generic_string();
    s["recordings"] = m.recordings.size();
    s["epochs_per_recording"] = cfg.synth.epochs;
    s["splits"] = {{"train", m.ids(Split::train).size()},
                   {"validation", m.ids(Split::validation).size()},
                   {"test", m.ids(Split::test).size()}};
    s["seed"] = cfg.seed;
    return s;
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

struct ExtractOutcome {
    std::string status = "ok";  // ok | failed | excluded_incomplete
    std::string error;
    std::vector<std::string> warnings;
    std::size_t epochs = 0, excluded_epochs = 0;
};

inline FeatureRecording extract_recording(const ManifestEntry& entry, const DatasetProfile& profile,
                                          std::vector<std::string>& warnings) {
    if (!fs::exists(entry.edf)) throw DataError("missing EDF file " + entry.edf.string());
    if (!fs::exists(entry.hypnogram)) throw DataError("missing hypnogram " + entry.hypnogram.string());
    Recording rec;
    rec.id = entry.id;
    rec.channel = entry.channel;
    rec.samples = read_channel_100hz(entry.edf, entry.channel);
    rec.hypnogram = read_hypnogram_csv(entry.hypnogram);
    rec.in_bed_start = entry.in_bed_start;
    rec.in_bed_end = entry.in_bed_end;
    rec.reconcile();
    if (profile.trim) {
        std::string warning;
        rec = trim_recording(std::move(rec), &warning);
        if (!warning.empty()) warnings.push_back(warning);
    }
    FeatureRecording out;
    out.id = rec.id;
    out.labels = map_stages(rec.hypnogram);
    out.spectrograms.resize(rec.epochs());
    for (std::size_t i = 0; i < rec.epochs(); ++i) {
        out.spectrograms[i] = stft_epoch(std::span<const double>(rec.samples).subspan(i * kEpochSamples, kEpochSamples));
        out.spectrograms[i].dc_magnitude.clear();  // not part of the file format
    }
    return out;
}

/// Normalization statistics from the labelled epochs of the given feature
/// files.
inline NormStats norm_stats_from_files(const std::vector<fs::path>& files) {
    std::vector<Spectrogram> specs;
    for (const auto& f : files) {
        auto rec = read_features(f);
        for (std::size_t i = 0; i < rec.epochs(); ++i) {
            if (rec.labels[i] == kExcluded) continue;
            Spectrogram s;
            s.values = std::move(rec.spectrograms[i].values);
            specs.push_back(std::move(s));
        }
    }
    return compute_norm_stats(specs);
}

inline nlohmann::json cmd_extract(const RunConfig& cfg) {
    require_path(cfg.manifest, "manifest");
    const auto m = read_manifest(cfg.manifest);
    fs::create_directories(cfg.out);
    std::vector<ExtractOutcome> outcomes(m.recordings.size());
    parallel_for(m.recordings.size(), [&](std::size_t k) {
        const auto& entry = m.recordings[k];
        auto& o = outcomes[k];
        try {
            const auto rec = extract_recording(entry, m.profile, o.warnings);
            o.epochs = rec.epochs();
            o.excluded_epochs = static_cast<std::size_t>(std::count(rec.labels.begin(), rec.labels.end(), kExcluded));
            if (m.profile.exclude_incomplete && !has_all_stages(rec.labels)) {
                o.status = "excluded_incomplete";
                return;
            }
            write_features(feature_path(cfg.out, entry.id), rec);
        } catch (const DataError& e) {
            o.status = "failed";
            o.error = e.what();
        }
    });

    auto s = summary_header("extract");
    auto recs = nlohmann::json::array();
    std::vector<fs::path> train_files;
    std::size_t ok = 0, failed = 0, excluded = 0;
    for (std::size_t k = 0; k < m.recordings.size(); ++k) {
        const auto& entry = m.recordings[k];
        const auto& o = outcomes[k];
        nlohmann::json r = {{"id", entry.id}, {"split", to_string(entry.split)}, {"status", o.status},
                            {"epochs", o.epochs}, {"excluded_epochs", o.excluded_epochs}, {"warnings", o.warnings}};
        if (!o.error.empty()) r["error"] = o.error;
        for (const auto& w : o.warnings) progress(cfg, "warning: " + w);
        if (o.status == "failed") progress(cfg, "error: " + entry.id + ": " + o.error);
        if (o.status == "ok") {
            ++ok;
            r["features"] = feature_path(cfg.out, entry.id).generic_string();
            if (entry.split == Split::train) train_files.push_back(feature_path(cfg.out, entry.id));
        }
        failed += o.status == "failed" ? 1 : 0;
        excluded += o.status == "excluded_incomplete" ? 1 : 0;
        recs.push_back(std::move(r));
    }
    if (ok == 0) throw DataError("no recording could be extracted from " + cfg.manifest.string());
    if (train_files.empty()) throw DataError("no training recording was extracted; normalization needs training data");
    write_norm_stats(cfg.out / "norm_stats.json", norm_stats_from_files(train_files));
    s["recordings"] = std::move(recs);
    s["extracted"] = ok;
    s["failed"] = failed;
    s["excluded_incomplete"] = excluded;
    s["norm_stats"] = (cfg.out / "norm_stats.json").generic_string();
    s["norm_stats_recordings"] = train_files.size();
    if (failed > 0) s["status"] = "partial";
    return s;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline std::vector<FeatureRecording> load_normalized(const fs::path& dir, const std::vector<std::string>& ids,
                                                     const NormStats& stats, bool keep_phase) {
    std::vector<FeatureRecording> out(ids.size());
    parallel_for(ids.size(), [&](std::size_t k) {
        out[k] = normalized_copy(read_features(feature_path(dir, ids[k])), stats, keep_phase);
    });
    return out;
}

inline nlohmann::json cmd_train(const RunConfig& cfg) {
    require_path(cfg.manifest, "manifest");
    require_path(cfg.features, "features");
    cfg.validate();
    const auto m = read_manifest(cfg.manifest);
    const auto split = split_of(m);
    const auto stats = read_norm_stats(cfg.features / "norm_stats.json");
    auto available = [&](std::vector<std::string> ids) {
        std::erase_if(ids, [&](const std::string& id) { return !fs::exists(feature_path(cfg.features, id)); });
        return ids;
    };
    const auto train_ids = available(split.train), val_ids = available(split.validation);
    const auto train_recs = load_normalized(cfg.features, train_ids, stats, false);
    const auto val_recs = load_normalized(cfg.features, val_ids, stats, false);
    const std::size_t L = cfg.model.sequence_length;
    std::vector<EpochSequence> train_seqs, val_seqs;
    for (const auto& r : train_recs) {
        std::string warning;
        auto seqs = make_sequences(r, L, L, WindowMode::training, &warning);
        if (!warning.empty()) progress(cfg, "warning: " + r.id + ": " + warning);
        train_seqs.insert(train_seqs.end(), seqs.begin(), seqs.end());
    }
    for (const auto& r : val_recs) {
        auto seqs = make_sequences(r, L, L, WindowMode::inference);
        val_seqs.insert(val_seqs.end(), seqs.begin(), seqs.end());
    }

    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    SleepTransformer<float> model(cfg.model, cfg.seed);
    progress(cfg, "training " + std::to_string(model.parameter_count()) + " parameters on " +
                      std::to_string(train_seqs.size()) + " sequences (" + std::to_string(val_seqs.size()) +
                      " validation)");
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = train(model, train_seqs, val_seqs, tc, [&](const TrainLogRow& row) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        progress(cfg, "step " + std::to_string(row.step) + " loss " + format_number(row.train_loss) + " val_acc " +
                          format_number(row.val_accuracy) + " (" + format_number(std::round(secs)) + " s)");
    });

    fs::create_directories(cfg.out);
    const auto ckpt = cfg.out / "model.ckpt";
    nlohmann::json extra = {{"norm_stats", {{"mean", json_numbers(stats.mean)}, {"std", json_numbers(stats.std)}}},
                            {"train", tc},
                            {"seed", cfg.seed}};
    save_model(model, ckpt, extra);
    write_train_log(cfg.out / "train_log.csv", result.log);

    auto s = summary_header("train");
    s["checkpoint"] = ckpt.generic_string();
    s["log"] = (cfg.out / "train_log.csv").generic_string();
    s["steps"] = result.steps;
    s["best_step"] = result.best_step;
    s["best_val_accuracy"] = json_number_or_null(result.best_val_accuracy);
    s["stop_reason"] = result.stop_reason;
    s["parameters"] = model.parameter_count();
    s["train_sequences"] = train_seqs.size();
    s["validation_sequences"] = val_seqs.size();
    s["train_recordings"] = train_ids.size();
    s["validation_recordings"] = val_ids.size();
    s["model"] = cfg.model;
    return s;
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

inline SleepTransformer<float> load_scoring_model(const RunConfig& cfg, NormStats& stats) {
    require_path(cfg.checkpoint, "checkpoint");
    if (!fs::exists(cfg.checkpoint)) throw DataError("missing checkpoint " + cfg.checkpoint.string());
    nlohmann::json side;
    auto model = load_model<float>(cfg.checkpoint, &side);
    if (!side.contains("norm_stats")) throw DataError("checkpoint sidecar has no normalization statistics");
    stats = norm_stats_from_json(side.at("norm_stats"));
    return model;
}

inline nlohmann::json cmd_score(const RunConfig& cfg) {
    require_path(cfg.features, "features");
    NormStats stats;
    const auto model = load_scoring_model(cfg, stats);
    fs::create_directories(cfg.out);
    auto s = summary_header("score");
    auto recs = nlohmann::json::array();
    std::size_t scored = 0, skipped = 0;
    for (const auto& id : select_recordings(cfg)) {
        nlohmann::json r = {{"id", id}};
        const auto path = feature_path(cfg.features, id);
        if (!fs::exists(path)) {
            r["status"] = "skipped";
            r["reason"] = "no feature file";
            ++skipped;
            recs.push_back(r);
            continue;
        }
        const auto rec = normalized_copy(read_features(path), stats, false);
        if (rec.epochs() < model.config().sequence_length) {
            r["status"] = "skipped";
            r["reason"] = "fewer epochs than the sequence length";
            progress(cfg, "warning: " + id + " is shorter than the sequence length; not scored");
            ++skipped;
            recs.push_back(r);
            continue;
        }
        const auto pred = predict_recording(model, rec, true);
        const auto out = score_recording(pred, rec.labels, cfg.heads);
        const auto file = cfg.out / (id + ".scored.json");
        write_json(file, to_json(out), -1);
        r["status"] = "ok";
        r["epochs"] = out.epochs.size();
        r["scored"] = file.generic_string();
        ++scored;
        recs.push_back(r);
        progress(cfg, "scored " + id);
    }
    if (scored == 0) throw DataError("no recording was scored");
    s["recordings"] = std::move(recs);
    s["scored"] = scored;
    s["skipped"] = skipped;
    s["checkpoint"] = cfg.checkpoint.generic_string();
    return s;
}

// ---------------------------------------------------------------------------
// evaluate / triage / export-review
// ---------------------------------------------------------------------------

inline std::vector<fs::path> scored_files(const RunConfig& cfg) {
    require_path(cfg.scored, "scored");
    if (fs::is_regular_file(cfg.scored)) return {cfg.scored};
    if (!fs::is_directory(cfg.scored)) throw DataError("scored input " + cfg.scored.string() + " does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(cfg.scored)) {
        const auto name = e.path().filename().string();
        if (name.size() > 12 && name.ends_with(".scored.json")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("no *.scored.json files in " + cfg.scored.string());
    return files;
}

inline nlohmann::json cmd_evaluate(const RunConfig& cfg) {
    ConfusionMatrix total{};
    auto per_recording = nlohmann::json::array();
    for (const auto& f : scored_files(cfg)) {
        const auto rec = read_scored(f);
        if (!rec.has_labels()) throw DataError(f.string() + " carries no true stages to evaluate against");
        std::vector<std::uint8_t> pred, truth;
        for (const auto& e : rec.epochs) {
            pred.push_back(e.predicted_stage);
            truth.push_back(*e.true_stage);
        }
        const auto r = evaluate(pred, truth);
        for (std::size_t a = 0; a < 5; ++a)
            for (std::size_t b = 0; b < 5; ++b) total[a][b] += r.confusion[a][b];
        auto j = to_json(r);
        j["recording_id"] = rec.recording_id;
        per_recording.push_back(std::move(j));
    }
    const auto overall = evaluate_confusion(total);
    fs::create_directories(cfg.out);
    nlohmann::json report = {{"schema_version", kSummarySchemaVersion}, {"overall", to_json(overall)}, {"recordings", per_recording}};
    write_json(cfg.out / "eval_report.json", report);
    auto s = summary_header("evaluate");
    s["report"] = (cfg.out / "eval_report.json").generic_string();
    s["recordings"] = per_recording.size();
    s["epochs"] = overall.epochs;
    s["accuracy"] = json_number(overall.accuracy);
    s["kappa"] = json_number(overall.kappa);
    s["macro_f1"] = json_number(overall.macro_f1);
    s["mean_sensitivity"] = json_number(overall.mean_sensitivity);
    s["mean_specificity"] = json_number(overall.mean_specificity);
    return s;
}

/// Counts for one side of a triage partition.
struct TriageGroup {
    std::size_t size = 0, labelled = 0, correct = 0, transitioning = 0;

    nlohmann::json to_json() const {
        return {{"size", size},
                {"labelled", labelled},
                {"accuracy", json_number_or_null(labelled ? static_cast<double>(correct) / static_cast<double>(labelled)
                                                          : std::numeric_limits<double>::quiet_NaN())},
                {"misclassified_percent",
                 json_number_or_null(labelled ? 100.0 * static_cast<double>(labelled - correct) / static_cast<double>(labelled)
                                              : std::numeric_limits<double>::quiet_NaN())},
                {"transitioning_rate", json_number_or_null(size ? static_cast<double>(transitioning) / static_cast<double>(size)
                                                                : std::numeric_limits<double>::quiet_NaN())}};
    }

    void add(const ScoredEpoch& e) {
        ++size;
        transitioning += e.transitioning ? 1 : 0;
        if (e.true_stage && *e.true_stage != kExcluded) {
            ++labelled;
            correct += e.predicted_stage == *e.true_stage ? 1 : 0;
        }
    }

    void merge(const TriageGroup& o) {
        size += o.size, labelled += o.labelled, correct += o.correct, transitioning += o.transitioning;
    }
};

struct TriageTotals {
    TriageGroup accepted, deferred;
};

inline TriageTotals triage_groups(const ScoredRecording& rec, const TriageConfig& tc) {
    const auto part = triage(rec.confidences(), tc);
    TriageTotals t;
    for (std::size_t i = 0; i < rec.epochs.size(); ++i) (part.is_deferred[i] ? t.deferred : t.accepted).add(rec.epochs[i]);
    return t;
}

inline nlohmann::json cmd_triage(const RunConfig& cfg) {
    cfg.triage.validate();
    std::vector<ScoredRecording> recs;
    for (const auto& f : scored_files(cfg)) recs.push_back(read_scored(f));

    TriageTotals overall;
    auto nights = nlohmann::json::array();
    for (const auto& rec : recs) {
        const auto t = triage_groups(rec, cfg.triage);
        overall.accepted.merge(t.accepted);
        overall.deferred.merge(t.deferred);
        std::size_t above = 0;
        for (const auto& e : rec.epochs) above += e.confidence >= cfg.triage.threshold ? 1 : 0;
        nights.push_back({{"recording_id", rec.recording_id},
                          {"epochs", rec.epochs.size()},
                          {"accepted", t.accepted.to_json()},
                          {"deferred", t.deferred.to_json()},
                          {"above_threshold_percent",
                           json_number(rec.epochs.empty() ? 0.0 : 100.0 * static_cast<double>(above) / static_cast<double>(rec.epochs.size()))}});
    }
    auto sweep = nlohmann::json::array();
    for (double th : {0.4, 0.5, 0.6}) {
        TriageConfig tc;
        tc.threshold = th;
        TriageTotals tot;
        for (const auto& rec : recs) {
            const auto t = triage_groups(rec, tc);
            tot.accepted.merge(t.accepted);
            tot.deferred.merge(t.deferred);
        }
        sweep.push_back({{"threshold", th}, {"accepted", tot.accepted.to_json()}, {"deferred", tot.deferred.to_json()}});
    }
    nlohmann::json cfg_json = {{"mode", to_string(cfg.triage.mode)}};
    if (cfg.triage.mode == TriageConfig::Mode::threshold) {
        cfg_json["threshold"] = json_number(cfg.triage.threshold);
    } else {
        cfg_json["percentile"] = json_number(cfg.triage.percentile);
    }
    nlohmann::json report = {{"schema_version", kSummarySchemaVersion},
                             {"triage", cfg_json},
                             {"accepted", overall.accepted.to_json()},
                             {"deferred", overall.deferred.to_json()},
                             {"recordings", nights},
                             {"threshold_sweep", sweep}};
    fs::create_directories(cfg.out);
    write_json(cfg.out / "triage_report.json", report);
    auto s = summary_header("triage");
    s["report"] = (cfg.out / "triage_report.json").generic_string();
    s["triage"] = cfg_json;
    s["accepted"] = overall.accepted.size;
    s["deferred"] = overall.deferred.size;
    s["epochs"] = overall.accepted.size + overall.deferred.size;
    return s;
}

inline nlohmann::json cmd_export_review(const RunConfig& cfg) {
    cfg.triage.validate();
    fs::create_directories(cfg.out);
    auto bundles = nlohmann::json::array();
    for (const auto& f : scored_files(cfg)) {
        auto rec = read_scored(f);
        apply_triage(rec, cfg.triage);
        const auto out = cfg.out / (rec.recording_id + ".review.json");
        write_json(out, to_json(rec, &cfg.triage), -1);
        std::size_t triaged = 0;
        for (const auto& e : rec.epochs) triaged += e.triaged ? 1 : 0;
        bundles.push_back({{"recording_id", rec.recording_id}, {"bundle", out.generic_string()},
                           {"epochs", rec.epochs.size()}, {"triaged", triaged}});
    }
    auto s = summary_header("export-review");
    s["bundles"] = std::move(bundles);
    return s;
}

// ---------------------------------------------------------------------------
// explain
// ---------------------------------------------------------------------------

inline nlohmann::json cmd_explain(const RunConfig& cfg) {
    require_path(cfg.features, "features");
    NormStats stats;
    const auto model = load_scoring_model(cfg, stats);
    fs::create_directories(cfg.out);
    auto bundles = nlohmann::json::array();
    for (const auto& id : select_recordings(cfg)) {
        const auto path = feature_path(cfg.features, id);
        if (!fs::exists(path)) {
            if (cfg.recording) throw DataError("missing feature file " + path.string());
            continue;
        }
        const auto raw = read_features(path);
        if (raw.epochs() < model.config().sequence_length) continue;
        const auto rec = normalized_copy(raw, stats, false);
        const auto pred = predict_recording(model, rec, true);
        auto scored = score_recording(pred, rec.labels, cfg.heads);
        apply_triage(scored, cfg.triage);

        std::vector<std::size_t> chosen = cfg.epochs;
        if (chosen.empty()) {
            for (const auto& e : scored.epochs)
                if (e.triaged) chosen.push_back(e.index);
        }
        for (std::size_t e : chosen) {
            if (e >= scored.epochs.size()) {
                throw ConfigError("epochs: index " + std::to_string(e) + " is outside recording " + id + " (" +
                                  std::to_string(scored.epochs.size()) + " epochs)");
            }
            scored.epochs[e].attended_eeg = attended_eeg(raw.spectrograms[e], pred.epoch_attention[e]);
            scored.epochs[e].raw_eeg = reconstruct(raw.spectrograms[e]);
        }
        const auto out = cfg.out / (id + ".review.json");
        write_json(out, to_json(scored, &cfg.triage), -1);
        bundles.push_back({{"recording_id", id}, {"bundle", out.generic_string()}, {"explained_epochs", chosen.size()}});
        progress(cfg, "explained " + id + " (" + std::to_string(chosen.size()) + " epochs)");
    }
    if (bundles.empty()) throw DataError("no recording was explained");
    auto s = summary_header("explain");
    s["bundles"] = std::move(bundles);
    return s;
}

}  // namespace somnus
