// somnus: sleep staging with confidence triage and attention export.
//
// Exit codes: 0 success, 1 invalid configuration or usage, 2 data error,
// 3 internal error.

#include <CLI11.hpp>

#include <cstdlib>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "somnus/pipeline.hpp"

namespace {

using somnus::RunConfig;

// Flag values kept apart from the config so a file can sit between the
// defaults and the command line.
struct Flags {
    std::string config, manifest, features, checkpoint, scored, out, split, recording, epochs, heads;
    std::optional<std::uint64_t> seed;
    std::optional<double> threshold, percentile;
    std::optional<std::size_t> sequence_length, epoch_layers, sequence_layers, max_steps;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config, "JSON config file (flags override it)");
    cmd->add_option("--out", f.out, "Output directory");
    cmd->add_option("--seed", f.seed, "Random seed");
    cmd->add_flag("--quiet", f.quiet, "Suppress progress output");
}

void add_model(CLI::App* cmd, Flags& f) {
    cmd->add_option("--sequence-length", f.sequence_length, "Epochs per sequence (L)");
    cmd->add_option("--epoch-layers", f.epoch_layers, "Epoch-level transformer layers");
    cmd->add_option("--sequence-layers", f.sequence_layers, "Sequence-level transformer layers");
}

void add_triage(CLI::App* cmd, Flags& f) {
    auto* th = cmd->add_option("--threshold", f.threshold, "Defer epochs with confidence below this");
    auto* pc = cmd->add_option("--percentile", f.percentile, "Defer this percentage of least confident epochs");
    th->excludes(pc);
}

void add_selection(CLI::App* cmd, Flags& f) {
    cmd->add_option("--manifest", f.manifest, "Dataset manifest (selects recordings by split)");
    cmd->add_option("--split", f.split, "train, validation, test or all");
    cmd->add_option("--recording", f.recording, "Process a single recording id");
}

std::vector<std::size_t> parse_epoch_list(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t pos = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != item.size()) throw somnus::ConfigError("epochs: '" + item + "' is not an epoch index");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

RunConfig resolve(const Flags& f) {
    RunConfig cfg;
    if (!f.config.empty()) somnus::load_config_file(cfg, f.config);
    if (!f.manifest.empty()) cfg.manifest = f.manifest;
    if (!f.features.empty()) cfg.features = f.features;
    if (!f.checkpoint.empty()) cfg.checkpoint = f.checkpoint;
    if (!f.scored.empty()) cfg.scored = f.scored;
    if (!f.out.empty()) cfg.out = f.out;
    if (!f.split.empty()) cfg.split = f.split;
    if (!f.recording.empty()) cfg.recording = f.recording;
    if (!f.epochs.empty()) cfg.epochs = parse_epoch_list(f.epochs);
    if (f.heads == "sum") cfg.heads = somnus::HeadAggregation::sum;
    if (f.heads == "mean") cfg.heads = somnus::HeadAggregation::mean;
    if (f.seed) cfg.seed = *f.seed;
    if (f.threshold) {
        cfg.triage.mode = somnus::TriageConfig::Mode::threshold;
        cfg.triage.threshold = *f.threshold;
    }
    if (f.percentile) {
        cfg.triage.mode = somnus::TriageConfig::Mode::percentile;
        cfg.triage.percentile = *f.percentile;
    }
    if (f.sequence_length) cfg.model.sequence_length = *f.sequence_length;
    if (f.epoch_layers) cfg.model.epoch_layers = *f.epoch_layers;
    if (f.sequence_layers) cfg.model.sequence_layers = *f.sequence_layers;
    if (f.max_steps) cfg.train.max_steps = *f.max_steps;
    cfg.verbose = !f.quiet;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sleep staging with entropy-based confidence triage and attention export"};
    app.require_subcommand(1);
    Flags f;
    std::function<nlohmann::json(const RunConfig&)> run;
    std::string name;

    auto sub = [&](const char* cmd_name, const char* help, nlohmann::json (*fn)(const RunConfig&)) {
        auto* cmd = app.add_subcommand(cmd_name, help);
        cmd->callback([&, fn, cmd_name] {
            run = fn;
            name = cmd_name;
        });
        add_common(cmd, f);
        return cmd;
    };

    sub("synth", "Generate a synthetic dataset (EDF, hypnogram CSV, manifest)", somnus::cmd_synth);

    auto* extract = sub("extract", "Compute spectrogram features and normalization statistics", somnus::cmd_extract);
    extract->add_option("--manifest", f.manifest, "Dataset manifest")->required();

    auto* train = sub("train", "Train a model on extracted features", somnus::cmd_train);
    train->add_option("--manifest", f.manifest, "Dataset manifest")->required();
    train->add_option("--features", f.features, "Feature directory from extract")->required();
    train->add_option("--max-steps", f.max_steps, "Cap on training steps");
    add_model(train, f);

    auto* score = sub("score", "Score recordings with a trained model", somnus::cmd_score);
    score->add_option("--checkpoint", f.checkpoint, "Model checkpoint")->required();
    score->add_option("--features", f.features, "Feature directory from extract")->required();
    score->add_option("--heads", f.heads, "Head aggregation for heat maps")->check(CLI::IsMember({"sum", "mean"}));
    add_selection(score, f);

    auto* evaluate = sub("evaluate", "Compute metrics from scored recordings", somnus::cmd_evaluate);
    evaluate->add_option("--scored", f.scored, "Scored file or directory")->required();

    auto* triage = sub("triage", "Split epochs into accepted and deferred sets and report", somnus::cmd_triage);
    triage->add_option("--scored", f.scored, "Scored file or directory")->required();
    add_triage(triage, f);

    auto* explain = sub("explain", "Write review bundles with attention-weighted EEG", somnus::cmd_explain);
    explain->add_option("--checkpoint", f.checkpoint, "Model checkpoint")->required();
    explain->add_option("--features", f.features, "Feature directory from extract")->required();
    explain->add_option("--epochs", f.epochs, "Comma-separated epoch indices (default: triaged epochs)");
    explain->add_option("--heads", f.heads, "Head aggregation for heat maps")->check(CLI::IsMember({"sum", "mean"}));
    add_selection(explain, f);
    add_triage(explain, f);

    auto* review = sub("export-review", "Write review bundles for the review UI", somnus::cmd_export_review);
    review->add_option("--scored", f.scored, "Scored file or directory")->required();
    add_triage(review, f);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        const RunConfig cfg = resolve(f);
        const auto summary = run(cfg);
        std::filesystem::create_directories(cfg.out);
        const auto path = cfg.out / (name + "_summary.json");
        somnus::write_json(path, summary);
        if (cfg.verbose) std::cerr << "wrote " << path.generic_string() << std::endl;
        return 0;
    } catch (const somnus::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << std::endl;
        return 1;
    } catch (const somnus::DataError& e) {
        std::cerr << "data error: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << std::endl;
        return 3;
    }
}
