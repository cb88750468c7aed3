#pragma once

// Adam optimisation of the sequence loss with validation-driven early
// stopping, and fusion of overlapping window predictions.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "somnus/data.hpp"
#include "somnus/errors.hpp"
#include "somnus/features.hpp"
#include "somnus/model.hpp"
#include "somnus/parallel.hpp"

namespace somnus {

struct TrainConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-7;
    std::size_t batch_size = 32;
    std::size_t validate_every = 100;       // training steps between validations
    std::size_t patience = 200;             // validations without improvement
    std::size_t min_validation_steps = 0;   // validations before early stopping may trigger
    std::size_t max_steps = 0;              // 0: no cap
    std::size_t micro_batch = 0;            // sequences per forward/backward chunk; 0: whole batch
    double clip_norm = 0.0;                 // global gradient-norm clip; 0: off
    double target_accuracy = 0.0;           // stop once validation accuracy reaches this; 0: off
    std::uint64_t seed = 1;

    void validate() const {
        auto positive = [](double v, const char* field) {
            if (!(v > 0.0)) throw ConfigError(std::string("train.") + field + " must be > 0");
        };
        positive(learning_rate, "learning_rate");
        positive(epsilon, "epsilon");
        positive(static_cast<double>(batch_size), "batch_size");
        positive(static_cast<double>(validate_every), "validate_every");
        positive(static_cast<double>(patience), "patience");
        if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1 must lie in (0, 1)");
        if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2 must lie in (0, 1)");
        if (!(clip_norm >= 0.0)) throw ConfigError("train.clip_norm must be >= 0");
        if (!(target_accuracy >= 0.0 && target_accuracy <= 1.0)) throw ConfigError("train.target_accuracy must lie in [0, 1]");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"learning_rate", c.learning_rate},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"epsilon", c.epsilon},
                       {"batch_size", c.batch_size},
                       {"validate_every", c.validate_every},
                       {"patience", c.patience},
                       {"min_validation_steps", c.min_validation_steps},
                       {"max_steps", c.max_steps},
                       {"micro_batch", c.micro_batch},
                       {"clip_norm", c.clip_norm},
                       {"target_accuracy", c.target_accuracy},
                       {"seed", c.seed}};
}

template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m, v;
    std::size_t t = 0;
};

/// One Adam update with bias correction. Parameters without a gradient
/// buffer are treated as having zero gradient.
template <typename T>
void adam_step(std::span<NamedParameter<T>> params, AdamState<T>& state, const TrainConfig& cfg) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.tensor.numel(), T{});
            state.v.emplace_back(p.tensor.numel(), T{});
        }
    }
    if (state.m.size() != params.size()) throw UsageError("adam_step: optimizer state does not match parameters");
    ++state.t;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = params[k].tensor;
        auto& m = state.m[k];
        auto& v = state.v[k];
        if (m.size() != p.numel()) throw UsageError("adam_step: moment shape mismatch for " + params[k].name);
        auto value = p.data();
        const bool has = p.has_grad();
        const auto g = p.grad();
        for (std::size_t i = 0; i < m.size(); ++i) {
            const double gi = has ? static_cast<double>(g[i]) : 0.0;
            const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
            const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            value[i] = static_cast<T>(static_cast<double>(value[i]) -
                                      cfg.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + cfg.epsilon));
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_gradients(std::span<NamedParameter<T>> params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        if (p.tensor.has_grad())
            for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& p : params)
            if (p.tensor.has_grad())
                for (T& g : p.tensor.mutable_grad()) g = static_cast<T>(static_cast<double>(g) * s);
    }
    return norm;
}

/// Windows of one normalized recording as model inputs.
inline std::vector<EpochSequence> make_sequences(const FeatureRecording& rec, std::size_t length, std::size_t stride,
                                                 WindowMode mode, std::string* warning = nullptr) {
    std::vector<EpochSequence> out;
    for (std::size_t s : window_starts(rec.labels, length, stride, mode, warning)) {
        EpochSequence seq;
        seq.recording_id = rec.id;
        seq.start_epoch = s;
        for (std::size_t i = s; i < s + length; ++i) seq.spectrograms.push_back(&rec.spectrograms[i]);
        seq.labels.assign(rec.labels.begin() + static_cast<std::ptrdiff_t>(s),
                          rec.labels.begin() + static_cast<std::ptrdiff_t>(s + length));
        out.push_back(std::move(seq));
    }
    return out;
}

struct AccuracyCount {
    std::size_t correct = 0, total = 0;
    double accuracy() const {
        return total == 0 ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>(correct) / static_cast<double>(total);
    }
};

/// Index of the largest entry; ties go to the lower index.
inline std::uint8_t argmax_stage(std::span<const double> row) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
        if (row[c] > row[best]) best = c;
    return static_cast<std::uint8_t>(best);
}

/// Per-position accuracy over labelled positions of the given sequences,
/// evaluated with dropout off. Chunks run in parallel on a frozen model.
template <typename T>
AccuracyCount sequence_accuracy(const SleepTransformer<T>& model, std::span<const EpochSequence> sequences,
                                std::size_t chunk = 32) {
    const std::size_t n_chunks = (sequences.size() + chunk - 1) / chunk;
    std::vector<AccuracyCount> partial(n_chunks);
    parallel_for(n_chunks, [&](std::size_t k) {
        NoGradGuard no_grad;
        const auto batch = sequences.subspan(k * chunk, std::min(chunk, sequences.size() - k * chunk));
        const auto out = model.forward(batch, ForwardContext{});
        const std::size_t L = model.config().sequence_length, C = model.config().classes;
        std::vector<double> row(C);
        for (std::size_t b = 0; b < batch.size(); ++b) {
            for (std::size_t i = 0; i < L; ++i) {
                const auto y = batch[b].labels[i];
                if (y >= C) continue;
                for (std::size_t c = 0; c < C; ++c) row[c] = out.prob(b, i, c);
                partial[k].correct += argmax_stage(row) == y ? 1 : 0;
                ++partial[k].total;
            }
        }
    });
    AccuracyCount total;
    for (const auto& p : partial) total.correct += p.correct, total.total += p.total;
    return total;
}

struct TrainLogRow {
    std::size_t step = 0;
    double train_loss = 0.0;    // mean batch loss since the previous row
    double val_accuracy = 0.0;  // NaN without a validation set
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    std::size_t steps = 0;
    std::size_t best_step = 0;
    double best_val_accuracy = std::numeric_limits<double>::quiet_NaN();
    std::string stop_reason;
};

/// Trains in place. On return the model holds the best-validation
/// parameters (or the final ones when there is no validation set).
template <typename T>
TrainResult train(SleepTransformer<T>& model, std::span<const EpochSequence> train_set,
                  std::span<const EpochSequence> val_set, const TrainConfig& cfg,
                  const std::function<void(const TrainLogRow&)>& on_log = {}) {
    cfg.validate();
    if (train_set.empty()) throw ConfigError("training set is empty (no complete training sequences)");
    if (val_set.empty() && cfg.max_steps == 0) {
        throw ConfigError("train.max_steps must be set when there is no validation set");
    }
    auto params = model.parameters();
    AdamState<T> adam;
    std::mt19937_64 shuffle_rng(cfg.seed);
    std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    ForwardContext ctx;
    ctx.train = true;
    ctx.dropout = model.config().dropout;
    ctx.rng = &dropout_rng;

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();

    std::vector<std::vector<T>> best;
    auto snapshot = [&] {
        best.clear();
        for (const auto& p : params) best.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
    };

    TrainResult result;
    double loss_sum = 0.0;
    std::size_t loss_count = 0, validations = 0, stale = 0;
    const std::size_t micro = cfg.micro_batch == 0 ? cfg.batch_size : cfg.micro_batch;

    for (;;) {
        if (cursor >= order.size()) {
            std::shuffle(order.begin(), order.end(), shuffle_rng);
            cursor = 0;
        }
        const std::size_t size = std::min(cfg.batch_size, order.size() - cursor);
        std::vector<EpochSequence> batch;
        for (std::size_t i = 0; i < size; ++i) batch.push_back(train_set[order[cursor + i]]);
        cursor += size;

        std::size_t labelled = 0;
        for (const auto& s : batch)
            for (auto y : s.labels) labelled += y < kClasses ? 1 : 0;
        if (labelled == 0) continue;

        model.zero_grad();
        double batch_loss = 0.0;
        for (std::size_t from = 0; from < batch.size(); from += micro) {
            const std::span<const EpochSequence> part(batch.data() + from, std::min(micro, batch.size() - from));
            std::vector<std::uint8_t> labels;
            std::size_t part_labelled = 0;
            for (const auto& s : part) {
                labels.insert(labels.end(), s.labels.begin(), s.labels.end());
                for (auto y : s.labels) part_labelled += y < kClasses ? 1 : 0;
            }
            if (part_labelled == 0) continue;
            const double weight = static_cast<double>(part_labelled) / static_cast<double>(labelled);
            auto loss = sequence_loss(model.forward(part, ctx).probs, labels);
            batch_loss += weight * static_cast<double>(loss.item());
            scale(loss, static_cast<T>(weight)).backward();
        }
        if (!std::isfinite(batch_loss)) throw NumericError("training loss became non-finite at step " + std::to_string(result.steps + 1));
        if (cfg.clip_norm > 0.0) clip_gradients<T>(params, cfg.clip_norm);
        adam_step<T>(params, adam, cfg);
        ++result.steps;
        loss_sum += batch_loss;
        ++loss_count;

        const bool last = cfg.max_steps != 0 && result.steps >= cfg.max_steps;
        if (result.steps % cfg.validate_every == 0 || last) {
            TrainLogRow row;
            row.step = result.steps;
            row.train_loss = loss_sum / static_cast<double>(loss_count);
            loss_sum = 0.0;
            loss_count = 0;
            row.val_accuracy = val_set.empty() ? std::numeric_limits<double>::quiet_NaN()
                                               : sequence_accuracy(model, val_set, cfg.batch_size).accuracy();
            ++validations;
            result.log.push_back(row);
            if (on_log) on_log(row);
            if (!val_set.empty()) {
                if (best.empty() || row.val_accuracy > result.best_val_accuracy) {
                    result.best_val_accuracy = row.val_accuracy;
                    result.best_step = row.step;
                    snapshot();
                    stale = 0;
                } else {
                    ++stale;
                }
                if (cfg.target_accuracy > 0.0 && row.val_accuracy >= cfg.target_accuracy) {
                    result.stop_reason = "target_accuracy";
                    break;
                }
                if (stale >= cfg.patience && validations >= cfg.min_validation_steps) {
                    result.stop_reason = "early_stopping";
                    break;
                }
            }
        }
        if (last) {
            result.stop_reason = "max_steps";
            break;
        }
    }

    if (!best.empty()) {
        for (std::size_t k = 0; k < params.size(); ++k) std::copy(best[k].begin(), best[k].end(), params[k].tensor.data().begin());
    } else {
        result.best_step = result.steps;
    }
    return result;
}

inline std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline void write_train_log(const std::filesystem::path& path, std::span<const TrainLogRow> rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write training log " + path.string());
    os << "step,train_loss,val_accuracy\n";
    for (const auto& r : rows) os << r.step << ',' << format_number(r.train_loss) << ',' << format_number(r.val_accuracy) << '\n';
}

/// Probabilities of one window, L x C row-major, starting at epoch `start`.
struct WindowOutput {
    std::size_t start = 0;
    std::vector<double> probs;
};

/// Per-epoch mean of all covering windows, renormalized. Returns n x C.
inline std::vector<double> fuse_predictions(std::span<const WindowOutput> windows, std::size_t n_epochs, std::size_t length,
                                            std::size_t classes = kClasses) {
    std::vector<double> sum(n_epochs * classes, 0.0);
    std::vector<std::size_t> count(n_epochs, 0);
    for (const auto& w : windows) {
        if (w.probs.size() != length * classes || w.start + length > n_epochs) {
            throw UsageError("fuse_predictions: window at " + std::to_string(w.start) + " does not fit the recording");
        }
        for (std::size_t i = 0; i < length; ++i) {
            ++count[w.start + i];
            for (std::size_t c = 0; c < classes; ++c) sum[(w.start + i) * classes + c] += w.probs[i * classes + c];
        }
    }
    for (std::size_t e = 0; e < n_epochs; ++e) {
        if (count[e] == 0) throw UsageError("fuse_predictions: epoch " + std::to_string(e) + " is not covered by any window");
        double total = 0.0;
        for (std::size_t c = 0; c < classes; ++c) total += (sum[e * classes + c] /= static_cast<double>(count[e]));
        for (std::size_t c = 0; c < classes; ++c) sum[e * classes + c] /= total;
    }
    return sum;
}

}  // namespace somnus
