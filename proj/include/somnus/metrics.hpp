#pragma once

// Staging metrics: accuracy, Cohen's kappa, macro F1 and one-vs-rest
// sensitivity / specificity averaged over the five stages.
//
// Every ratio is formed from exact integer counts and divided once, so
// results do not depend on summation order.

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "somnus/errors.hpp"
#include "somnus/jsonio.hpp"
#include "somnus/stages.hpp"

namespace somnus {

using ConfusionMatrix = std::array<std::array<std::uint64_t, 5>, 5>;  // [true][predicted]

struct EvalReport {
    double accuracy = 0.0;
    double kappa = 0.0;
    double macro_f1 = 0.0;
    double mean_sensitivity = 0.0;
    double mean_specificity = 0.0;
    std::array<double, 5> per_class_f1{};
    std::array<double, 5> per_class_sensitivity{};
    std::array<double, 5> per_class_specificity{};
    ConfusionMatrix confusion{};
    std::uint64_t epochs = 0;
};

inline double ratio(std::uint64_t num, std::uint64_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

inline EvalReport evaluate_confusion(const ConfusionMatrix& cm) {
    EvalReport r;
    r.confusion = cm;
    std::array<std::uint64_t, 5> row{}, col{};
    std::uint64_t total = 0, correct = 0;
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t p = 0; p < 5; ++p) {
            row[t] += cm[t][p];
            col[p] += cm[t][p];
            total += cm[t][p];
            if (t == p) correct += cm[t][p];
        }
    if (total == 0) throw DataError("evaluate: no labelled epochs");
    r.epochs = total;
    r.accuracy = ratio(correct, total);

    // kappa = (p_o - p_e) / (1 - p_e) = (N*correct - S) / (N^2 - S), S = sum_c row_c * col_c
    std::uint64_t s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += row[c] * col[c];
    const std::uint64_t n2 = total * total;
    r.kappa = n2 == s ? 1.0
                      : (static_cast<double>(static_cast<std::int64_t>(total * correct) - static_cast<std::int64_t>(s)) /
                         static_cast<double>(n2 - s));

    double f1_sum = 0.0, sens_sum = 0.0, spec_sum = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
        const std::uint64_t tp = cm[c][c], fn = row[c] - tp, fp = col[c] - tp, tn = total - tp - fn - fp;
        r.per_class_f1[c] = ratio(2 * tp, 2 * tp + fp + fn);
        r.per_class_sensitivity[c] = ratio(tp, tp + fn);
        r.per_class_specificity[c] = ratio(tn, tn + fp);
        f1_sum += r.per_class_f1[c];
        sens_sum += r.per_class_sensitivity[c];
        spec_sum += r.per_class_specificity[c];
    }
    r.macro_f1 = f1_sum / 5.0;
    r.mean_sensitivity = sens_sum / 5.0;
    r.mean_specificity = spec_sum / 5.0;
    return r;
}

/// Metrics over epochs whose true label is a stage; 255 entries are masked.
inline EvalReport evaluate(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth) {
    if (predicted.size() != truth.size()) throw DataError("evaluate: prediction and label counts differ");
    ConfusionMatrix cm{};
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] == kExcluded) continue;
        if (truth[i] >= 5 || predicted[i] >= 5) throw DataError("evaluate: invalid stage code at epoch " + std::to_string(i));
        ++cm[truth[i]][predicted[i]];
    }
    return evaluate_confusion(cm);
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json per_class = nlohmann::json::object();
    for (std::size_t c = 0; c < 5; ++c) {
        per_class[kStageNames[c]] = {{"f1", json_number(r.per_class_f1[c])},
                                     {"sensitivity", json_number(r.per_class_sensitivity[c])},
                                     {"specificity", json_number(r.per_class_specificity[c])}};
    }
    nlohmann::json cm = nlohmann::json::array();
    for (const auto& row : r.confusion) cm.push_back(row);
    return {{"epochs", r.epochs},
            {"accuracy", json_number(r.accuracy)},
            {"kappa", json_number(r.kappa)},
            {"macro_f1", json_number(r.macro_f1)},
            {"mean_sensitivity", json_number(r.mean_sensitivity)},
            {"mean_specificity", json_number(r.mean_specificity)},
            {"per_class", per_class},
            {"confusion_matrix", cm},
            {"stage_order", kStageNames}};
}

}  // namespace somnus
