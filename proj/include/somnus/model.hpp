#pragma once

// Sequence-to-sequence sleep staging network.
//
//   spectrogram [T, F] + P_ep -> N_E encoder blocks -> attention pooling -> x [F]
//   L pooled vectors [L, F] + P_seq -> N_S encoder blocks
//   -> FC(fc_width)+ReLU -> FC(fc_width)+ReLU -> linear(C) -> softmax
//
// Epoch encoding never mixes information across epochs, so a batch of B
// sequences is processed as one [B*L, T, F] tensor at the epoch level.

#include <nlohmann/json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "somnus/checkpoint.hpp"
#include "somnus/encoder.hpp"
#include "somnus/errors.hpp"
#include "somnus/signal.hpp"
#include "somnus/stages.hpp"
#include "somnus/tensor.hpp"

namespace somnus {

inline constexpr std::size_t kClasses = 5;
inline constexpr double kProbabilityFloor = 1e-8;

struct ModelConfig {
    std::size_t sequence_length = 21;  // L
    std::size_t frames = kFrames;      // T
    std::size_t bins = kBins;          // F, also the model width at both levels
    std::size_t classes = kClasses;    // C
    std::size_t epoch_layers = 4;      // N_E
    std::size_t sequence_layers = 4;   // N_S
    std::size_t heads = 8;             // H
    std::size_t ff_width = 1024;       // d_FF
    std::size_t fc_width = 1024;
    std::size_t attention_size = 64;   // A
    double dropout = 0.1;
    bool scale_per_head = false;

    void validate() const {
        auto positive = [](std::size_t v, const char* field) {
            if (v == 0) throw ConfigError(std::string("model.") + field + " must be >= 1");
        };
        positive(sequence_length, "sequence_length");
        positive(frames, "frames");
        positive(bins, "bins");
        positive(classes, "classes");
        positive(epoch_layers, "epoch_layers");
        positive(sequence_layers, "sequence_layers");
        positive(heads, "heads");
        positive(ff_width, "ff_width");
        positive(fc_width, "fc_width");
        positive(attention_size, "attention_size");
        if (bins % heads != 0) throw ConfigError("model.bins must be divisible by model.heads");
        if (bins % 2 != 0) throw ConfigError("model.bins must be even for positional encoding");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must lie in [0, 1)");
    }

    EncoderShape encoder_shape() const { return {bins, heads, ff_width, scale_per_head}; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"sequence_length", c.sequence_length}, {"frames", c.frames},
                       {"bins", c.bins},
                       {"classes", c.classes},
                       {"epoch_layers", c.epoch_layers},
                       {"sequence_layers", c.sequence_layers},
                       {"heads", c.heads},
                       {"ff_width", c.ff_width},
                       {"fc_width", c.fc_width},
                       {"attention_size", c.attention_size},
                       {"dropout", c.dropout},
                       {"scale_per_head", c.scale_per_head}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("sequence_length").get_to(c.sequence_length);
    j.at("frames").get_to(c.frames);
    j.at("bins").get_to(c.bins);
    j.at("classes").get_to(c.classes);
    j.at("epoch_layers").get_to(c.epoch_layers);
    j.at("sequence_layers").get_to(c.sequence_layers);
    j.at("heads").get_to(c.heads);
    j.at("ff_width").get_to(c.ff_width);
    j.at("fc_width").get_to(c.fc_width);
    j.at("attention_size").get_to(c.attention_size);
    j.at("dropout").get_to(c.dropout);
    j.at("scale_per_head").get_to(c.scale_per_head);
}

/// L consecutive epochs of one recording. Spectrograms are borrowed from the
/// recording that owns them. Stage codes use 255 for excluded positions.
struct EpochSequence {
    std::vector<const Spectrogram*> spectrograms;
    std::vector<std::uint8_t> labels;
    std::string recording_id;
    std::size_t start_epoch = 0;
};

template <typename T>
struct ForwardResult {
    Tensor<T> probs;                                                // [B, L, C]
    std::vector<std::vector<AttentionRecord>> epoch_attention;     // [B*L][N_E]
    std::vector<std::vector<AttentionRecord>> sequence_attention;  // [B][N_S]
    std::vector<std::vector<double>> alphas;                        // [B*L][T]

    double prob(std::size_t b, std::size_t i, std::size_t c) const {
        const std::size_t L = probs.dim(1), C = probs.dim(2);
        return static_cast<double>(probs[(b * L + i) * C + c]);
    }
};

template <typename T>
struct EpochEncoding {
    Tensor<T> pooled;                                          // [N, F]
    std::vector<std::vector<AttentionRecord>> attention;      // [N][N_E]
    std::vector<std::vector<double>> alphas;                   // [N][T]
};

template <typename T>
class SleepTransformer {
   public:
    SleepTransformer(const ModelConfig& config, std::uint64_t seed) : config_(config) {
        config_.validate();
        std::mt19937_64 rng(seed);
        const auto shape = config_.encoder_shape();
        const std::size_t F = config_.bins, A = config_.attention_size, fc = config_.fc_width;
        for (std::size_t i = 0; i < config_.epoch_layers; ++i) {
            epoch_blocks_.push_back(EncoderBlockParams<T>::init(shape, rng));
        }
        pool_weight_ = detail::xavier_uniform<T>({F, A}, F, A, rng);
        pool_bias_ = Tensor<T>::zeros({A}, true);
        pool_context_ = detail::xavier_uniform<T>({A}, A, 1, rng);
        for (std::size_t i = 0; i < config_.sequence_layers; ++i) {
            sequence_blocks_.push_back(EncoderBlockParams<T>::init(shape, rng));
        }
        fc1_ = detail::xavier_uniform<T>({F, fc}, F, fc, rng);
        fc1_bias_ = Tensor<T>::zeros({fc}, true);
        fc2_ = detail::xavier_uniform<T>({fc, fc}, fc, fc, rng);
        fc2_bias_ = Tensor<T>::zeros({fc}, true);
        head_ = detail::xavier_uniform<T>({fc, config_.classes}, fc, config_.classes, rng);
        head_bias_ = Tensor<T>::zeros({config_.classes}, true);
        epoch_position_ = positional_encoding<T>(config_.frames, F);
        sequence_position_ = positional_encoding<T>(config_.sequence_length, F);
    }

    const ModelConfig& config() const { return config_; }

    /// Every learnable tensor in checkpoint order. Handles share storage with
    /// the model, so optimizers update the model through them.
    std::vector<NamedParameter<T>> parameters() const {
        std::vector<NamedParameter<T>> out;
        for (std::size_t i = 0; i < epoch_blocks_.size(); ++i) epoch_blocks_[i].append_to("epoch." + std::to_string(i), out);
        out.push_back({"pool.weight", pool_weight_});
        out.push_back({"pool.bias", pool_bias_});
        out.push_back({"pool.context", pool_context_});
        for (std::size_t i = 0; i < sequence_blocks_.size(); ++i) {
            sequence_blocks_[i].append_to("sequence." + std::to_string(i), out);
        }
        out.push_back({"fc1.weight", fc1_});
        out.push_back({"fc1.bias", fc1_bias_});
        out.push_back({"fc2.weight", fc2_});
        out.push_back({"fc2.bias", fc2_bias_});
        out.push_back({"head.weight", head_});
        out.push_back({"head.bias", head_bias_});
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.tensor.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : parameters()) p.tensor.zero_grad();
    }

    /// Stacks normalized spectrograms into [N, T, F].
    Tensor<T> input_tensor(std::span<const Spectrogram* const> specs) const {
        const std::size_t T_ = config_.frames, F = config_.bins;
        std::vector<T> data(specs.size() * T_ * F);
        for (std::size_t i = 0; i < specs.size(); ++i) {
            const Spectrogram& s = *specs[i];
            if (!s.normalized) throw UsageError("model input must be a normalized spectrogram");
            if (s.values.size() != T_ * F) throw ShapeError("spectrogram does not match model frames x bins");
            std::copy(s.values.begin(), s.values.end(), data.begin() + static_cast<std::ptrdiff_t>(i * T_ * F));
        }
        return Tensor<T>::from({specs.size(), T_, F}, std::move(data));
    }

    /// Epoch-level heap plus attention pooling on x [N, T, F].
    EpochEncoding<T> encode_epochs(const Tensor<T>& x, const ForwardContext& ctx) const {
        const std::size_t N = x.dim(0), T_ = config_.frames, F = config_.bins;
        if (x.ndim() != 3 || x.dim(1) != T_ || x.dim(2) != F) {
            throw ShapeError("encode_epochs: expected [N, " + std::to_string(T_) + ", " + std::to_string(F) + "], got " +
                             shape_str(x.shape()));
        }
        EpochEncoding<T> enc;
        std::vector<AttentionRecord> records;
        auto h = add(x, epoch_position_);
        for (std::size_t l = 0; l < epoch_blocks_.size(); ++l) {
            h = encoder_block(h, epoch_blocks_[l], ctx, &records, l, AttentionLevel::epoch);
        }
        // alpha_t = softmax_t(a_t . a_e), a_t = tanh(W_a x_t + b_a)
        const auto a = tanh(linear(h, pool_weight_, pool_bias_));
        const auto logits = matmul(a, reshape(pool_context_, {config_.attention_size, 1}));
        const auto alpha = softmax_rows(reshape(logits, {N, T_}));
        enc.pooled = reshape(matmul(reshape(alpha, {N, 1, T_}), h), {N, F});

        if (ctx.capture_attention) {
            enc.attention.assign(N, {});
            for (std::size_t l = 0; l < epoch_blocks_.size(); ++l)
                for (std::size_t i = 0; i < N; ++i) enc.attention[i].push_back(std::move(records[l * N + i]));
            enc.alphas.resize(N);
            for (std::size_t i = 0; i < N; ++i) {
                enc.alphas[i].assign(alpha.values().begin() + static_cast<std::ptrdiff_t>(i * T_),
                                     alpha.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * T_));
            }
        }
        return enc;
    }

    /// Sequence-level heap and classifier on pooled [B, L, F]; returns
    /// probabilities [B, L, C].
    Tensor<T> classify_sequences(const Tensor<T>& pooled, const ForwardContext& ctx,
                                 std::vector<std::vector<AttentionRecord>>* attention = nullptr) const {
        const std::size_t L = config_.sequence_length;
        if (pooled.ndim() != 3 || pooled.dim(1) != L || pooled.dim(2) != config_.bins) {
            throw UsageError("sequence input must be [B, " + std::to_string(L) + ", " + std::to_string(config_.bins) +
                             "], got " + shape_str(pooled.shape()));
        }
        const std::size_t B = pooled.dim(0);
        std::vector<AttentionRecord> records;
        auto o = add(pooled, sequence_position_);
        for (std::size_t l = 0; l < sequence_blocks_.size(); ++l) {
            o = encoder_block(o, sequence_blocks_[l], ctx, &records, l, AttentionLevel::sequence);
        }
        const double rate = ctx.active_dropout();
        auto f = relu(linear(o, fc1_, fc1_bias_));
        if (rate > 0.0) f = dropout(f, rate, true, detail::require_rng(ctx));
        f = relu(linear(f, fc2_, fc2_bias_));
        if (rate > 0.0) f = dropout(f, rate, true, detail::require_rng(ctx));
        auto probs = softmax_rows(linear(f, head_, head_bias_));

        if (ctx.capture_attention && attention != nullptr) {
            attention->assign(B, {});
            for (std::size_t l = 0; l < sequence_blocks_.size(); ++l)
                for (std::size_t b = 0; b < B; ++b) (*attention)[b].push_back(std::move(records[l * B + b]));
        }
        return probs;
    }

    /// Full forward pass over B sequences given as x [B*L, T, F].
    ForwardResult<T> forward(const Tensor<T>& x, const ForwardContext& ctx) const {
        const std::size_t L = config_.sequence_length;
        if (x.ndim() != 3 || x.dim(0) % L != 0 || x.dim(0) == 0) {
            throw UsageError("forward: epoch count " + std::to_string(x.ndim() ? x.dim(0) : 0) +
                             " is not a positive multiple of sequence length " + std::to_string(L));
        }
        const std::size_t B = x.dim(0) / L;
        auto enc = encode_epochs(x, ctx);
        ForwardResult<T> out;
        out.probs = classify_sequences(reshape(enc.pooled, {B, L, config_.bins}), ctx, &out.sequence_attention);
        out.epoch_attention = std::move(enc.attention);
        out.alphas = std::move(enc.alphas);
        return out;
    }

    ForwardResult<T> forward(std::span<const EpochSequence> batch, const ForwardContext& ctx) const {
        std::vector<const Spectrogram*> specs;
        for (const auto& seq : batch) {
            if (seq.spectrograms.size() != config_.sequence_length) {
                throw UsageError("sequence of " + std::to_string(seq.spectrograms.size()) +
                                 " epochs does not match model sequence length " +
                                 std::to_string(config_.sequence_length));
            }
            specs.insert(specs.end(), seq.spectrograms.begin(), seq.spectrograms.end());
        }
        return forward(input_tensor(specs), ctx);
    }

   private:
    ModelConfig config_;
    std::vector<EncoderBlockParams<T>> epoch_blocks_;
    Tensor<T> pool_weight_, pool_bias_, pool_context_;
    std::vector<EncoderBlockParams<T>> sequence_blocks_;
    Tensor<T> fc1_, fc1_bias_, fc2_, fc2_bias_, head_, head_bias_;
    Tensor<T> epoch_position_, sequence_position_;
};

/// Cross-entropy averaged over every labelled position:
/// -(1/n) sum_i log(max(p_i[y_i], eps)). Positions labelled 255 are skipped.
template <typename T>
Tensor<T> sequence_loss(const Tensor<T>& probs, std::span<const std::uint8_t> labels) {
    const std::size_t C = probs.shape().back();
    if (probs.numel() != labels.size() * C) {
        throw ShapeError("sequence_loss: " + std::to_string(labels.size()) + " labels for probabilities " +
                         shape_str(probs.shape()));
    }
    std::vector<T> onehot(probs.numel(), T{});
    std::size_t counted = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= C) continue;
        onehot[i * C + labels[i]] = T{1};
        ++counted;
    }
    if (counted == 0) throw DataError("sequence_loss: no labelled positions");
    const auto target = Tensor<T>::from(probs.shape(), std::move(onehot));
    return scale(sum(mul(target, log_floor(probs, static_cast<T>(kProbabilityFloor)))),
                 static_cast<T>(-1.0 / static_cast<double>(counted)));
}

/// Checkpoint = parameter file plus a JSON sidecar holding the config and
/// any extra metadata (e.g. feature normalization).
template <typename T>
void save_model(const SleepTransformer<T>& model, const std::filesystem::path& path, nlohmann::json extra = {}) {
    save_checkpoint(path, model.parameters());
    nlohmann::json side = std::move(extra);
    if (side.is_null()) side = nlohmann::json::object();
    side["model"] = model.config();
    side["precision"] = 8 * sizeof(T);
    std::ofstream os(std::filesystem::path(path).concat(".json"));
    if (!os) throw DataError("cannot write checkpoint sidecar for " + path.string());
    os << side.dump(2) << '\n';
}

inline nlohmann::json read_model_sidecar(const std::filesystem::path& path) {
    const auto side_path = std::filesystem::path(path).concat(".json");
    std::ifstream is(side_path);
    if (!is) throw DataError("missing checkpoint sidecar " + side_path.string());
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed checkpoint sidecar " + side_path.string() + ": " + e.what());
    }
}

template <typename T>
SleepTransformer<T> load_model(const std::filesystem::path& path, nlohmann::json* sidecar = nullptr) {
    auto side = read_model_sidecar(path);
    ModelConfig config;
    try {
        config = side.at("model").get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint sidecar has no valid model config: " + std::string(e.what()));
    }
    SleepTransformer<T> model(config, 0);
    auto params = model.parameters();
    load_checkpoint(path, params);
    if (sidecar) *sidecar = std::move(side);
    return model;
}

}  // namespace somnus
