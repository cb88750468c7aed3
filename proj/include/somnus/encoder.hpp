#pragma once

// Transformer encoder block: multi-head scaled dot-product self-attention,
// residual + layer norm, position-wise feed-forward, residual + layer norm.
// Inputs are batched as [B, l, d]; every batch item attends only within
// itself.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "somnus/checkpoint.hpp"
#include "somnus/errors.hpp"
#include "somnus/tensor.hpp"

namespace somnus {

enum class AttentionLevel { epoch, sequence };

inline const char* to_string(AttentionLevel level) { return level == AttentionLevel::epoch ? "epoch" : "sequence"; }

/// Post-softmax attention matrices of one batch item at one layer.
struct AttentionRecord {
    AttentionLevel level = AttentionLevel::epoch;
    std::size_t layer = 0;
    std::size_t heads = 0;
    std::size_t length = 0;
    std::vector<double> scores;  // heads x length x length

    double at(std::size_t head, std::size_t row, std::size_t col) const {
        return scores[(head * length + row) * length + col];
    }
};

/// Per-call switches shared by every layer of one forward pass.
struct ForwardContext {
    bool train = false;
    double dropout = 0.0;
    std::mt19937_64* rng = nullptr;
    bool capture_attention = false;

    double active_dropout() const { return train ? dropout : 0.0; }
};

namespace detail {

template <typename T>
Tensor<T> xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<T> v(shape_numel(shape));
    for (T& x : v) x = static_cast<T>((2.0 * uniform01(rng) - 1.0) * limit);
    return Tensor<T>::from(std::move(shape), std::move(v), true);
}

inline std::mt19937_64& require_rng(const ForwardContext& ctx) {
    if (ctx.rng == nullptr) throw UsageError("training forward pass needs a dropout RNG");
    return *ctx.rng;
}

}  // namespace detail

/// Sinusoidal position table: p[i, 2j] = sin(i / 10000^(2j/d)),
/// p[i, 2j+1] = cos(i / 10000^(2j/d)).
template <typename T>
Tensor<T> positional_encoding(std::size_t length, std::size_t width) {
    if (width % 2 != 0) throw ConfigError("positional encoding width must be even, got " + std::to_string(width));
    std::vector<T> p(length * width);
    for (std::size_t i = 0; i < length; ++i) {
        for (std::size_t j = 0; 2 * j < width; ++j) {
            const double angle =
                static_cast<double>(i) / std::pow(10000.0, static_cast<double>(2 * j) / static_cast<double>(width));
            p[i * width + 2 * j] = static_cast<T>(std::sin(angle));
            p[i * width + 2 * j + 1] = static_cast<T>(std::cos(angle));
        }
    }
    return Tensor<T>::from({length, width}, std::move(p));
}

struct EncoderShape {
    std::size_t width = 128;     // d
    std::size_t heads = 8;       // H
    std::size_t ff_width = 1024; // d_FF
    bool scale_per_head = false; // 1/sqrt(d/H) instead of 1/sqrt(d)

    void validate() const {
        if (width == 0 || heads == 0 || ff_width == 0) throw ConfigError("encoder dimensions must be positive");
        if (width % heads != 0) {
            throw ConfigError("model width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) +
                              " heads");
        }
    }
    std::size_t head_width() const { return width / heads; }
};

/// Learnable parameters of one encoder block. Per-head projections are
/// stored side by side: columns [i*d/H, (i+1)*d/H) of query/key/value
/// belong to head i.
template <typename T>
struct EncoderBlockParams {
    EncoderShape shape;
    Tensor<T> query, key, value;  // d x d
    Tensor<T> output;             // d x d
    Tensor<T> ff_in, ff_in_bias;  // d x d_FF, d_FF
    Tensor<T> ff_out, ff_out_bias;  // d_FF x d, d
    Tensor<T> norm1_gain, norm1_bias, norm2_gain, norm2_bias;

    static EncoderBlockParams init(const EncoderShape& s, std::mt19937_64& rng) {
        s.validate();
        const std::size_t d = s.width, dk = s.head_width(), ff = s.ff_width;
        EncoderBlockParams p;
        p.shape = s;
        p.query = detail::xavier_uniform<T>({d, d}, d, dk, rng);
        p.key = detail::xavier_uniform<T>({d, d}, d, dk, rng);
        p.value = detail::xavier_uniform<T>({d, d}, d, dk, rng);
        p.output = detail::xavier_uniform<T>({d, d}, d, d, rng);
        p.ff_in = detail::xavier_uniform<T>({d, ff}, d, ff, rng);
        p.ff_in_bias = Tensor<T>::zeros({ff}, true);
        p.ff_out = detail::xavier_uniform<T>({ff, d}, ff, d, rng);
        p.ff_out_bias = Tensor<T>::zeros({d}, true);
        p.norm1_gain = Tensor<T>::full({d}, T{1}, true);
        p.norm1_bias = Tensor<T>::zeros({d}, true);
        p.norm2_gain = Tensor<T>::full({d}, T{1}, true);
        p.norm2_bias = Tensor<T>::zeros({d}, true);
        return p;
    }

    void append_to(const std::string& prefix, std::vector<NamedParameter<T>>& out) const {
        out.push_back({prefix + ".attn.query", query});
        out.push_back({prefix + ".attn.key", key});
        out.push_back({prefix + ".attn.value", value});
        out.push_back({prefix + ".attn.output", output});
        out.push_back({prefix + ".ff.in.weight", ff_in});
        out.push_back({prefix + ".ff.in.bias", ff_in_bias});
        out.push_back({prefix + ".ff.out.weight", ff_out});
        out.push_back({prefix + ".ff.out.bias", ff_out_bias});
        out.push_back({prefix + ".norm1.gain", norm1_gain});
        out.push_back({prefix + ".norm1.bias", norm1_bias});
        out.push_back({prefix + ".norm2.gain", norm2_gain});
        out.push_back({prefix + ".norm2.bias", norm2_bias});
    }
};

/// Self-attention over z [B, l, d]. When ctx.capture_attention is set and
/// `records` is non-null, one record per batch item is appended (copied out
/// of the graph, so it never carries gradient).
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& z, const EncoderBlockParams<T>& p, const ForwardContext& ctx,
                               std::vector<AttentionRecord>* records = nullptr, std::size_t layer = 0,
                               AttentionLevel level = AttentionLevel::epoch) {
    const std::size_t d = p.shape.width, heads = p.shape.heads;
    if (z.ndim() != 3 || z.dim(2) != d) {
        throw ShapeError("multi_head_attention: expected [B, l, " + std::to_string(d) + "], got " + shape_str(z.shape()));
    }
    const std::size_t batch = z.dim(0), len = z.dim(1);
    const auto q = split_heads(matmul(z, p.query), heads);
    const auto k = split_heads(matmul(z, p.key), heads);
    const auto v = split_heads(matmul(z, p.value), heads);
    const double denom = std::sqrt(static_cast<double>(p.shape.scale_per_head ? p.shape.head_width() : d));
    const auto attn = softmax_rows(scale(matmul_transposed(q, k), static_cast<T>(1.0 / denom)));

    if (ctx.capture_attention && records != nullptr) {
        const std::size_t per_item = heads * len * len;
        const auto& a = attn.values();
        for (std::size_t b = 0; b < batch; ++b) {
            AttentionRecord rec{level, layer, heads, len, {}};
            rec.scores.assign(a.begin() + static_cast<std::ptrdiff_t>(b * per_item),
                              a.begin() + static_cast<std::ptrdiff_t>((b + 1) * per_item));
            records->push_back(std::move(rec));
        }
    }

    Tensor<T> weights = attn;
    if (ctx.active_dropout() > 0.0) weights = dropout(attn, ctx.active_dropout(), true, detail::require_rng(ctx));
    return matmul(merge_heads(matmul(weights, v), heads), p.output);
}

/// o = LN(z_mid + FFN(z_mid)), z_mid = LN(z + MHA(z)); dropout on both
/// sublayer outputs when training.
template <typename T>
Tensor<T> encoder_block(const Tensor<T>& z, const EncoderBlockParams<T>& p, const ForwardContext& ctx,
                        std::vector<AttentionRecord>* records = nullptr, std::size_t layer = 0,
                        AttentionLevel level = AttentionLevel::epoch) {
    const double rate = ctx.active_dropout();
    auto attn = multi_head_attention(z, p, ctx, records, layer, level);
    if (rate > 0.0) attn = dropout(attn, rate, true, detail::require_rng(ctx));
    const auto mid = layer_norm(add(z, attn), p.norm1_gain, p.norm1_bias);
    auto ff = linear(relu(linear(mid, p.ff_in, p.ff_in_bias)), p.ff_out, p.ff_out_bias);
    if (rate > 0.0) ff = dropout(ff, rate, true, detail::require_rng(ctx));
    return layer_norm(add(mid, ff), p.norm2_gain, p.norm2_bias);
}

}  // namespace somnus
