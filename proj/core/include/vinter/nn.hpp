#pragma once

// Transformer building blocks: scaled dot-product attention, multi-head
// attention, layer norm, feed-forward, and pre-norm encoder/decoder blocks.

#include <optional>
#include <vector>

#include "vinter/tensor.hpp"

namespace vinter {

// Boolean attention mask; true means the query row may attend to the key.
struct Mask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> allow;

    Mask() = default;
    Mask(std::size_t r, std::size_t c, bool allowed = true)
        : rows(r), cols(c), allow(r * c, allowed ? 1 : 0) {}

    bool at(std::size_t i, std::size_t j) const { return allow[i * cols + j] != 0; }
    void set(std::size_t i, std::size_t j, bool v) { allow[i * cols + j] = v ? 1 : 0; }
};

// Lower-triangular mask (inclusive of the diagonal).
Mask causal_mask(std::size_t t);

// Square self-attention mask that forbids attending to padded key positions.
// key_allowed[j] == 0 marks a padded position.
Mask padding_mask(const std::vector<std::uint8_t>& key_allowed);

// Rectangular cross-attention mask over the same key validity vector.
Mask cross_mask(std::size_t query_len, const std::vector<std::uint8_t>& key_allowed);

template <typename Real>
struct AttentionParams {
    Tensor<Real> w_q, w_k, w_v, w_o;  // all [hidden, hidden]
    std::size_t head_count = 1;

    std::size_t hidden() const { return w_q.dim(0); }
    std::size_t head_dim() const { return hidden() / head_count; }
};

template <typename Real>
struct FeedForwardParams {
    Tensor<Real> w1, b1;  // [hidden, 4*hidden], [4*hidden]
    Tensor<Real> w2, b2;  // [4*hidden, hidden], [hidden]
};

template <typename Real>
struct LayerNormParams {
    Tensor<Real> gain, bias;  // both [width]
};

template <typename Real>
struct EncoderBlockParams {
    AttentionParams<Real> self_attn;
    LayerNormParams<Real> ln_attn, ln_ffn;
    FeedForwardParams<Real> ffn;
};

template <typename Real>
struct DecoderBlockParams {
    AttentionParams<Real> self_attn, cross_attn;
    LayerNormParams<Real> ln_self, ln_cross, ln_ffn;
    FeedForwardParams<Real> ffn;
};

// Captures the scaled pre-bias scores and the post-softmax weights of one
// attention evaluation, for tests and diagnostics.
template <typename Real>
struct AttentionProbe {
    Tensor<Real> scores;
    Tensor<Real> weights;
};

inline constexpr double kMaskBias = -1e9;

// softmax(QK^T / sqrt(d_k) + mask_bias) V. Forbidden positions get an
// additive -1e9 before the softmax. A fully masked query row is a contract
// violation.
template <typename Real>
Tensor<Real> scaled_dot_product_attention(const Tensor<Real>& q, const Tensor<Real>& k,
                                          const Tensor<Real>& v, const Mask* mask = nullptr,
                                          AttentionProbe<Real>* probe = nullptr);

// Heads are computed on contiguous column slices of the projected inputs,
// concatenated, and output-projected. Self-attention when x_q == x_kv.
template <typename Real>
Tensor<Real> multi_head_attention(const Tensor<Real>& x_q, const Tensor<Real>& x_kv,
                                  const Mask* mask, const AttentionParams<Real>& params,
                                  std::vector<AttentionProbe<Real>>* probes = nullptr);

template <typename Real>
Tensor<Real> feed_forward(const Tensor<Real>& x, const FeedForwardParams<Real>& params);

template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const LayerNormParams<Real>& params,
                        Real eps = Real(1e-5));

// Pre-norm residual block: x + MHA(LN(x)), then + FFN(LN(.)).
template <typename Real>
Tensor<Real> encoder_block(const Tensor<Real>& x, const Mask* pad_mask,
                           const EncoderBlockParams<Real>& params);

// Pre-norm residual decoder block: causal self-attention, cross-attention
// over the encoder output h, then FFN. `src_mask` (if given) restricts which
// h positions may be attended.
template <typename Real>
Tensor<Real> decoder_block(const Tensor<Real>& y, const Tensor<Real>& h,
                           const DecoderBlockParams<Real>& params, const Mask* src_mask = nullptr);

// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> scaled_dot_product_attention(const Tensor<Real>& q, const Tensor<Real>& k,
                                          const Tensor<Real>& v, const Mask* mask,
                                          AttentionProbe<Real>* probe) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
        throw DimensionError("attention: q/k/v must be rank 2");
    }
    const std::size_t lq = q.dim(0), dk = q.dim(1);
    const std::size_t lk = k.dim(0);
    if (k.dim(1) != dk) {
        throw DimensionError("attention: q " + shape_str(q.shape()) + " and k " +
                             shape_str(k.shape()) + " disagree on key dimension");
    }
    if (v.dim(0) != lk) {
        throw DimensionError("attention: k " + shape_str(k.shape()) + " and v " +
                             shape_str(v.shape()) + " disagree on key count");
    }
    if (mask != nullptr) {
        if (mask->rows != lq || mask->cols != lk) {
            throw DimensionError("attention: mask is " + std::to_string(mask->rows) + "x" +
                                 std::to_string(mask->cols) + ", expected " + std::to_string(lq) +
                                 "x" + std::to_string(lk));
        }
        for (std::size_t i = 0; i < lq; ++i) {
            bool any = false;
            for (std::size_t j = 0; j < lk; ++j) any = any || mask->at(i, j);
            if (!any) {
                throw ContractError("attention: query row " + std::to_string(i) +
                                    " has no allowed keys");
            }
        }
    }

    Tensor<Real> scores = scale(matmul(q, transpose(k, 0, 1)),
                                Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dk))));
    if (probe != nullptr) probe->scores = scores.detached();
    if (mask != nullptr) {
        std::vector<Real> bias(lq * lk, Real(0));
        for (std::size_t i = 0; i < lq * lk; ++i) {
            if (!mask->allow[i]) bias[i] = static_cast<Real>(kMaskBias);
        }
        scores = add(scores, Tensor<Real>(Shape{lq, lk}, std::move(bias)));
    }
    Tensor<Real> weights = softmax(scores, 1);
    if (probe != nullptr) probe->weights = weights.detached();
    return matmul(weights, v);
}

template <typename Real>
Tensor<Real> multi_head_attention(const Tensor<Real>& x_q, const Tensor<Real>& x_kv,
                                  const Mask* mask, const AttentionParams<Real>& params,
                                  std::vector<AttentionProbe<Real>>* probes) {
    const std::size_t hidden = params.hidden();
    if (x_q.rank() != 2 || x_q.dim(1) != hidden || x_kv.rank() != 2 || x_kv.dim(1) != hidden) {
        throw DimensionError("multi_head_attention: inputs " + shape_str(x_q.shape()) + ", " +
                             shape_str(x_kv.shape()) + " do not match hidden size " +
                             std::to_string(hidden));
    }
    if (hidden % params.head_count != 0) {
        throw DimensionError("multi_head_attention: hidden " + std::to_string(hidden) +
                             " not divisible by head count " + std::to_string(params.head_count));
    }
    const std::size_t dk = params.head_dim();
    Tensor<Real> q = matmul(x_q, params.w_q);
    Tensor<Real> k = matmul(x_kv, params.w_k);
    Tensor<Real> v = matmul(x_kv, params.w_v);

    if (probes != nullptr) probes->resize(params.head_count);
    std::vector<Tensor<Real>> heads;
    heads.reserve(params.head_count);
    for (std::size_t h = 0; h < params.head_count; ++h) {
        AttentionProbe<Real>* probe = probes != nullptr ? &(*probes)[h] : nullptr;
        heads.push_back(scaled_dot_product_attention(slice(q, 1, h * dk, (h + 1) * dk),
                                                     slice(k, 1, h * dk, (h + 1) * dk),
                                                     slice(v, 1, h * dk, (h + 1) * dk), mask,
                                                     probe));
    }
    Tensor<Real> merged = params.head_count == 1 ? heads[0] : concat(heads, 1);
    return matmul(merged, params.w_o);
}

template <typename Real>
Tensor<Real> feed_forward(const Tensor<Real>& x, const FeedForwardParams<Real>& params) {
    Tensor<Real> inner = gelu(add(matmul(x, params.w1), params.b1));
    return add(matmul(inner, params.w2), params.b2);
}

template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const LayerNormParams<Real>& params, Real eps) {
    return layer_norm(x, params.gain, params.bias, eps);
}

template <typename Real>
Tensor<Real> encoder_block(const Tensor<Real>& x, const Mask* pad_mask,
                           const EncoderBlockParams<Real>& params) {
    Tensor<Real> normed = layer_norm(x, params.ln_attn);
    Tensor<Real> attended = add(x, multi_head_attention(normed, normed, pad_mask, params.self_attn));
    return add(attended, feed_forward(layer_norm(attended, params.ln_ffn), params.ffn));
}

template <typename Real>
Tensor<Real> decoder_block(const Tensor<Real>& y, const Tensor<Real>& h,
                           const DecoderBlockParams<Real>& params, const Mask* src_mask) {
    if (!y.defined() || y.rank() != 2 || y.dim(0) == 0) {
        throw ContractError("decoder_block: target sequence must be non-empty");
    }
    const Mask causal = causal_mask(y.dim(0));
    Tensor<Real> normed = layer_norm(y, params.ln_self);
    Tensor<Real> self_out =
        add(y, multi_head_attention(normed, normed, &causal, params.self_attn));
    Tensor<Real> cross_out =
        add(self_out, multi_head_attention(layer_norm(self_out, params.ln_cross), h, src_mask,
                                           params.cross_attn));
    return add(cross_out, feed_forward(layer_norm(cross_out, params.ln_ffn), params.ffn));
}

}  // namespace vinter
