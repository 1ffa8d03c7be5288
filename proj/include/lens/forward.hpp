#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "lens/activation.hpp"
#include "lens/model.hpp"
#include "lens/sequence.hpp"

namespace lens {

// ---------------------------------------------------------------------------
// Layer normalization

struct LnStats {
    double mean = 0.0;
    double scale = 1.0; // sqrt(var + eps)
    bool degenerate = false;
};

/// Mean and ε-guarded scale of z. A (numerically) constant vector is flagged
/// degenerate; its normalized output is exactly zero.
inline LnStats ln_stats(const Vector& z, double eps) {
    const double d = static_cast<double>(z.size());
    const double mean = z.sum() / d;
    const double var = (z.array() - mean).square().sum() / d;
    const double spread = std::sqrt(var);
    LnStats s;
    s.mean = mean;
    s.scale = std::sqrt(var + eps);
    s.degenerate = spread <= 1e-12 * (1.0 + z.cwiseAbs().maxCoeff());
    return s;
}

inline Vector layer_norm(const Vector& z, const Vector& gamma, const Vector& beta, double eps) {
    const LnStats s = ln_stats(z, eps);
    if (s.degenerate) return beta;
    return ((z.array() - s.mean) / s.scale * gamma.array() + beta.array()).matrix();
}

inline Matrix layer_norm_rows(const Matrix& z, const Vector& gamma, const Vector& beta,
                              double eps) {
    Matrix out(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) out.row(i) = layer_norm(z.row(i), gamma, beta, eps);
    return out;
}

// ---------------------------------------------------------------------------
// Embedding

inline Matrix embed(const TokenSequence& seq, const EmbeddingParams& params, const ModelConfig& cfg) {
    const std::size_t n = seq.size();
    if (n == 0) throw DataError("sequence '" + seq.id + "' is empty");
    if (n > cfg.max_positions)
        throw DataError("sequence '" + seq.id + "' has " + std::to_string(n) +
                        " tokens; position " + std::to_string(cfg.max_positions) +
                        " exceeds max_positions");
    Matrix x(n, cfg.hidden_dim);
    for (std::size_t k = 0; k < n; ++k) {
        const TokenId id = seq.token_ids[k];
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
            throw DataError("sequence '" + seq.id + "': token id " + std::to_string(id) +
                            " at position " + std::to_string(k) + " is out of vocabulary");
        x.row(k) = params.token.row(id) + params.position.row(k);
        if (cfg.has_segment_embeddings && params.segment) x.row(k) += params.segment->row(0);
    }
    if (params.ln_gamma) x = layer_norm_rows(x, *params.ln_gamma, *params.ln_beta, cfg.ln_epsilon);
    return x;
}

// ---------------------------------------------------------------------------
// Layer forward pass

/// Every sub-stage output of one layer. Stage fields keep their component
/// meaning for both architectures (e.g. `ln1_out` is LN1's output, which
/// precedes attention under Pre-LN).
struct LayerTrace {
    Matrix input;
    std::vector<Matrix> attention; // per head, n×n, rows sum to 1
    Matrix attn_out, res1_out, ln1_out, ff_out, res2_out, ln2_out;
    Matrix output;

    /// Input of the FF sublayer.
    const Matrix& ff_in(Architecture a) const { return a == Architecture::PostLN ? ln1_out : ln2_out; }
    /// Vector carried around FF by RES2.
    const Matrix& ff_bypass(Architecture a) const { return a == Architecture::PostLN ? ln1_out : res1_out; }
};

namespace detail {

inline void check_finite(const Matrix& m, std::size_t layer, const char* stage) {
    if (!m.allFinite())
        throw NumericError("non-finite value in layer " + std::to_string(layer) + " at stage " + stage);
}

inline Matrix add_bias(Matrix m, const Vector& b) {
    m.rowwise() += b;
    return m;
}

} // namespace detail

/// Per-head softmax(Q K^T / sqrt(head_dim)) with an optional causal mask.
inline std::vector<Matrix> attention_weights(const Matrix& a, const LayerParams& p, const ModelConfig& cfg) {
    const Eigen::Index n = a.rows();
    const auto hd = static_cast<Eigen::Index>(cfg.head_dim);
    const Matrix q = detail::add_bias(a * p.wq, p.bq);
    const Matrix k = detail::add_bias(a * p.wk, p.bk);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Matrix> weights;
    weights.reserve(cfg.num_heads);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * hd;
        Matrix s = q.middleCols(off, hd) * k.middleCols(off, hd).transpose() * scale;
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::Index visible = cfg.causal ? i + 1 : n;
            const double mx = s.row(i).head(visible).maxCoeff();
            double total = 0.0;
            for (Eigen::Index j = 0; j < visible; ++j) {
                s(i, j) = std::exp(s(i, j) - mx);
                total += s(i, j);
            }
            s.row(i).head(visible) /= total;
            for (Eigen::Index j = visible; j < n; ++j) s(i, j) = 0.0;
        }
        weights.push_back(std::move(s));
    }
    return weights;
}

inline Matrix attention_output(const Matrix& a, const std::vector<Matrix>& alpha,
                               const LayerParams& p, const ModelConfig& cfg) {
    const auto hd = static_cast<Eigen::Index>(cfg.head_dim);
    const Matrix v = detail::add_bias(a * p.wv, p.bv);
    Matrix ctx(a.rows(), a.cols());
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * hd;
        ctx.middleCols(off, hd) = alpha[h] * v.middleCols(off, hd);
    }
    return detail::add_bias(ctx * p.wo, p.bo);
}

inline Matrix feed_forward(const Matrix& z, const LayerParams& p, ActivationKind kind) {
    const Activation g(kind);
    Matrix pre = detail::add_bias(z * p.w1, p.b1);
    pre = pre.unaryExpr([&g](double x) { return g.value(x); });
    return detail::add_bias(pre * p.w2, p.b2);
}

inline LayerTrace forward_layer(const Matrix& x, const LayerParams& p, const ModelConfig& cfg,
                                std::size_t layer_index = 0) {
    if (static_cast<std::size_t>(x.cols()) != cfg.hidden_dim)
        throw std::invalid_argument("forward_layer: input width does not match hidden_dim");
    detail::check_finite(x, layer_index, "input");
    const double eps = cfg.ln_epsilon;
    LayerTrace t;
    t.input = x;
    auto stage = [&](Matrix& slot, Matrix value, const char* name) {
        detail::check_finite(value, layer_index, name);
        slot = std::move(value);
    };
    if (cfg.architecture == Architecture::PostLN) {
        t.attention = attention_weights(x, p, cfg);
        stage(t.attn_out, attention_output(x, t.attention, p, cfg), "attn");
        stage(t.res1_out, t.attn_out + x, "res1");
        stage(t.ln1_out, layer_norm_rows(t.res1_out, p.ln1_gamma, p.ln1_beta, eps), "ln1");
        stage(t.ff_out, feed_forward(t.ln1_out, p, cfg.activation), "ff");
        stage(t.res2_out, t.ff_out + t.ln1_out, "res2");
        stage(t.ln2_out, layer_norm_rows(t.res2_out, p.ln2_gamma, p.ln2_beta, eps), "ln2");
        t.output = t.ln2_out;
    } else {
        stage(t.ln1_out, layer_norm_rows(x, p.ln1_gamma, p.ln1_beta, eps), "ln1");
        t.attention = attention_weights(t.ln1_out, p, cfg);
        stage(t.attn_out, attention_output(t.ln1_out, t.attention, p, cfg), "attn");
        stage(t.res1_out, t.attn_out + x, "res1");
        stage(t.ln2_out, layer_norm_rows(t.res1_out, p.ln2_gamma, p.ln2_beta, eps), "ln2");
        stage(t.ff_out, feed_forward(t.ln2_out, p, cfg.activation), "ff");
        stage(t.res2_out, t.ff_out + t.res1_out, "res2");
        t.output = t.res2_out;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Whole model

struct HiddenStates {
    Matrix embeddings;
    std::vector<LayerTrace> layers;
    std::optional<Matrix> final_norm;

    const Matrix& final() const {
        if (final_norm) return *final_norm;
        return layers.empty() ? embeddings : layers.back().output;
    }
};

inline HiddenStates forward_model(const TokenSequence& seq, const Model& model) {
    HiddenStates hs;
    hs.embeddings = embed(seq, model.embedding, model.config);
    hs.layers.reserve(model.layers.size());
    const Matrix* x = &hs.embeddings;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        hs.layers.push_back(forward_layer(*x, model.layers[l], model.config, l));
        x = &hs.layers.back().output;
    }
    if (model.final_ln)
        hs.final_norm = layer_norm_rows(*x, model.final_ln->gamma, model.final_ln->beta,
                                        model.config.ln_epsilon);
    return hs;
}

} // namespace lens
