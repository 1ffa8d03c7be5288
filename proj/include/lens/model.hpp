#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lens/config.hpp"

namespace lens {

/// Weights of one Transformer layer. Vectors are row vectors (x·W convention).
struct LayerParams {
    Matrix wq, wk, wv, wo; // d×d
    Vector bq, bk, bv, bo; // d
    Matrix w1;             // d×d'
    Vector b1;             // d'
    Matrix w2;             // d'×d
    Vector b2;             // d
    Vector ln1_gamma, ln1_beta;
    Vector ln2_gamma, ln2_beta;
};

struct EmbeddingParams {
    Matrix token;    // vocab×d
    Matrix position; // max_positions×d
    std::optional<Matrix> segment; // 2×d
    std::optional<Vector> ln_gamma, ln_beta;
};

struct LayerNormParams {
    Vector gamma, beta;
};

struct Model {
    ModelConfig config;
    EmbeddingParams embedding;
    std::vector<LayerParams> layers;
    // Trailing LN after the last layer (GPT-2 style); optional.
    std::optional<LayerNormParams> final_ln;

    void validate() const;
};

namespace detail {

inline void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols,
                         const std::string& name) {
    if (static_cast<std::size_t>(m.rows()) != rows || static_cast<std::size_t>(m.cols()) != cols)
        throw DataError("tensor '" + name + "': shape [" + std::to_string(m.rows()) + ", " +
                        std::to_string(m.cols()) + "] expected [" + std::to_string(rows) + ", " +
                        std::to_string(cols) + "]");
    if (!m.allFinite()) throw DataError("tensor '" + name + "': non-finite entries");
}

inline void expect_shape(const Vector& v, std::size_t size, const std::string& name) {
    if (static_cast<std::size_t>(v.size()) != size)
        throw DataError("tensor '" + name + "': length " + std::to_string(v.size()) +
                        " expected " + std::to_string(size));
    if (!v.allFinite()) throw DataError("tensor '" + name + "': non-finite entries");
}

} // namespace detail

inline void Model::validate() const {
    config.validate();
    const auto d = config.hidden_dim;
    const auto ff = config.ff_dim;
    using detail::expect_shape;
    expect_shape(embedding.token, config.vocab_size, d, "embed.token");
    expect_shape(embedding.position, config.max_positions, d, "embed.pos");
    if (config.has_segment_embeddings) {
        if (!embedding.segment) throw DataError("tensor 'embed.seg': missing");
        expect_shape(*embedding.segment, 2, d, "embed.seg");
    }
    if (embedding.ln_gamma.has_value() != embedding.ln_beta.has_value())
        throw DataError("embed.ln: gamma and beta must both be present or both absent");
    if (embedding.ln_gamma) {
        expect_shape(*embedding.ln_gamma, d, "embed.ln.gamma");
        expect_shape(*embedding.ln_beta, d, "embed.ln.beta");
    }
    if (layers.size() != config.num_layers)
        throw DataError("model has " + std::to_string(layers.size()) + " layers, config says " +
                        std::to_string(config.num_layers));
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const std::string p = "layer." + std::to_string(i) + ".";
        expect_shape(l.wq, d, d, p + "attn.q.weight");
        expect_shape(l.wk, d, d, p + "attn.k.weight");
        expect_shape(l.wv, d, d, p + "attn.v.weight");
        expect_shape(l.wo, d, d, p + "attn.o.weight");
        expect_shape(l.bq, d, p + "attn.q.bias");
        expect_shape(l.bk, d, p + "attn.k.bias");
        expect_shape(l.bv, d, p + "attn.v.bias");
        expect_shape(l.bo, d, p + "attn.o.bias");
        expect_shape(l.w1, d, ff, p + "ff.w1");
        expect_shape(l.b1, ff, p + "ff.b1");
        expect_shape(l.w2, ff, d, p + "ff.w2");
        expect_shape(l.b2, d, p + "ff.b2");
        expect_shape(l.ln1_gamma, d, p + "ln1.gamma");
        expect_shape(l.ln1_beta, d, p + "ln1.beta");
        expect_shape(l.ln2_gamma, d, p + "ln2.gamma");
        expect_shape(l.ln2_beta, d, p + "ln2.beta");
    }
    if (final_ln) {
        expect_shape(final_ln->gamma, d, "final_ln.gamma");
        expect_shape(final_ln->beta, d, "final_ln.beta");
    }
}

} // namespace lens
