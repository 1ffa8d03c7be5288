#pragma once

// Seeded random models and sequences for tests and the self-check. Weights are
// rounded to float so that they survive a trip through the weight file unchanged.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "lens/model.hpp"
#include "lens/sequence.hpp"

namespace lens {

inline constexpr TokenId kRandomClsId = 0;
inline constexpr TokenId kRandomSepId = 1;
inline constexpr TokenId kRandomMaskId = 2;
inline constexpr TokenId kRandomFirstWordId = 3;

inline ModelConfig tiny_config(Architecture arch, ActivationKind act, std::size_t d = 8, std::size_t heads = 2,
                               std::size_t layers = 2, bool causal = false) {
    ModelConfig c;
    c.num_layers = layers;
    c.hidden_dim = d;
    c.ff_dim = 2 * d;
    c.num_heads = heads;
    c.head_dim = d / heads;
    c.architecture = arch;
    c.activation = act;
    c.vocab_size = 32;
    c.max_positions = 16;
    c.has_segment_embeddings = false;
    c.ln_epsilon = 1e-12;
    c.special_token_ids = {{"cls", kRandomClsId}, {"sep", kRandomSepId}, {"mask", kRandomMaskId}};
    c.causal = causal;
    return c;
}

class RandomWeights {
public:
    explicit RandomWeights(std::uint64_t seed) : rng_(seed) {}

    double normal(double sd) { return as_float(std::normal_distribution<double>(0.0, sd)(rng_)); }

    Matrix matrix(std::size_t r, std::size_t c, double sd) {
        Matrix m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = normal(sd);
        return m;
    }

    Vector vector(std::size_t n, double mean, double sd) {
        Vector v(static_cast<Eigen::Index>(n));
        for (Eigen::Index k = 0; k < v.size(); ++k) v[k] = as_float(mean + normal(sd));
        return v;
    }

    std::mt19937_64& engine() { return rng_; }

private:
    static double as_float(double v) { return static_cast<double>(static_cast<float>(v)); }

    std::mt19937_64 rng_;
};

/// Random model with roughly unit-scale activations. Pre-LN models get a final LN.
inline Model random_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    RandomWeights w(seed);
    const auto d = cfg.hidden_dim;
    const auto ff = cfg.ff_dim;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double sd_ff = 1.0 / std::sqrt(static_cast<double>(ff));
    Model m;
    m.config = cfg;
    m.embedding.token = w.matrix(cfg.vocab_size, d, 1.0);
    m.embedding.position = w.matrix(cfg.max_positions, d, 0.5);
    if (cfg.has_segment_embeddings) m.embedding.segment = w.matrix(2, d, 0.5);
    if (cfg.architecture == Architecture::PostLN) {
        m.embedding.ln_gamma = w.vector(d, 1.0, 0.1);
        m.embedding.ln_beta = w.vector(d, 0.0, 0.1);
    }
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        LayerParams p;
        p.wq = w.matrix(d, d, sd);
        p.wk = w.matrix(d, d, sd);
        p.wv = w.matrix(d, d, sd);
        p.wo = w.matrix(d, d, sd);
        p.bq = w.vector(d, 0.0, 0.1);
        p.bk = w.vector(d, 0.0, 0.1);
        p.bv = w.vector(d, 0.0, 0.1);
        p.bo = w.vector(d, 0.0, 0.1);
        p.w1 = w.matrix(d, ff, sd);
        p.b1 = w.vector(ff, 0.0, 0.1);
        p.w2 = w.matrix(ff, d, sd_ff);
        p.b2 = w.vector(d, 0.0, 0.1);
        p.ln1_gamma = w.vector(d, 1.0, 0.2);
        p.ln1_beta = w.vector(d, 0.0, 0.1);
        p.ln2_gamma = w.vector(d, 1.0, 0.2);
        p.ln2_beta = w.vector(d, 0.0, 0.1);
        m.layers.push_back(std::move(p));
    }
    if (cfg.architecture == Architecture::PreLN) m.final_ln = LayerNormParams{w.vector(d, 1.0, 0.2), w.vector(d, 0.0, 0.1)};
    m.validate();
    return m;
}

/// Sequence of `n` ordinary (non-special) tokens with words "w<id>".
inline TokenSequence random_sequence(const ModelConfig& cfg, std::size_t n, std::uint64_t seed, std::string id = "s") {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<TokenId> pick(kRandomFirstWordId, static_cast<TokenId>(cfg.vocab_size) - 1);
    TokenSequence s;
    s.id = std::move(id);
    for (std::size_t k = 0; k < n; ++k) {
        const TokenId t = pick(rng);
        s.token_ids.push_back(t);
        s.words.push_back("w" + std::to_string(t));
    }
    return s;
}

} // namespace lens
