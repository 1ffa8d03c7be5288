#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "lens/forward.hpp"
#include "lens/random_model.hpp"
#include "oracles.hpp"

using namespace lens;

namespace {

double max_diff(const Matrix& a, const oracle::Mat& b) {
    double m = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index k = 0; k < a.cols(); ++k)
            m = std::max(m, std::abs(a(i, k) - b[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]));
    return m;
}

} // namespace

TEST(LayerNorm, MatchesScalarFormula) {
    Vector z(5), g(5), b(5);
    z << 1.0, -2.0, 0.5, 3.0, 0.25;
    g << 1.0, 0.5, 2.0, -1.0, 0.3;
    b << 0.1, 0.0, -0.2, 0.3, 0.0;
    const Vector y = layer_norm(z, g, b, 1e-12);
    const auto expected = oracle::layer_norm(oracle::vec(z), oracle::vec(g), oracle::vec(b), 1e-12);
    for (Eigen::Index k = 0; k < 5; ++k) EXPECT_NEAR(y[k], expected[static_cast<std::size_t>(k)], 1e-14);
}

TEST(LayerNorm, ConstantInputGivesBeta) {
    Vector z = Vector::Constant(6, 2.5), g = Vector::Ones(6), b(6);
    b << 1, 2, 3, 4, 5, 6;
    EXPECT_TRUE(ln_stats(z, 1e-12).degenerate);
    EXPECT_EQ(layer_norm(z, g, b, 1e-12), b);
}

TEST(Forward, LayerMatchesScalarLoops) {
    for (auto arch : {Architecture::PostLN, Architecture::PreLN}) {
        for (auto act : {ActivationKind::GeluErf, ActivationKind::GeluTanh, ActivationKind::Relu, ActivationKind::Silu}) {
            for (bool causal : {false, true}) {
                const auto cfg = tiny_config(arch, act, 16, 2, 1, causal);
                const Model m = random_model(cfg, 100 + static_cast<int>(act));
                const auto seq = random_sequence(cfg, 5, 9);
                const Matrix x = embed(seq, m.embedding, cfg);
                const LayerTrace t = forward_layer(x, m.layers[0], cfg);
                EXPECT_LT(max_diff(t.output, oracle::forward_layer(oracle::mat(x), m.layers[0], cfg)), 1e-10);
            }
        }
    }
}

TEST(Forward, AttentionRowsAreStochasticAndCausal) {
    const auto cfg = tiny_config(Architecture::PreLN, ActivationKind::GeluErf, 8, 2, 1, true);
    const Model m = random_model(cfg, 3);
    const Matrix x = embed(random_sequence(cfg, 6, 4), m.embedding, cfg);
    const auto t = forward_layer(x, m.layers[0], cfg);
    ASSERT_EQ(t.attention.size(), 2u);
    for (const auto& a : t.attention) {
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-14);
            for (Eigen::Index j = i + 1; j < a.cols(); ++j) EXPECT_EQ(a(i, j), 0.0);
        }
    }
}

TEST(Forward, ModelChainsLayersAndFinalNorm) {
    const auto cfg = tiny_config(Architecture::PreLN, ActivationKind::GeluErf, 8, 2, 3);
    const Model m = random_model(cfg, 12);
    const auto hs = forward_model(random_sequence(cfg, 4, 1), m);
    ASSERT_EQ(hs.layers.size(), 3u);
    EXPECT_EQ(hs.layers[1].input, hs.layers[0].output);
    ASSERT_TRUE(hs.final_norm.has_value());
    EXPECT_EQ(hs.final(), layer_norm_rows(hs.layers[2].output, m.final_ln->gamma, m.final_ln->beta, cfg.ln_epsilon));
}

TEST(Forward, EmbeddingErrors) {
    const auto cfg = tiny_config(Architecture::PostLN, ActivationKind::GeluErf);
    const Model m = random_model(cfg, 1);
    TokenSequence empty;
    EXPECT_THROW(embed(empty, m.embedding, cfg), DataError);
    auto too_long = random_sequence(cfg, cfg.max_positions + 1, 1);
    EXPECT_THROW(embed(too_long, m.embedding, cfg), DataError);
    auto bad = random_sequence(cfg, 3, 1);
    bad.token_ids[1] = static_cast<TokenId>(cfg.vocab_size);
    try {
        embed(bad, m.embedding, cfg);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("position 1"), std::string::npos) << e.what();
    }
}

TEST(Forward, NonFiniteActivationsReportLayer) {
    const auto cfg = tiny_config(Architecture::PostLN, ActivationKind::GeluErf, 8, 2, 2);
    Model m = random_model(cfg, 1);
    m.layers[1].w1(0, 0) = std::numeric_limits<double>::infinity();
    try {
        forward_model(random_sequence(cfg, 3, 2), m);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
        EXPECT_EQ(e.exit_code(), 3);
    }
}
