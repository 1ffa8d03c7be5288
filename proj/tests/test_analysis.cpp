#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "lens/analysis.hpp"
#include "lens/random_model.hpp"
#include "lens/selfcheck.hpp"
#include "oracles.hpp"

using namespace lens;

namespace {

std::vector<TokenSequence> random_corpus(const ModelConfig& cfg, std::size_t count, std::uint64_t seed) {
    std::vector<TokenSequence> out;
    for (std::size_t k = 0; k < count; ++k)
        out.push_back(random_sequence(cfg, 3 + (k * 5) % 9, seed + k, "s" + std::to_string(k)));
    return out;
}

// Whole-state decomposition states, one per scope of the architecture.
std::array<DecompState, kScopesPerArchitecture> scope_states(const LayerParams& p, const ModelConfig& cfg,
                                                             const LayerTrace& t) {
    const auto arch = cfg.architecture;
    std::array<DecompState, kScopesPerArchitecture> out;
    auto keep = [&](const DecompState& s) {
        const auto stages = scope_stages(arch);
        for (std::size_t k = 0; k < stages.size(); ++k)
            if (stages[k] == s.stage) out[k] = s;
    };
    DecompState s = decompose_attention(t.input, p, t.attention, cfg);
    s = apply_residual(std::move(s), t.input);
    keep(s);
    if (arch == Architecture::PostLN) {
        s = apply_layernorm(std::move(s), p.ln1_gamma, p.ln1_beta, t.res1_out, cfg.ln_epsilon);
        keep(s);
        const DecompState bypass = s;
        s = apply_ff(std::move(s), p, cfg.activation);
        keep(s);
        s = apply_residual(std::move(s), bypass);
        keep(s);
        s = apply_layernorm(std::move(s), p.ln2_gamma, p.ln2_beta, t.res2_out, cfg.ln_epsilon);
        keep(s);
    } else {
        const DecompState bypass = s;
        s = apply_layernorm(std::move(s), p.ln2_gamma, p.ln2_beta, t.res1_out, cfg.ln_epsilon);
        keep(s);
        s = apply_ff(std::move(s), p, cfg.activation);
        keep(s);
        s = apply_residual(std::move(s), bypass);
        keep(s);
    }
    return out;
}

// Norms over the coordinates not listed in `dropped`.
Matrix masked_map(const DecompState& s, const std::vector<std::size_t>& dropped) {
    const auto n = static_cast<Eigen::Index>(s.size());
    Matrix m = Matrix::Zero(n, n);
    const std::set<std::size_t> drop(dropped.begin(), dropped.end());
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j) {
            const Vector c = s.contribution(i, j);
            double acc = 0.0;
            for (Eigen::Index k = 0; k < c.size(); ++k)
                if (!drop.count(static_cast<std::size_t>(k))) acc += c[k] * c[k];
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = std::sqrt(acc);
        }
    return m;
}

double mean_change(const std::vector<Matrix>& before, const std::vector<Matrix>& after, bool causal) {
    double sum = 0.0;
    int n = 0;
    for (std::size_t s = 0; s < before.size(); ++s) {
        oracle::Vec a, b;
        for (Eigen::Index i = 0; i < before[s].rows(); ++i)
            for (Eigen::Index j = 0; j < before[s].cols(); ++j) {
                if (causal && j > i) continue;
                a.push_back(before[s](i, j));
                b.push_back(after[s](i, j));
            }
        if (a.size() < 2) continue;
        sum += 1.0 - oracle::spearman(a, b);
        ++n;
    }
    return sum / n;
}

} // namespace

TEST(ForEachSequence, OrderedAndThreadIndependent) {
    std::vector<TokenSequence> corpus(23);
    for (std::size_t k = 0; k < corpus.size(); ++k) corpus[k].id = "q" + std::to_string(k);
    for (std::size_t threads : {1u, 2u, 5u}) {
        std::vector<std::size_t> order;
        for_each_sequence(
            corpus, threads, [](std::size_t k, const TokenSequence& s) { return s.id + "/" + std::to_string(k * k); },
            [&](std::size_t k, std::string r) {
                EXPECT_EQ(r, corpus[k].id + "/" + std::to_string(k * k));
                order.push_back(k);
            });
        ASSERT_EQ(order.size(), corpus.size());
        for (std::size_t k = 0; k < order.size(); ++k) EXPECT_EQ(order[k], k);
    }
}

TEST(ForEachSequence, ErrorsNameTheSequence) {
    std::vector<TokenSequence> corpus(6);
    for (std::size_t k = 0; k < corpus.size(); ++k) corpus[k].id = "q" + std::to_string(k);
    for (std::size_t threads : {1u, 3u}) {
        try {
            for_each_sequence(
                corpus, threads,
                [](std::size_t k, const TokenSequence&) {
                    if (k == 4) throw DataError("bad row");
                    return k;
                },
                [](std::size_t, std::size_t) {});
            FAIL() << "expected an error";
        } catch (const Error& e) {
            EXPECT_EQ(e.exit_code(), 2);
            EXPECT_NE(std::string(e.what()).find("'q4'"), std::string::npos) << e.what();
        }
    }
}

TEST(ModelInput, MaskingCountAndDeterminism) {
    const auto cfg = tiny_config(Architecture::PostLN, ActivationKind::GeluErf);
    const auto seq = random_sequence(cfg, 15, 4);
    RunOptions opts;
    opts.seed = 7;
    const auto a = model_input(seq, 3, cfg, opts);
    const auto b = model_input(seq, 3, cfg, opts);
    EXPECT_EQ(a.token_ids, b.token_ids);
    EXPECT_EQ(a.words, seq.words);
    std::size_t masked = 0;
    for (std::size_t k = 0; k < seq.size(); ++k) {
        if (a.token_ids[k] == kRandomMaskId) ++masked;
        else EXPECT_EQ(a.token_ids[k], seq.token_ids[k]);
    }
    EXPECT_EQ(masked, 2u); // round(0.12 * 15)

    std::set<std::vector<TokenId>> variants;
    for (std::size_t idx = 0; idx < 10; ++idx) variants.insert(model_input(seq, idx, cfg, opts).token_ids);
    EXPECT_GT(variants.size(), 1u);

    opts.mask_rate = 0.0;
    EXPECT_EQ(model_input(seq, 3, cfg, opts).token_ids, seq.token_ids);
    opts.mask_rate = 1.5;
    EXPECT_THROW(model_input(seq, 3, cfg, opts), UsageError);
}

TEST(ModelInput, SpecialTokensAreNeverMasked) {
    const auto cfg = tiny_config(Architecture::PostLN, ActivationKind::GeluErf);
    auto seq = random_sequence(cfg, 10, 4);
    seq.token_ids.front() = kRandomClsId;
    seq.token_ids.back() = kRandomSepId;
    RunOptions opts;
    opts.mask_rate = 1.0;
    const auto a = model_input(seq, 0, cfg, opts);
    EXPECT_EQ(a.token_ids.front(), kRandomClsId);
    EXPECT_EQ(a.token_ids.back(), kRandomSepId);
    for (std::size_t k = 1; k + 1 < a.size(); ++k) EXPECT_EQ(a.token_ids[k], kRandomMaskId);
}

TEST(ModelInput, CausalDefaultsToNoMaskAndMissingMaskTokenFails) {
    auto cfg = tiny_config(Architecture::PreLN, ActivationKind::GeluErf, 8, 2, 2, true);
    const auto seq = random_sequence(cfg, 8, 1);
    EXPECT_EQ(model_input(seq, 0, cfg, {}).token_ids, seq.token_ids);
    cfg.special_token_ids.erase("mask");
    RunOptions opts;
    opts.mask_rate = 0.2;
    EXPECT_THROW(model_input(seq, 0, cfg, opts), DataError);
}

TEST(RunMaps, SinkSeesEveryLayerInOrder) {
    const auto cfg = tiny_config(Architecture::PostLN, ActivationKind::GeluErf, 8, 2, 2);
    const Model m = random_model(cfg, 3);
    const auto corpus = random_corpus(cfg, 4, 10);
    RunOptions opts;
    opts.mask_rate = 0.0;
    std::vector<std::pair<std::size_t, std::size_t>> seen;
    run_maps(m, corpus, Scope::AtbFf, std::nullopt, opts,
             [&](std::size_t idx, const TokenSequence& seq, std::size_t layer, const Matrix& map) {
                 seen.emplace_back(idx, layer);
                 EXPECT_EQ(seq.id, corpus[idx].id);
                 const HiddenStates hs = forward_model(seq, m);
                 const auto expected = state_maps(m.layers[layer], cfg, hs.layers[layer]);
                 EXPECT_LT((map - expected[1]).cwiseAbs().maxCoeff(), 1e-10);
             });
    ASSERT_EQ(seen.size(), 8u);
    for (std::size_t k = 0; k < seen.size(); ++k) EXPECT_EQ(seen[k], std::make_pair(k / 2, k % 2));
    EXPECT_THROW(run_maps(m, corpus, Scope::AtbFf, 5, opts, [](auto&&...) {}), UsageError);
    EXPECT_THROW(run_maps(m, corpus, Scope::AtbLn, 0, opts, [](auto&&...) {}), UsageError);
}

TEST(RunStudy, MatchesManualRecomputation) {
    for (auto arch : {Architecture::PostLN, Architecture::PreLN}) {
        for (bool causal : {false, true}) {
            const auto cfg = tiny_config(arch, ActivationKind::GeluErf, 8, 2, 2, causal);
            const Model m = random_model(cfg, 17);
            const auto corpus = random_corpus(cfg, 6, 30);
            RunOptions opts;
            opts.seed = 5;
            opts.mask_rate = causal ? 0.0 : 0.25;

            StudyPlan plan;
            plan.change_pairs = {ff_change_pair(arch), ln_change_pair(arch)};
            plan.masked_change = true;
            plan.bottom_pct = 25.0;
            plan.amp_layers = {1};
            plan.norms = true;
            const auto r = run_study(m, corpus, plan, opts);
            EXPECT_EQ(r.sequences, corpus.size());
            EXPECT_LT(r.max_completeness_error, kCompletenessTolerance);

            const auto [mb, ma] = masked_change_pair(arch);
            for (std::size_t l = 0; l < cfg.num_layers; ++l) {
                std::vector<Matrix> ff_b, ff_a, ln_b, ln_a, mk_b, mk_a;
                const Vector& gamma = l + 1 < cfg.num_layers
                                          ? (arch == Architecture::PostLN ? m.layers[l].ln2_gamma : m.layers[l + 1].ln1_gamma)
                                          : (arch == Architecture::PostLN ? m.layers[l].ln2_gamma : m.final_ln->gamma);
                // Two smallest γ entries: floor(25% of 8).
                std::vector<std::size_t> idx(8);
                for (std::size_t k = 0; k < 8; ++k) idx[k] = k;
                std::sort(idx.begin(), idx.end(), [&](auto x, auto y) {
                    return gamma[static_cast<Eigen::Index>(x)] < gamma[static_cast<Eigen::Index>(y)];
                });
                const std::vector<std::size_t> dropped(idx.begin(), idx.begin() + 2);
                std::vector<std::size_t> got = r.masked_dims[l].dims;
                std::sort(got.begin(), got.end());
                std::vector<std::size_t> want = dropped;
                std::sort(want.begin(), want.end());
                EXPECT_EQ(got, want);

                for (std::size_t s = 0; s < corpus.size(); ++s) {
                    const HiddenStates hs = forward_model(model_input(corpus[s], s, cfg, opts), m);
                    const auto states = scope_states(m.layers[l], cfg, hs.layers[l]);
                    auto map = [&](Scope sc) { return attribution_map(states[scope_index(sc, arch)], sc).values; };
                    ff_b.push_back(map(ff_change_pair(arch).first));
                    ff_a.push_back(map(ff_change_pair(arch).second));
                    ln_b.push_back(map(ln_change_pair(arch).first));
                    ln_a.push_back(map(ln_change_pair(arch).second));
                    mk_b.push_back(masked_map(states[scope_index(mb, arch)], dropped));
                    mk_a.push_back(masked_map(states[scope_index(ma, arch)], dropped));
                }
                EXPECT_NEAR(r.changes[0][l].value, mean_change(ff_b, ff_a, causal), 1e-9);
                EXPECT_NEAR(r.changes[1][l].value, mean_change(ln_b, ln_a, causal), 1e-9);
                EXPECT_NEAR(r.masked_changes[l].value, mean_change(mk_b, mk_a, causal), 1e-9);

                if (l == 1) {
                    PairScoreTable manual;
                    for (std::size_t s = 0; s < corpus.size(); ++s)
                        manual.add_matrix(ff_amp(ff_b[s], ff_a[s]).values, corpus[s].words, causal);
                    const auto want_pairs = manual.ranked();
                    const auto got_pairs = r.amp[1].ranked();
                    ASSERT_EQ(got_pairs.size(), want_pairs.size());
                    for (std::size_t k = 0; k < got_pairs.size(); ++k) {
                        EXPECT_EQ(got_pairs[k].first, want_pairs[k].first);
                        EXPECT_EQ(got_pairs[k].count, want_pairs[k].count);
                        EXPECT_NEAR(got_pairs[k].mean, want_pairs[k].mean, 1e-9);
                    }
                }
            }
            EXPECT_TRUE(r.amp[0].entries().empty());
            ASSERT_TRUE(r.norms.has_value());
            EXPECT_EQ(r.norms->layers.size(), 2u);
        }
    }
}

TEST(RunStudy, ThreadCountDoesNotChangeResults) {
    const auto cfg = tiny_config(Architecture::PostLN, ActivationKind::GeluErf, 8, 2, 2);
    const Model m = random_model(cfg, 2);
    const auto corpus = random_corpus(cfg, 19, 3);
    StudyPlan plan;
    plan.change_pairs = {ff_change_pair(cfg.architecture)};
    plan.amp_layers = {0, 1};
    plan.ln_cancel = true;
    plan.norms = true;
    RunOptions one, many;
    one.seed = many.seed = 11;
    many.threads = 4;
    const auto a = run_study(m, corpus, plan, one);
    const auto b = run_study(m, corpus, plan, many);
    for (std::size_t l = 0; l < 2; ++l) {
        EXPECT_EQ(a.changes[0][l].value, b.changes[0][l].value);
        EXPECT_EQ(a.norms->layers[l].mean_ff_norm, b.norms->layers[l].mean_ff_norm);
        EXPECT_EQ(a.ln_cancel->layers[l].mean_abs_ff_out, b.ln_cancel->layers[l].mean_abs_ff_out);
        const auto pa = a.amp[l].ranked(), pb = b.amp[l].ranked();
        ASSERT_EQ(pa.size(), pb.size());
        for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_EQ(pa[k].mean, pb[k].mean);
    }
}

TEST(LayerAverage, SkipsUndefinedLayers) {
    std::vector<ChangeScore> s(3);
    s[0].value = 0.2;
    s[2].value = 0.4;
    EXPECT_NEAR(layer_average(s), 0.3, 1e-15);
    EXPECT_TRUE(std::isnan(layer_average(std::vector<ChangeScore>(2))));
}
