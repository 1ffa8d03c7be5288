#pragma once

// Property checks over random tiny models: completeness at every stage, exact
// zeros above the diagonal for causal models, and agreement between the
// streaming row walk and the whole-state API.

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>

#include "lens/decomp.hpp"
#include "lens/forward.hpp"
#include "lens/random_model.hpp"

namespace lens {

struct SelfcheckReport {
    std::size_t cases = 0;
    double max_completeness_error = 0.0;
    double max_walk_vs_state = 0.0; // max |map difference| between the two decomposition paths
    std::size_t causal_violations = 0;

    bool ok() const {
        return cases > 0 && max_completeness_error < kCompletenessTolerance && max_walk_vs_state < 1e-9 &&
               causal_violations == 0;
    }
};

/// Whole-state decomposition of one layer, returning maps at its four scopes.
inline std::array<Matrix, kScopesPerArchitecture> state_maps(const LayerParams& p, const ModelConfig& cfg,
                                                             const LayerTrace& t, double* max_error = nullptr) {
    const auto arch = cfg.architecture;
    const auto scopes = scopes_for(arch);
    std::array<Matrix, kScopesPerArchitecture> out;
    auto record = [&](const DecompState& s) {
        if (max_error) *max_error = std::max(*max_error, verify_completeness(s, stage_output(t, s.stage)));
        for (std::size_t k = 0; k < scopes.size(); ++k)
            if (scope_stage(scopes[k], arch) == s.stage) out[k] = attribution_map(s, scopes[k]).values;
    };
    DecompState s = decompose_attention(t.input, p, t.attention, cfg);
    record(s);
    s = apply_residual(std::move(s), t.input);
    record(s);
    if (arch == Architecture::PostLN) {
        s = apply_layernorm(std::move(s), p.ln1_gamma, p.ln1_beta, t.res1_out, cfg.ln_epsilon);
        record(s);
        const DecompState bypass = s;
        s = apply_ff(std::move(s), p, cfg.activation);
        record(s);
        s = apply_residual(std::move(s), bypass);
        record(s);
        s = apply_layernorm(std::move(s), p.ln2_gamma, p.ln2_beta, t.res2_out, cfg.ln_epsilon);
        record(s);
    } else {
        const DecompState bypass = s;
        s = apply_layernorm(std::move(s), p.ln2_gamma, p.ln2_beta, t.res1_out, cfg.ln_epsilon);
        record(s);
        s = apply_ff(std::move(s), p, cfg.activation);
        record(s);
        s = apply_residual(std::move(s), bypass);
        record(s);
    }
    return out;
}

inline SelfcheckReport run_selfcheck(std::uint64_t seed = 0, std::size_t models_per_combo = 2) {
    SelfcheckReport r;
    std::uint64_t counter = seed;
    for (auto arch : {Architecture::PostLN, Architecture::PreLN}) {
        for (auto act : {ActivationKind::GeluErf, ActivationKind::GeluTanh, ActivationKind::Relu, ActivationKind::Silu,
                         ActivationKind::Identity}) {
            for (bool causal : {false, true}) {
                for (std::size_t rep = 0; rep < models_per_combo; ++rep) {
                    ++counter;
                    const std::size_t d = rep % 2 ? 16 : 8;
                    const std::size_t heads = rep % 2 ? 2 : 1;
                    const auto cfg = tiny_config(arch, act, d, heads, 2, causal);
                    const Model model = random_model(cfg, counter);
                    const auto seq = random_sequence(cfg, 1 + counter % 6, counter * 31 + 7);
                    const HiddenStates hs = forward_model(seq, model);
                    for (std::size_t l = 0; l < model.layers.size(); ++l) {
                        const LayerDecomposer dec(model.layers[l], cfg, hs.layers[l]);
                        const LayerMaps maps = analyze_layer_all(dec);
                        r.max_completeness_error = std::max(r.max_completeness_error, maps.max_completeness_error);
                        const auto whole = state_maps(model.layers[l], cfg, hs.layers[l], &r.max_completeness_error);
                        for (std::size_t k = 0; k < kScopesPerArchitecture; ++k) {
                            r.max_walk_vs_state =
                                std::max(r.max_walk_vs_state, (maps.maps[k] - whole[k]).cwiseAbs().maxCoeff());
                            if (!causal) continue;
                            const auto& m = maps.maps[k];
                            for (Eigen::Index i = 0; i < m.rows(); ++i)
                                for (Eigen::Index j = i + 1; j < m.cols(); ++j)
                                    if (m(i, j) != 0.0 || whole[k](i, j) != 0.0) ++r.causal_violations;
                        }
                    }
                    ++r.cases;
                }
            }
        }
    }
    return r;
}

} // namespace lens
