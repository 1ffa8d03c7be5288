#pragma once

// Corpus-level drivers. Sequences are processed independently (optionally on
// several threads) and folded into the results strictly in corpus order, so
// output does not depend on the thread count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <type_traits>
#include <utility>
#include <vector>

#include "lens/decomp.hpp"
#include "lens/error.hpp"
#include "lens/forward.hpp"
#include "lens/metrics.hpp"
#include "lens/model.hpp"
#include "lens/sequence.hpp"

namespace lens {

inline constexpr double kDefaultMaskRate = 0.12;

struct RunOptions {
    std::uint64_t seed = 0;
    std::optional<double> mask_rate; // unset: kDefaultMaskRate for non-causal models, 0 for causal
    std::size_t threads = 1;
};

inline double effective_mask_rate(const RunOptions& opts, const ModelConfig& cfg) {
    if (opts.mask_rate) return *opts.mask_rate;
    return cfg.causal ? 0.0 : kDefaultMaskRate;
}

/// splitmix64 of (seed, index): decorrelated per-sequence seeds.
inline std::uint64_t sequence_seed(std::uint64_t seed, std::size_t index) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(index) + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// The token ids actually fed to the model; words stay the original ones.
inline TokenSequence model_input(const TokenSequence& seq, std::size_t index, const ModelConfig& cfg,
                                 const RunOptions& opts) {
    const double rate = effective_mask_rate(opts, cfg);
    if (!(rate >= 0.0 && rate <= 1.0)) throw UsageError("mask rate must lie in [0, 1]");
    if (rate == 0.0) return seq;
    const auto mask = cfg.mask_id();
    if (!mask) throw DataError("mask rate " + std::to_string(rate) + " requested but the model defines no mask token");
    auto masked = mask_tokens(seq, rate, sequence_seed(opts.seed, index), *mask, cfg);
    masked.masked.words = seq.words;
    return std::move(masked.masked);
}

/// Maps work(index, seq) over the corpus and feeds each result to reduce(index, result)
/// in corpus order. Errors are rethrown with the sequence id attached.
template <class Work, class Reduce>
void for_each_sequence(const std::vector<TokenSequence>& corpus, std::size_t threads, Work&& work, Reduce&& reduce) {
    using Result = std::invoke_result_t<Work&, std::size_t, const TokenSequence&>;
    auto guarded = [&](std::size_t k) -> Result {
        try {
            return work(k, corpus[k]);
        } catch (const Error& e) {
            throw Error("sequence '" + corpus[k].id + "' (#" + std::to_string(k) + "): " + e.what(), e.exit_code());
        } catch (const std::exception& e) {
            throw NumericError("sequence '" + corpus[k].id + "' (#" + std::to_string(k) + "): " + e.what());
        }
    };
    threads = std::max<std::size_t>(1, threads);
    if (threads == 1) {
        for (std::size_t k = 0; k < corpus.size(); ++k) reduce(k, guarded(k));
        return;
    }
    const std::size_t batch = threads * 4;
    for (std::size_t begin = 0; begin < corpus.size(); begin += batch) {
        const std::size_t end = std::min(corpus.size(), begin + batch);
        std::vector<std::optional<Result>> results(end - begin);
        std::vector<std::exception_ptr> errors(end - begin);
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                for (std::size_t k = begin + t; k < end; k += threads) {
                    try {
                        results[k - begin].emplace(guarded(k));
                    } catch (...) {
                        errors[k - begin] = std::current_exception();
                    }
                }
            });
        }
        for (auto& th : pool) th.join();
        for (std::size_t k = begin; k < end; ++k) {
            if (errors[k - begin]) std::rethrow_exception(errors[k - begin]);
            reduce(k, std::move(*results[k - begin]));
        }
    }
}

// ---------------------------------------------------------------------------
// Per-sequence maps

/// Maps of every requested layer; `keeps[l]`, when present, adds masked maps for layer l.
inline std::vector<std::optional<LayerMaps>> sequence_maps(const Model& model, const HiddenStates& hs,
                                                           const std::vector<bool>& layers,
                                                           const std::vector<std::optional<Vector>>& keeps = {}) {
    std::vector<std::optional<LayerMaps>> out(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        if (!layers[l]) continue;
        const LayerDecomposer dec(model.layers[l], model.config, hs.layers[l]);
        LayerMapOptions opts;
        if (l < keeps.size()) opts.keep = keeps[l];
        out[l] = analyze_layer_all(dec, opts);
        if (!(out[l]->max_completeness_error <= kCompletenessTolerance))
            throw NumericError("layer " + std::to_string(l) + ": decomposition misses the forward output (relative error " +
                               std::to_string(out[l]->max_completeness_error) + ")");
    }
    return out;
}

/// Calls sink(index, original sequence, layer, map) for each sequence in corpus order.
inline void run_maps(const Model& model, const std::vector<TokenSequence>& corpus, Scope scope,
                     std::optional<std::size_t> layer, const RunOptions& opts,
                     const std::function<void(std::size_t, const TokenSequence&, std::size_t, const Matrix&)>& sink) {
    const auto& cfg = model.config;
    const std::size_t k = scope_index(scope, cfg.architecture);
    if (layer && *layer >= cfg.num_layers)
        throw UsageError("layer " + std::to_string(*layer) + " out of range (model has " + std::to_string(cfg.num_layers) + ")");
    std::vector<bool> wanted(cfg.num_layers, !layer);
    if (layer) wanted[*layer] = true;
    for_each_sequence(
        corpus, opts.threads,
        [&](std::size_t idx, const TokenSequence& seq) {
            const HiddenStates hs = forward_model(model_input(seq, idx, cfg, opts), model);
            std::vector<std::pair<std::size_t, Matrix>> maps;
            auto all = sequence_maps(model, hs, wanted);
            for (std::size_t l = 0; l < all.size(); ++l)
                if (all[l]) maps.emplace_back(l, std::move(all[l]->maps[k]));
            return maps;
        },
        [&](std::size_t idx, std::vector<std::pair<std::size_t, Matrix>> maps) {
            for (const auto& [l, m] : maps) sink(idx, corpus[idx], l, m);
        });
}

// ---------------------------------------------------------------------------
// Combined study over a corpus

struct StudyPlan {
    std::vector<std::pair<Scope, Scope>> change_pairs;
    bool masked_change = false; // on masked_change_pair(), bottom γ dims dropped
    double bottom_pct = 1.0;
    std::vector<std::size_t> amp_layers;
    NormalizationAxis axis = NormalizationAxis::Row;
    bool norms = false;
    bool ln_cancel = false;
};

struct StudyResult {
    std::vector<std::vector<ChangeScore>> changes; // [pair][layer]
    std::vector<ChangeScore> masked_changes;       // [layer]
    std::vector<BottomDims> masked_dims;           // [layer], empty dims when no γ follows
    std::vector<PairScoreTable> amp;               // [layer], filled for plan.amp_layers
    std::size_t amp_flagged_lines = 0;
    std::optional<NormReport> norms;
    std::optional<LnCancelReport> ln_cancel;
    double max_completeness_error = 0.0;
    std::size_t degenerate_rows = 0;
    std::size_t sequences = 0;
};

inline StudyResult run_study(const Model& model, const std::vector<TokenSequence>& corpus, const StudyPlan& plan,
                             const RunOptions& opts) {
    const auto& cfg = model.config;
    const auto arch = cfg.architecture;
    const std::size_t L = cfg.num_layers;
    for (const auto& [a, b] : plan.change_pairs) {
        scope_index(a, arch);
        scope_index(b, arch);
    }
    for (auto l : plan.amp_layers)
        if (l >= L) throw UsageError("layer " + std::to_string(l) + " out of range (model has " + std::to_string(L) + ")");

    StudyResult result;
    result.amp.resize(L);
    result.masked_dims.resize(L);
    std::vector<std::optional<Vector>> keeps(L);
    if (plan.masked_change) {
        for (std::size_t l = 0; l < L; ++l) {
            if (auto g = following_gamma(model, l)) {
                result.masked_dims[l] = bottom_gamma_dims(*g, plan.bottom_pct);
                keeps[l] = keep_mask(cfg.hidden_dim, result.masked_dims[l].dims);
            }
        }
    }
    std::vector<bool> amp_wanted(L, false);
    for (auto l : plan.amp_layers) amp_wanted[l] = true;
    const bool need_maps = !plan.change_pairs.empty() || plan.masked_change || !plan.amp_layers.empty();
    std::vector<bool> map_layers(L, false);
    for (std::size_t l = 0; l < L; ++l)
        map_layers[l] = need_maps && (!plan.change_pairs.empty() || plan.masked_change || amp_wanted[l]);

    struct Partial {
        std::vector<std::vector<std::optional<double>>> change; // [pair][layer]
        std::vector<std::optional<double>> masked;
        std::vector<PairScoreTable> amp;
        std::size_t flagged = 0;
        double max_err = 0.0;
        std::size_t degenerate = 0;
        std::optional<HiddenStates> hs;
    };

    std::vector<ChangeAccumulator> change_acc(plan.change_pairs.size() * L);
    std::vector<ChangeAccumulator> masked_acc(L);
    NormAccumulator norm_acc(L);
    LnCancelAccumulator ln_acc(L, cfg.hidden_dim);
    const auto [ff_before, ff_after] = ff_change_pair(arch);
    const auto [mk_before, mk_after] = masked_change_pair(arch);

    for_each_sequence(
        corpus, opts.threads,
        [&](std::size_t idx, const TokenSequence& seq) {
            Partial p;
            HiddenStates hs = forward_model(model_input(seq, idx, cfg, opts), model);
            if (need_maps) {
                const auto maps = sequence_maps(model, hs, map_layers, keeps);
                p.change.assign(plan.change_pairs.size(), std::vector<std::optional<double>>(L));
                p.masked.resize(L);
                p.amp.resize(L);
                for (std::size_t l = 0; l < L; ++l) {
                    if (!maps[l]) continue;
                    const auto& m = *maps[l];
                    p.max_err = std::max(p.max_err, m.max_completeness_error);
                    p.degenerate += m.degenerate_rows;
                    for (std::size_t c = 0; c < plan.change_pairs.size(); ++c) {
                        const auto& [a, b] = plan.change_pairs[c];
                        p.change[c][l] = map_change(m.maps[scope_index(a, arch)], m.maps[scope_index(b, arch)], cfg.causal);
                    }
                    if (m.masked)
                        p.masked[l] = map_change((*m.masked)[scope_index(mk_before, arch)],
                                                 (*m.masked)[scope_index(mk_after, arch)], cfg.causal);
                    if (amp_wanted[l]) {
                        const auto amp = ff_amp(m.maps[scope_index(ff_before, arch)], m.maps[scope_index(ff_after, arch)],
                                                plan.axis, l);
                        p.flagged += amp.flagged.size();
                        p.amp[l].add_matrix(amp.values, seq.words, cfg.causal);
                    }
                }
            }
            if (plan.norms || plan.ln_cancel) p.hs = std::move(hs);
            return p;
        },
        [&](std::size_t, Partial p) {
            ++result.sequences;
            result.max_completeness_error = std::max(result.max_completeness_error, p.max_err);
            result.degenerate_rows += p.degenerate;
            result.amp_flagged_lines += p.flagged;
            for (std::size_t c = 0; c < p.change.size(); ++c)
                for (std::size_t l = 0; l < L; ++l)
                    if (map_layers[l]) change_acc[c * L + l].add(p.change[c][l]);
            for (std::size_t l = 0; l < p.masked.size(); ++l)
                if (keeps[l]) masked_acc[l].add(p.masked[l]);
            for (std::size_t l = 0; l < p.amp.size(); ++l)
                if (amp_wanted[l]) result.amp[l].merge(p.amp[l]);
            if (p.hs) {
                if (plan.norms) norm_acc.add(*p.hs, arch);
                if (plan.ln_cancel) ln_acc.add(*p.hs, arch);
            }
        });

    result.changes.resize(plan.change_pairs.size());
    for (std::size_t c = 0; c < plan.change_pairs.size(); ++c)
        for (std::size_t l = 0; l < L; ++l)
            result.changes[c].push_back(change_acc[c * L + l].score(l, plan.change_pairs[c].first, plan.change_pairs[c].second));
    if (plan.masked_change)
        for (std::size_t l = 0; l < L; ++l) result.masked_changes.push_back(masked_acc[l].score(l, mk_before, mk_after));
    if (plan.norms) result.norms = norm_acc.report();
    if (plan.ln_cancel) result.ln_cancel = ln_acc.report(model, plan.bottom_pct);
    return result;
}

/// Mean of the defined layer scores; NaN if none is defined.
inline double layer_average(const std::vector<ChangeScore>& scores) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& s : scores) {
        if (std::isnan(s.value)) continue;
        sum += s.value;
        ++n;
    }
    return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

} // namespace lens
