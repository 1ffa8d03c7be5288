#pragma once

// Scores computed over attribution maps and forward traces:
// contextualization change, FF-amp matrices and their pair aggregation,
// FF/bypass norm reports and LN-cancellation diagnostics.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lens/decomp.hpp"
#include "lens/forward.hpp"
#include "lens/model.hpp"
#include "lens/stats.hpp"

namespace lens {

// ---------------------------------------------------------------------------
// Contextualization change

/// Row-major flattening; causal maps keep only the cells j <= i.
inline std::vector<double> flatten_map(const Matrix& map, bool causal) {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(map.size()));
    for (Eigen::Index i = 0; i < map.rows(); ++i) {
        const Eigen::Index cols = causal ? std::min<Eigen::Index>(i + 1, map.cols()) : map.cols();
        for (Eigen::Index j = 0; j < cols; ++j) out.push_back(map(i, j));
    }
    return out;
}

/// 1 − ρ between two maps of one sequence; nullopt when ρ is undefined
/// (a constant map or fewer than two cells).
inline std::optional<double> map_change(const Matrix& before, const Matrix& after, bool causal) {
    if (before.rows() != after.rows() || before.cols() != after.cols())
        throw std::invalid_argument("map_change: maps differ in shape");
    const auto a = flatten_map(before, causal);
    const auto b = flatten_map(after, causal);
    if (a.size() < 2) return std::nullopt;
    const auto rho = spearman_rho(a, b);
    if (!rho) return std::nullopt;
    return 1.0 - *rho;
}

struct ChangeScore {
    std::size_t layer = 0;
    Scope before = Scope::Atb;
    Scope after = Scope::Atb;
    double value = std::numeric_limits<double>::quiet_NaN();
    std::size_t num_sequences = 0;
    std::size_t num_dropped = 0;
};

/// Order-preserving mean of per-sequence changes; undefined ones are counted and skipped.
class ChangeAccumulator {
public:
    void add(std::optional<double> change) {
        if (change) {
            sum_ += *change;
            ++count_;
        } else {
            ++dropped_;
        }
    }

    ChangeScore score(std::size_t layer, Scope before, Scope after) const {
        ChangeScore s{layer, before, after, std::numeric_limits<double>::quiet_NaN(), count_, dropped_};
        if (count_ > 0) s.value = sum_ / static_cast<double>(count_);
        return s;
    }

private:
    double sum_ = 0.0;
    std::size_t count_ = 0;
    std::size_t dropped_ = 0;
};

inline ChangeScore contextualization_change(std::span<const Matrix> before, std::span<const Matrix> after,
                                            bool causal, std::size_t layer = 0,
                                            Scope scope_before = Scope::Atb, Scope scope_after = Scope::Atb) {
    if (before.size() != after.size())
        throw std::invalid_argument("contextualization_change: unpaired map sets");
    ChangeAccumulator acc;
    for (std::size_t s = 0; s < before.size(); ++s) acc.add(map_change(before[s], after[s], causal));
    return acc.score(layer, scope_before, scope_after);
}

/// Scope pair measuring the FF component's own change.
inline std::pair<Scope, Scope> ff_change_pair(Architecture a) {
    if (a == Architecture::PostLN) return {Scope::Atb, Scope::AtbFf};
    return {Scope::AtbLn, Scope::AtbLnFf};
}

/// Scope pair measuring the change caused by the layer norm of the feed-forward block.
inline std::pair<Scope, Scope> ln_change_pair(Architecture a) {
    if (a == Architecture::PostLN) return {Scope::AtbFfRes, Scope::AtbFfResLn};
    return {Scope::Atb, Scope::AtbLn};
}

/// Scope pair used for the dimension-masked change.
inline std::pair<Scope, Scope> masked_change_pair(Architecture a) {
    if (a == Architecture::PostLN) return {Scope::Atb, Scope::AtbFf};
    return {Scope::AtbLn, Scope::AtbLnFfRes};
}

/// Change between two scopes computed with masked norms (see LayerMapOptions::keep).
inline ChangeScore masked_dim_change(std::span<const LayerMaps> per_sequence, Architecture arch, bool causal,
                                     std::size_t layer, Scope before, Scope after) {
    const auto ib = scope_index(before, arch);
    const auto ia = scope_index(after, arch);
    ChangeAccumulator acc;
    for (const auto& m : per_sequence) {
        if (!m.masked) throw std::invalid_argument("masked_dim_change: maps were computed without a mask");
        acc.add(map_change((*m.masked)[ib], (*m.masked)[ia], causal));
    }
    return acc.score(layer, before, after);
}

// ---------------------------------------------------------------------------
// FF-amp

enum class NormalizationAxis { Row, Column };

inline std::string_view to_string(NormalizationAxis a) { return a == NormalizationAxis::Row ? "row" : "column"; }

struct AmpMatrix {
    std::size_t layer = 0;
    Matrix values;
    NormalizationAxis axis = NormalizationAxis::Row;
    /// Rows (or columns) that summed to zero in either map and were set to 0.
    std::vector<std::size_t> flagged;
};

/// Normalizes so that each output row (or column) sums to 1. Zero lines are
/// left at zero and reported through `zero_lines`.
inline Matrix normalize_map(const Matrix& map, NormalizationAxis axis, std::vector<bool>& zero_lines) {
    Matrix out = map;
    const bool by_row = axis == NormalizationAxis::Row;
    const Eigen::Index lines = by_row ? map.rows() : map.cols();
    zero_lines.assign(static_cast<std::size_t>(lines), false);
    for (Eigen::Index k = 0; k < lines; ++k) {
        const double total = by_row ? map.row(k).sum() : map.col(k).sum();
        if (total == 0.0) {
            zero_lines[static_cast<std::size_t>(k)] = true;
            continue;
        }
        if (by_row)
            out.row(k) /= total;
        else
            out.col(k) /= total;
    }
    return out;
}

/// Normalized post-FF map minus normalized pre-FF map.
inline AmpMatrix ff_amp(const Matrix& pre, const Matrix& post, NormalizationAxis axis = NormalizationAxis::Row,
                        std::size_t layer = 0) {
    if (pre.rows() != post.rows() || pre.cols() != post.cols())
        throw std::invalid_argument("ff_amp: maps differ in shape");
    if ((pre.array() < 0.0).any() || (post.array() < 0.0).any())
        throw std::invalid_argument("ff_amp: maps must be nonnegative");
    std::vector<bool> zero_pre, zero_post;
    const Matrix a = normalize_map(pre, axis, zero_pre);
    const Matrix b = normalize_map(post, axis, zero_post);
    AmpMatrix amp{layer, b - a, axis, {}};
    for (std::size_t k = 0; k < zero_pre.size(); ++k) {
        if (!zero_pre[k] && !zero_post[k]) continue;
        amp.flagged.push_back(k);
        if (axis == NormalizationAxis::Row)
            amp.values.row(static_cast<Eigen::Index>(k)).setZero();
        else
            amp.values.col(static_cast<Eigen::Index>(k)).setZero();
    }
    return amp;
}

// ---------------------------------------------------------------------------
// Pair aggregation

struct PairScore {
    std::string first;  // w_i (output token)
    std::string second; // w_j (input token)
    double mean = 0.0;
    std::size_t count = 0;
};

/// Mean FF-amp score per subword type pair (w_i, w_j) over a corpus.
class PairScoreTable {
public:
    void add(const std::string& wi, const std::string& wj, double score) {
        auto& slot = sums_[{wi, wj}];
        slot.first += score;
        ++slot.second;
    }

    /// Adds every off-diagonal cell of `amp`; causal models skip the cells j > i.
    void add_matrix(const Matrix& amp, const std::vector<std::string>& words, bool causal) {
        if (static_cast<std::size_t>(amp.rows()) != words.size() || amp.rows() != amp.cols())
            throw std::invalid_argument("PairScoreTable: word strings are not aligned with the map");
        for (Eigen::Index i = 0; i < amp.rows(); ++i) {
            const Eigen::Index cols = causal ? i + 1 : amp.cols();
            for (Eigen::Index j = 0; j < cols; ++j) {
                if (i == j) continue;
                add(words[static_cast<std::size_t>(i)], words[static_cast<std::size_t>(j)], amp(i, j));
            }
        }
    }

    void merge(const PairScoreTable& other) {
        for (const auto& [key, v] : other.sums_) {
            auto& slot = sums_[key];
            slot.first += v.first;
            slot.second += v.second;
        }
    }

    /// Pairs seen at least twice, in key order.
    std::vector<PairScore> entries() const {
        std::vector<PairScore> out;
        for (const auto& [key, v] : sums_) {
            if (v.second < 2) continue;
            out.push_back({key.first, key.second, v.first / static_cast<double>(v.second), v.second});
        }
        return out;
    }

    /// Entries sorted by mean descending; ties broken lexicographically.
    std::vector<PairScore> ranked() const {
        auto out = entries();
        std::stable_sort(out.begin(), out.end(), [](const PairScore& a, const PairScore& b) {
            if (a.mean != b.mean) return a.mean > b.mean;
            if (a.first != b.first) return a.first < b.first;
            return a.second < b.second;
        });
        return out;
    }

    std::vector<PairScore> top(std::size_t k) const {
        auto out = ranked();
        if (out.size() > k) out.resize(k);
        return out;
    }

private:
    std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> sums_;
};

// ---------------------------------------------------------------------------
// FF vs bypass norms

struct LayerNormStats {
    double mean_ff_norm = 0.0;
    double mean_bypass_norm = 0.0;
    std::size_t tokens = 0;
};

struct NormReport {
    std::vector<LayerNormStats> layers;
};

class NormAccumulator {
public:
    explicit NormAccumulator(std::size_t num_layers) : sums_(num_layers) {}

    void add(const HiddenStates& hs, Architecture arch) {
        for (std::size_t l = 0; l < hs.layers.size() && l < sums_.size(); ++l) {
            const auto& t = hs.layers[l];
            sums_[l].mean_ff_norm += t.ff_out.rowwise().norm().sum();
            sums_[l].mean_bypass_norm += t.ff_bypass(arch).rowwise().norm().sum();
            sums_[l].tokens += static_cast<std::size_t>(t.ff_out.rows());
        }
    }

    NormReport report() const {
        NormReport r{sums_};
        for (auto& l : r.layers) {
            if (l.tokens == 0) continue;
            l.mean_ff_norm /= static_cast<double>(l.tokens);
            l.mean_bypass_norm /= static_cast<double>(l.tokens);
        }
        return r;
    }

private:
    std::vector<LayerNormStats> sums_;
};

inline NormReport norm_report(std::span<const HiddenStates> traces, const ModelConfig& cfg) {
    NormAccumulator acc(cfg.num_layers);
    for (const auto& hs : traces) acc.add(hs, cfg.architecture);
    return acc.report();
}

// ---------------------------------------------------------------------------
// LN cancellation

/// γ of the layer norm that follows layer `l`'s FF output: LN2 under Post-LN,
/// the next layer's LN1 (or the final LN) under Pre-LN.
inline std::optional<Vector> following_gamma(const Model& model, std::size_t l) {
    if (model.config.architecture == Architecture::PostLN) return model.layers.at(l).ln2_gamma;
    if (l + 1 < model.layers.size()) return model.layers[l + 1].ln1_gamma;
    if (model.final_ln) return model.final_ln->gamma;
    return std::nullopt;
}

struct BottomDims {
    std::vector<std::size_t> dims; // ascending γ, ties by index
    bool below_resolution = false; // fraction of d rounds to zero; single dim used
};

/// The max(1, floor(pct/100 · d)) dimensions with the smallest γ.
inline BottomDims bottom_gamma_dims(const Vector& gamma, double pct = 1.0) {
    if (!(pct > 0.0 && pct < 100.0)) throw std::invalid_argument("bottom_gamma_dims: pct must lie in (0, 100)");
    const auto d = static_cast<std::size_t>(gamma.size());
    const auto raw = static_cast<std::size_t>(std::floor(pct / 100.0 * static_cast<double>(d)));
    BottomDims out;
    out.below_resolution = raw == 0;
    std::vector<std::size_t> idx(d);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return gamma[static_cast<Eigen::Index>(a)] < gamma[static_cast<Eigen::Index>(b)];
    });
    idx.resize(std::max<std::size_t>(1, raw));
    out.dims = std::move(idx);
    return out;
}

struct LayerLnCancel {
    Vector mean_abs_ff_out;
    Vector mean_abs_ff_in;
    std::optional<Vector> gamma;
    std::optional<double> pearson_r; // r(γ, mean|FF out|)
    BottomDims bottom;
};

struct LnCancelReport {
    std::vector<LayerLnCancel> layers;
};

class LnCancelAccumulator {
public:
    LnCancelAccumulator(std::size_t num_layers, std::size_t hidden_dim)
        : out_sums_(num_layers, Vector::Zero(static_cast<Eigen::Index>(hidden_dim))),
          in_sums_(num_layers, Vector::Zero(static_cast<Eigen::Index>(hidden_dim))), tokens_(num_layers, 0) {}

    void add(const HiddenStates& hs, Architecture arch) {
        for (std::size_t l = 0; l < hs.layers.size() && l < tokens_.size(); ++l) {
            const auto& t = hs.layers[l];
            out_sums_[l] += t.ff_out.cwiseAbs().colwise().sum();
            in_sums_[l] += t.ff_in(arch).cwiseAbs().colwise().sum();
            tokens_[l] += static_cast<std::size_t>(t.ff_out.rows());
        }
    }

    LnCancelReport report(const Model& model, double bottom_pct = 1.0) const {
        LnCancelReport r;
        for (std::size_t l = 0; l < tokens_.size(); ++l) {
            LayerLnCancel layer;
            const double n = tokens_[l] == 0 ? 1.0 : static_cast<double>(tokens_[l]);
            layer.mean_abs_ff_out = out_sums_[l] / n;
            layer.mean_abs_ff_in = in_sums_[l] / n;
            layer.gamma = following_gamma(model, l);
            if (layer.gamma) {
                const auto& g = *layer.gamma;
                const auto& m = layer.mean_abs_ff_out;
                if (g.size() >= 2)
                    layer.pearson_r = pearson(std::span<const double>(g.data(), static_cast<std::size_t>(g.size())),
                                              std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
                layer.bottom = bottom_gamma_dims(g, bottom_pct);
            }
            r.layers.push_back(std::move(layer));
        }
        return r;
    }

private:
    std::vector<Vector> out_sums_, in_sums_;
    std::vector<std::size_t> tokens_;
};

inline LnCancelReport ln_cancel_report(std::span<const HiddenStates> traces, const Model& model,
                                       double bottom_pct = 1.0) {
    LnCancelAccumulator acc(model.config.num_layers, model.config.hidden_dim);
    for (const auto& hs : traces) acc.add(hs, model.config.architecture);
    return acc.report(model, bottom_pct);
}

} // namespace lens
