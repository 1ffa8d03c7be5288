#pragma once

// Layer-wide decomposition of a Transformer layer into per-input vectors.
//
// For output position i the layer's state at any stage is held as
//
//     y_i = Σ_j F_i(x_j) + b
//
// where row j of RowDecomp::parts is F_i(x_j) and RowDecomp::bias is b. Every
// component maps such a sum to another such sum: attention and the residual
// connections are linear, layer normalization is linear once s(z) is fixed by
// the actual input, and the FF activation is split with Integrated Gradients
// (the bias b participates as one more IG input and stays in the bias channel).
//
// Components after attention act on each output row independently, so the
// engine works row by row (LayerDecomposer::walk). DecompState keeps all rows
// and exposes the component operations one at a time.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lens/activation.hpp"
#include "lens/forward.hpp"
#include "lens/ig.hpp"
#include "lens/model.hpp"

namespace lens {

// ---------------------------------------------------------------------------
// Scopes and stages

enum class Scope { Atb, AtbFf, AtbFfRes, AtbFfResLn, AtbLn, AtbLnFf, AtbLnFfRes };

/// Component whose output a decomposition currently represents.
enum class Stage { Attn, Res1, Ln1, Ff, Res2, Ln2 };

inline constexpr std::size_t kScopesPerArchitecture = 4;

inline std::string_view to_string(Scope s) {
    switch (s) {
    case Scope::Atb: return "atb";
    case Scope::AtbFf: return "atbff";
    case Scope::AtbFfRes: return "atbffres";
    case Scope::AtbFfResLn: return "atbffresln";
    case Scope::AtbLn: return "atbln";
    case Scope::AtbLnFf: return "atblnff";
    case Scope::AtbLnFfRes: return "atblnffres";
    }
    return "?";
}

inline std::string_view to_string(Stage s) {
    switch (s) {
    case Stage::Attn: return "attn";
    case Stage::Res1: return "res1";
    case Stage::Ln1: return "ln1";
    case Stage::Ff: return "ff";
    case Stage::Res2: return "res2";
    case Stage::Ln2: return "ln2";
    }
    return "?";
}

inline Scope parse_scope(std::string_view text) {
    std::string lower(text);
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    for (auto s : {Scope::Atb, Scope::AtbFf, Scope::AtbFfRes, Scope::AtbFfResLn, Scope::AtbLn,
                   Scope::AtbLnFf, Scope::AtbLnFfRes}) {
        if (to_string(s) == lower) return s;
    }
    throw UsageError("unknown scope '" + std::string(text) + "'");
}

inline constexpr std::array<Scope, kScopesPerArchitecture> scopes_for(Architecture a) {
    if (a == Architecture::PostLN) return {Scope::Atb, Scope::AtbFf, Scope::AtbFfRes, Scope::AtbFfResLn};
    return {Scope::Atb, Scope::AtbLn, Scope::AtbLnFf, Scope::AtbLnFfRes};
}

/// Position of `s` in its architecture's scope list; throws for a scope of the other family.
inline std::size_t scope_index(Scope s, Architecture a) {
    const auto list = scopes_for(a);
    for (std::size_t k = 0; k < list.size(); ++k)
        if (list[k] == s) return k;
    throw UsageError("scope '" + std::string(to_string(s)) + "' is not defined for " +
                     std::string(to_string(a)) + " models");
}

inline constexpr std::array<Stage, kScopesPerArchitecture> scope_stages(Architecture a) {
    if (a == Architecture::PostLN) return {Stage::Ln1, Stage::Ff, Stage::Res2, Stage::Ln2};
    return {Stage::Res1, Stage::Ln2, Stage::Ff, Stage::Res2};
}

inline Stage scope_stage(Scope s, Architecture a) { return scope_stages(a)[scope_index(s, a)]; }

/// Recorded forward output corresponding to a stage.
inline const Matrix& stage_output(const LayerTrace& t, Stage s) {
    switch (s) {
    case Stage::Attn: return t.attn_out;
    case Stage::Res1: return t.res1_out;
    case Stage::Ln1: return t.ln1_out;
    case Stage::Ff: return t.ff_out;
    case Stage::Res2: return t.res2_out;
    case Stage::Ln2: return t.ln2_out;
    }
    return t.output;
}

// ---------------------------------------------------------------------------
// One output row

/// Decomposition of a single output vector y_i. `parts` has one row per
/// attributable input; for causal models only inputs j <= i are stored and the
/// rest are implicitly zero.
struct RowDecomp {
    Matrix parts;
    Vector bias;

    Vector sum() const { return parts.colwise().sum() + bias; }
};

/// ‖sum − reference‖ / ‖reference‖, with 0/0 read as 0.
inline double relative_error(const Vector& sum, const Vector& reference) {
    const double err = (sum - reference).norm();
    const double ref = reference.norm();
    if (ref == 0.0) return err == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return err / ref;
}

/// RES1: the bypass of output i is input x_i itself.
inline void add_bypass_diagonal(RowDecomp& row, std::size_t i, const Vector& x_i) {
    row.parts.row(static_cast<Eigen::Index>(i)) += x_i;
}

/// RES2: the bypass is itself a decomposition of the same output row.
inline void add_bypass(RowDecomp& row, const RowDecomp& bypass) {
    if (row.parts.rows() != bypass.parts.rows() || row.parts.cols() != bypass.parts.cols())
        throw std::invalid_argument("add_bypass: decomposition shapes differ");
    row.parts += bypass.parts;
    row.bias += bypass.bias;
}

/// Tolerance for "the decomposition sums to the LN input".
inline constexpr double kLnInputTolerance = 1e-6;

/// Largest accepted relative error between a decomposition and the forward pass.
inline constexpr double kCompletenessTolerance = 1e-6;

/// LN applied to Σ parts + bias, with s(z) taken from the actual input z.
/// Returns true when z is constant (all parts mapped to zero, bias = β).
inline bool layernorm_row(RowDecomp& row, const Vector& z, const Vector& gamma, const Vector& beta,
                          double eps) {
    const double mismatch = (row.sum() - z).norm();
    if (!(mismatch <= kLnInputTolerance * z.norm() + 1e-12))
        throw NumericError("layer norm input does not match the decomposition (|diff| = " +
                           std::to_string(mismatch) + ")");
    const LnStats s = ln_stats(z, eps);
    if (s.degenerate) {
        row.parts.setZero();
        row.bias = beta;
        return true;
    }
    const Eigen::VectorXd means = row.parts.rowwise().mean();
    row.parts.colwise() -= means;
    row.parts = (row.parts.array().rowwise() * (gamma.array() / s.scale)).matrix();
    const double bias_mean = row.bias.mean();
    row.bias = ((row.bias.array() - bias_mean) * gamma.array() / s.scale + beta.array()).matrix();
    return false;
}

/// FF with the activation split by IG over the n parts plus the bias.
inline void ff_row(RowDecomp& row, const LayerParams& p, const Activation& g) {
    Matrix pre = row.parts * p.w1;
    Vector bias_pre = row.bias * p.w1 + p.b1;
    if (!pre.allFinite() || !bias_pre.allFinite())
        throw NumericError("non-finite FF pre-activation in decomposition");
    const Vector sums = pre.colwise().sum() + bias_pre;
    Vector ratio(sums.size());
    for (Eigen::Index k = 0; k < sums.size(); ++k) ratio[k] = ig_ratio(sums[k], g);
    pre.array().rowwise() *= ratio.array();
    bias_pre.array() *= ratio.array();
    row.parts = pre * p.w2;
    row.bias = bias_pre * p.w2 + p.b2;
}

// ---------------------------------------------------------------------------
// Attention

/// Precomputes per-head transformed values (u_j W_V^h) W_O^h so that the
/// attention decomposition of any output row is a weighted sum over heads.
/// Under Pre-LN, u_j is LN1(x_j) − β1 (the input-dependent part) and β1 flows
/// into the bias.
class AttentionDecomposer {
public:
    AttentionDecomposer(const Matrix& x, const std::vector<Matrix>& alpha, const LayerParams& p,
                        const ModelConfig& cfg)
        : alpha_(&alpha), causal_(cfg.causal) {
        const auto n = x.rows();
        check_alpha(alpha, n, cfg);
        Matrix u = x;
        Vector value_offset = Vector::Zero(x.cols());
        if (cfg.architecture == Architecture::PreLN) {
            for (Eigen::Index j = 0; j < n; ++j) {
                const Vector xj = x.row(j);
                const LnStats s = ln_stats(xj, cfg.ln_epsilon);
                if (s.degenerate)
                    u.row(j).setZero();
                else
                    u.row(j) = ((xj.array() - s.mean) / s.scale * p.ln1_gamma.array()).matrix();
            }
            value_offset = p.ln1_beta;
        }
        const auto hd = static_cast<Eigen::Index>(cfg.head_dim);
        const Matrix uv = u * p.wv;
        value_out_.reserve(cfg.num_heads);
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            const auto off = static_cast<Eigen::Index>(h) * hd;
            value_out_.push_back(uv.middleCols(off, hd) * p.wo.middleRows(off, hd));
        }
        bias_ = (value_offset * p.wv + p.bv) * p.wo + p.bo;
    }

    std::size_t size() const { return static_cast<std::size_t>(value_out_.front().rows()); }

    std::size_t active_inputs(std::size_t i) const { return causal_ ? i + 1 : size(); }

    RowDecomp row(std::size_t i) const {
        const auto m = static_cast<Eigen::Index>(active_inputs(i));
        const auto ii = static_cast<Eigen::Index>(i);
        RowDecomp r{Matrix::Zero(m, value_out_.front().cols()), bias_};
        for (std::size_t h = 0; h < value_out_.size(); ++h) {
            const auto weights = (*alpha_)[h].row(ii).head(m).transpose();
            r.parts.array() += value_out_[h].topRows(m).array().colwise() * weights.array();
        }
        return r;
    }

private:
    static void check_alpha(const std::vector<Matrix>& alpha, Eigen::Index n, const ModelConfig& cfg) {
        if (alpha.size() != cfg.num_heads)
            throw std::invalid_argument("attention weights: expected " + std::to_string(cfg.num_heads) +
                                        " heads, got " + std::to_string(alpha.size()));
        for (const auto& a : alpha) {
            if (a.rows() != n || a.cols() != n)
                throw std::invalid_argument("attention weights: shape does not match sequence length");
            for (Eigen::Index i = 0; i < n; ++i) {
                if ((a.row(i).array() < 0.0).any() || std::abs(a.row(i).sum() - 1.0) > 1e-6)
                    throw std::invalid_argument("attention weights: row " + std::to_string(i) +
                                                " is not a probability distribution");
            }
        }
    }

    const std::vector<Matrix>* alpha_;
    bool causal_;
    std::vector<Matrix> value_out_;
    Vector bias_;
};

// ---------------------------------------------------------------------------
// Streaming row walk through a whole layer

class LayerDecomposer {
public:
    LayerDecomposer(const LayerParams& p, const ModelConfig& cfg, const LayerTrace& trace)
        : params_(&p), cfg_(&cfg), trace_(&trace), attention_(trace.input, trace.attention, p, cfg),
          activation_(cfg.activation) {}

    std::size_t size() const { return attention_.size(); }
    std::size_t active_inputs(std::size_t i) const { return attention_.active_inputs(i); }
    const LayerTrace& trace() const { return *trace_; }
    Architecture architecture() const { return cfg_->architecture; }

    /// Runs the components of output row i in architecture order, calling
    /// visit(stage, row) after each, and stops after `last`.
    /// Returns true if any layer norm met a constant input.
    template <class Visit>
    bool walk(std::size_t i, Visit&& visit, std::optional<Stage> last = std::nullopt) const {
        const auto& p = *params_;
        const auto& t = *trace_;
        const auto ii = static_cast<Eigen::Index>(i);
        const double eps = cfg_->ln_epsilon;
        bool degenerate = false;
        RowDecomp row = attention_.row(i);
        auto emit = [&](Stage s) {
            visit(s, static_cast<const RowDecomp&>(row));
            return last && *last == s;
        };
        if (emit(Stage::Attn)) return degenerate;
        add_bypass_diagonal(row, i, t.input.row(ii));
        if (emit(Stage::Res1)) return degenerate;
        if (cfg_->architecture == Architecture::PostLN) {
            degenerate |= layernorm_row(row, t.res1_out.row(ii), p.ln1_gamma, p.ln1_beta, eps);
            if (emit(Stage::Ln1)) return degenerate;
            const RowDecomp bypass = row;
            ff_row(row, p, activation_);
            if (emit(Stage::Ff)) return degenerate;
            add_bypass(row, bypass);
            if (emit(Stage::Res2)) return degenerate;
            degenerate |= layernorm_row(row, t.res2_out.row(ii), p.ln2_gamma, p.ln2_beta, eps);
            emit(Stage::Ln2);
        } else {
            const RowDecomp bypass = row;
            degenerate |= layernorm_row(row, t.res1_out.row(ii), p.ln2_gamma, p.ln2_beta, eps);
            if (emit(Stage::Ln2)) return degenerate;
            ff_row(row, p, activation_);
            if (emit(Stage::Ff)) return degenerate;
            add_bypass(row, bypass);
            emit(Stage::Res2);
        }
        return degenerate;
    }

private:
    const LayerParams* params_;
    const ModelConfig* cfg_;
    const LayerTrace* trace_;
    AttentionDecomposer attention_;
    Activation activation_;
};

// ---------------------------------------------------------------------------
// Attribution maps

/// n×n matrix of contribution norms ‖F_i(x_j)‖ at one scope.
struct AttributionMap {
    std::size_t layer = 0;
    Scope scope = Scope::Atb;
    Matrix values;
};

/// Norms of each part; coordinates with keep[k] == 0 are excluded.
inline Eigen::VectorXd part_norms(const Matrix& parts, const std::optional<Vector>& keep = std::nullopt) {
    if (!keep) return parts.rowwise().norm();
    return (parts.array().square().rowwise() * keep->array()).rowwise().sum().sqrt();
}

/// Keep-mask with zeros at `excluded` coordinates.
inline Vector keep_mask(std::size_t dim, const std::vector<std::size_t>& excluded) {
    Vector keep = Vector::Ones(static_cast<Eigen::Index>(dim));
    for (auto k : excluded) {
        if (k >= dim) throw std::invalid_argument("keep_mask: dimension index out of range");
        keep[static_cast<Eigen::Index>(k)] = 0.0;
    }
    if (dim > 0 && keep.sum() == 0.0) throw std::invalid_argument("keep_mask: every dimension is masked");
    return keep;
}

/// Maps of one layer at all four scopes of its architecture.
struct LayerMaps {
    std::array<Matrix, kScopesPerArchitecture> maps;
    std::optional<std::array<Matrix, kScopesPerArchitecture>> masked;
    double max_completeness_error = 0.0;
    std::size_t degenerate_rows = 0;
};

struct LayerMapOptions {
    /// When set, masked maps are produced as well, with these coordinates dropped from the norms.
    std::optional<Vector> keep;
};

/// Streams every output row through the layer, keeping only norms (O(n·d') per row).
inline LayerMaps analyze_layer_all(const LayerDecomposer& dec, const LayerMapOptions& opts = {}) {
    const auto n = static_cast<Eigen::Index>(dec.size());
    const auto stages = scope_stages(dec.architecture());
    LayerMaps out;
    for (auto& m : out.maps) m = Matrix::Zero(n, n);
    if (opts.keep) {
        out.masked.emplace();
        for (auto& m : *out.masked) m = Matrix::Zero(n, n);
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        const bool degenerate = dec.walk(static_cast<std::size_t>(i), [&](Stage s, const RowDecomp& row) {
            const double err = relative_error(row.sum(), stage_output(dec.trace(), s).row(i));
            out.max_completeness_error = std::max(out.max_completeness_error, err);
            for (std::size_t k = 0; k < stages.size(); ++k) {
                if (stages[k] != s) continue;
                const auto m = row.parts.rows();
                out.maps[k].row(i).head(m) = part_norms(row.parts).transpose();
                if (opts.keep) (*out.masked)[k].row(i).head(m) = part_norms(row.parts, opts.keep).transpose();
            }
        });
        if (degenerate) ++out.degenerate_rows;
    }
    return out;
}

/// Attribution map of one layer at one scope, running the forward pass first.
inline AttributionMap analyze_layer(const Matrix& x, const LayerParams& p, const ModelConfig& cfg,
                                    Scope scope, std::size_t layer_index = 0) {
    const Stage target = scope_stage(scope, cfg.architecture);
    const LayerTrace trace = forward_layer(x, p, cfg, layer_index);
    const LayerDecomposer dec(p, cfg, trace);
    const auto n = static_cast<Eigen::Index>(dec.size());
    AttributionMap map{layer_index, scope, Matrix::Zero(n, n)};
    for (Eigen::Index i = 0; i < n; ++i) {
        dec.walk(
            static_cast<std::size_t>(i),
            [&](Stage s, const RowDecomp& row) {
                if (s == target) map.values.row(i).head(row.parts.rows()) = part_norms(row.parts).transpose();
            },
            target);
    }
    return map;
}

// ---------------------------------------------------------------------------
// Whole-state API: one component at a time over all output rows

struct DecompState {
    Architecture architecture = Architecture::PostLN;
    Stage stage = Stage::Attn;
    std::vector<RowDecomp> rows;
    std::size_t degenerate_rows = 0;

    std::size_t size() const { return rows.size(); }

    /// F_i(x_j); the zero vector for inputs masked out by causality.
    Vector contribution(std::size_t i, std::size_t j) const {
        const auto& r = rows.at(i);
        if (static_cast<Eigen::Index>(j) >= r.parts.rows()) return Vector::Zero(r.bias.size());
        return r.parts.row(static_cast<Eigen::Index>(j));
    }

    Matrix reconstruct() const {
        Matrix out(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : rows.front().bias.size());
        for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows[i].sum();
        return out;
    }
};

namespace detail {

inline void require_stage(const DecompState& s, std::initializer_list<Stage> allowed, const char* op) {
    for (Stage a : allowed)
        if (s.stage == a) return;
    throw std::logic_error(std::string(op) + ": not applicable to a decomposition at stage '" +
                           std::string(to_string(s.stage)) + "'");
}

} // namespace detail

inline DecompState decompose_attention(const Matrix& x, const LayerParams& p,
                                       const std::vector<Matrix>& alpha, const ModelConfig& cfg) {
    const AttentionDecomposer att(x, alpha, p, cfg);
    DecompState s{cfg.architecture, Stage::Attn, {}, 0};
    s.rows.reserve(att.size());
    for (std::size_t i = 0; i < att.size(); ++i) s.rows.push_back(att.row(i));
    return s;
}

/// RES1: adds each input x_i to its own diagonal entry.
inline DecompState apply_residual(DecompState s, const Matrix& inputs) {
    detail::require_stage(s, {Stage::Attn}, "apply_residual (RES1)");
    if (static_cast<std::size_t>(inputs.rows()) != s.size())
        throw std::invalid_argument("apply_residual: input count does not match the decomposition");
    for (std::size_t i = 0; i < s.size(); ++i)
        add_bypass_diagonal(s.rows[i], i, inputs.row(static_cast<Eigen::Index>(i)));
    s.stage = Stage::Res1;
    return s;
}

/// RES2: adds the bypassed decomposition entry-wise.
inline DecompState apply_residual(DecompState s, const DecompState& bypass) {
    detail::require_stage(s, {Stage::Ff}, "apply_residual (RES2)");
    const Stage expected = s.architecture == Architecture::PostLN ? Stage::Ln1 : Stage::Res1;
    if (bypass.stage != expected || bypass.size() != s.size())
        throw std::logic_error("apply_residual (RES2): bypass must be the " +
                               std::string(to_string(expected)) + " decomposition of the same sequence");
    for (std::size_t i = 0; i < s.size(); ++i) add_bypass(s.rows[i], bypass.rows[i]);
    s.stage = Stage::Res2;
    return s;
}

/// LN over each row; `z` holds the actual LN inputs (one row per output).
inline DecompState apply_layernorm(DecompState s, const Vector& gamma, const Vector& beta,
                                   const Matrix& z, double eps) {
    if (s.architecture == Architecture::PostLN)
        detail::require_stage(s, {Stage::Res1, Stage::Res2}, "apply_layernorm");
    else
        detail::require_stage(s, {Stage::Res1}, "apply_layernorm");
    if (static_cast<std::size_t>(z.rows()) != s.size())
        throw std::invalid_argument("apply_layernorm: input count does not match the decomposition");
    for (std::size_t i = 0; i < s.size(); ++i)
        if (layernorm_row(s.rows[i], z.row(static_cast<Eigen::Index>(i)), gamma, beta, eps)) ++s.degenerate_rows;
    if (s.architecture == Architecture::PostLN)
        s.stage = s.stage == Stage::Res1 ? Stage::Ln1 : Stage::Ln2;
    else
        s.stage = Stage::Ln2;
    return s;
}

inline DecompState apply_ff(DecompState s, const LayerParams& p, ActivationKind kind) {
    detail::require_stage(s, {s.architecture == Architecture::PostLN ? Stage::Ln1 : Stage::Ln2}, "apply_ff");
    const Activation g(kind);
    for (auto& row : s.rows) ff_row(row, p, g);
    s.stage = Stage::Ff;
    return s;
}

/// max_i ‖Σ_j F_i(x_j) + b − y_i‖ / ‖y_i‖.
inline double verify_completeness(const DecompState& s, const Matrix& reference) {
    if (static_cast<std::size_t>(reference.rows()) != s.size())
        throw std::invalid_argument("verify_completeness: reference row count differs");
    double worst = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
        worst = std::max(worst, relative_error(s.rows[i].sum(), reference.row(static_cast<Eigen::Index>(i))));
    return worst;
}

inline AttributionMap attribution_map(const DecompState& s, Scope scope, std::size_t layer = 0) {
    if (scope_stage(scope, s.architecture) != s.stage)
        throw std::logic_error("attribution_map: decomposition stage does not match scope '" +
                               std::string(to_string(scope)) + "'");
    const auto n = static_cast<Eigen::Index>(s.size());
    AttributionMap map{layer, scope, Matrix::Zero(n, n)};
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = s.rows[static_cast<std::size_t>(i)];
        map.values.row(i).head(r.parts.rows()) = part_norms(r.parts).transpose();
    }
    return map;
}

} // namespace lens
