// Command-line front-end: runs the analyses over a weight file and a corpus and
// writes CSV / map dumps. Exit status: 0 ok, 1 usage, 2 data, 3 numeric.

#include <algorithm>
#include <cstdio>
#include <limits>
#include <map>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "lens/lens.hpp"

namespace fs = std::filesystem;
using namespace lens;

namespace {

struct Globals {
    std::uint64_t seed = 0;
    std::optional<double> mask_rate;
    std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
    std::string precision = "f64";

    RunOptions run() const { return {seed, mask_rate, threads}; }
};

std::string join(const std::vector<std::size_t>& v, char sep = ' ') {
    std::string out;
    for (std::size_t k = 0; k < v.size(); ++k) {
        if (k) out += sep;
        out += std::to_string(v[k]);
    }
    return out;
}

std::pair<Scope, Scope> parse_scope_pair(const std::string& text) {
    const auto comma = text.find(',');
    if (comma == std::string::npos || text.find(',', comma + 1) != std::string::npos)
        throw UsageError("--scopes expects two scopes separated by a comma, got '" + text + "'");
    return {parse_scope(text.substr(0, comma)), parse_scope(text.substr(comma + 1))};
}

NormalizationAxis parse_axis(const std::string& s) {
    if (s == "row") return NormalizationAxis::Row;
    if (s == "column") return NormalizationAxis::Column;
    throw UsageError("--axis must be row or column");
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory '" + dir.string() + "'");
}

std::vector<std::string> pair_row(std::size_t layer, const PairScore& p) {
    return {std::to_string(layer), p.first, p.second, format_number(p.mean), std::to_string(p.count)};
}

const std::vector<std::string> kPairHeader = {"layer", "w_i", "w_j", "mean_amp", "count"};

// ---------------------------------------------------------------------------

int cmd_selfcheck(std::uint64_t seed, std::size_t models) {
    const auto r = run_selfcheck(seed, models);
    std::cout << "cases: " << r.cases << "\n"
              << "max completeness error: " << format_number(r.max_completeness_error) << "\n"
              << "max walk/state map difference: " << format_number(r.max_walk_vs_state) << "\n"
              << "causal violations: " << r.causal_violations << "\n"
              << (r.ok() ? "selfcheck: ok" : "selfcheck: FAILED") << "\n";
    return r.ok() ? 0 : 3;
}

int cmd_maps(const Globals& g, const std::string& model_path, const std::string& corpus_path,
             const std::string& scope_text, std::optional<std::size_t> layer, const fs::path& out, bool as_json) {
    const Model model = load_model(model_path);
    const Scope scope = parse_scope(scope_text);
    scope_index(scope, model.config.architecture);
    const auto corpus = read_corpus(corpus_path);
    ensure_dir(out);
    CsvWriter index({"index", "id", "layer", "scope", "n", "file"});
    run_maps(model, corpus, scope, layer, g.run(),
             [&](std::size_t idx, const TokenSequence& seq, std::size_t l, const Matrix& m) {
                 char name[96];
                 std::snprintf(name, sizeof name, "%06zu.layer%02zu.%s.%s", idx, l, std::string(to_string(scope)).c_str(),
                               as_json ? "json" : "bin");
                 if (as_json)
                     write_map_json(m, out / name);
                 else
                     write_map_binary(m, out / name);
                 index.row({std::to_string(idx), seq.id, std::to_string(l), std::string(to_string(scope)),
                            std::to_string(m.rows()), name});
             });
    index.save(out / "index.csv");
    return 0;
}

int cmd_change(const Globals& g, const std::string& model_path, const std::string& corpus_path,
               const std::string& scopes, const fs::path& out) {
    const Model model = load_model(model_path);
    const auto pair = parse_scope_pair(scopes);
    StudyPlan plan;
    plan.change_pairs = {pair};
    const auto corpus = read_corpus(corpus_path);
    const auto r = run_study(model, corpus, plan, g.run());
    CsvWriter csv({"layer", "scope_before", "scope_after", "mean_change", "n_sequences", "n_dropped"});
    for (const auto& s : r.changes[0])
        csv.row({std::to_string(s.layer), std::string(to_string(s.before)), std::string(to_string(s.after)),
                 format_number(s.value), std::to_string(s.num_sequences), std::to_string(s.num_dropped)});
    csv.save(out);
    return 0;
}

int cmd_amp(const Globals& g, const std::string& model_path, const std::string& corpus_path, std::size_t layer,
            std::size_t top, const fs::path& out, const std::string& axis) {
    const Model model = load_model(model_path);
    StudyPlan plan;
    plan.amp_layers = {layer};
    plan.axis = parse_axis(axis);
    const auto corpus = read_corpus(corpus_path);
    const auto r = run_study(model, corpus, plan, g.run());
    ensure_dir(out);
    const auto ranked = r.amp[layer].ranked();
    CsvWriter all(kPairHeader), best(kPairHeader);
    for (std::size_t k = 0; k < ranked.size(); ++k) {
        all.row(pair_row(layer, ranked[k]));
        if (k < top) best.row(pair_row(layer, ranked[k]));
    }
    all.save(out / "pairs.csv");
    best.save(out / "top.csv");
    std::cerr << "amp: layer " << layer << ", " << ranked.size() << " pairs (count >= 2), axis "
              << to_string(plan.axis) << ", " << r.amp_flagged_lines << " zero lines flagged\n";
    return 0;
}

int cmd_norms(const Globals& g, const std::string& model_path, const std::string& corpus_path, const fs::path& out) {
    const Model model = load_model(model_path);
    StudyPlan plan;
    plan.norms = true;
    const auto r = run_study(model, read_corpus(corpus_path), plan, g.run());
    CsvWriter csv({"layer", "mean_ff_norm", "mean_bypass_norm", "ratio"});
    for (std::size_t l = 0; l < r.norms->layers.size(); ++l) {
        const auto& s = r.norms->layers[l];
        const double ratio = s.mean_ff_norm > 0.0 ? s.mean_bypass_norm / s.mean_ff_norm
                                                  : std::numeric_limits<double>::quiet_NaN();
        csv.row({std::to_string(l), format_number(s.mean_ff_norm), format_number(s.mean_bypass_norm),
                 format_number(ratio)});
    }
    csv.save(out);
    return 0;
}

int cmd_ln_cancel(const Globals& g, const std::string& model_path, const std::string& corpus_path, const fs::path& out,
                  std::optional<fs::path> dims_out, double pct) {
    if (!(pct > 0.0 && pct < 100.0)) throw UsageError("--mask-bottom-pct must lie in (0, 100)");
    const Model model = load_model(model_path);
    StudyPlan plan;
    plan.ln_cancel = true;
    plan.masked_change = true;
    plan.bottom_pct = pct;
    plan.change_pairs = {ff_change_pair(model.config.architecture), ln_change_pair(model.config.architecture)};
    const auto r = run_study(model, read_corpus(corpus_path), plan, g.run());
    const auto& rep = *r.ln_cancel;
    CsvWriter csv({"layer", "pearson_r", "n_bottom_dims", "below_resolution", "bottom_dims", "ff_change",
                   "masked_ff_change", "ln_change"});
    CsvWriter dims({"layer", "dim", "gamma", "mean_abs_ff_out", "mean_abs_ff_in", "bottom"});
    for (std::size_t l = 0; l < rep.layers.size(); ++l) {
        const auto& L = rep.layers[l];
        const double r_val = L.pearson_r.value_or(std::numeric_limits<double>::quiet_NaN());
        csv.row({std::to_string(l), format_number(r_val), std::to_string(L.bottom.dims.size()),
                 L.bottom.below_resolution ? "1" : "0", join(L.bottom.dims), format_number(r.changes[0][l].value),
                 format_number(r.masked_changes[l].value), format_number(r.changes[1][l].value)});
        for (Eigen::Index k = 0; k < L.mean_abs_ff_out.size(); ++k) {
            const bool bottom = std::find(L.bottom.dims.begin(), L.bottom.dims.end(), static_cast<std::size_t>(k)) !=
                                L.bottom.dims.end();
            dims.row({std::to_string(l), std::to_string(k),
                      L.gamma ? format_number((*L.gamma)[k]) : std::string("nan"), format_number(L.mean_abs_ff_out[k]),
                      format_number(L.mean_abs_ff_in[k]), bottom ? "1" : "0"});
        }
    }
    csv.save(out);
    fs::path dpath = dims_out ? *dims_out : out.parent_path() / (out.stem().string() + ".dims.csv");
    dims.save(dpath);
    return 0;
}

int cmd_pmi(const std::string& corpus_path, const std::string& mode, const fs::path& out,
            std::optional<std::string> model_path) {
    const auto m = parse_cooccurrence_mode(mode);
    const SpecialPredicate pred = model_path ? special_by_config(load_config(*model_path)) : special_by_word();
    const auto table = pmi_table(read_corpus(corpus_path), m, pred);
    CsvWriter csv({"w_a", "w_b", "pmi", "joint_count"});
    for (const auto& [key, e] : table.entries())
        csv.row({key.first, key.second, format_number(e.pmi), std::to_string(e.joint)});
    csv.save(out);
    return 0;
}

std::size_t column(const std::vector<std::string>& header, const std::string& name, const std::string& file) {
    for (std::size_t k = 0; k < header.size(); ++k)
        if (header[k] == name) return k;
    throw DataError(file + ": missing column '" + name + "'");
}

int cmd_amp_pmi(const std::string& amp_path, const std::string& pmi_path, const fs::path& out) {
    const auto amp_rows = read_csv(amp_path);
    const auto pmi_rows = read_csv(pmi_path);
    if (amp_rows.empty()) throw DataError(amp_path + ": empty file");
    if (pmi_rows.empty()) throw DataError(pmi_path + ": empty file");
    PmiTable pmi;
    {
        const auto& h = pmi_rows[0];
        const auto a = column(h, "w_a", pmi_path), b = column(h, "w_b", pmi_path), v = column(h, "pmi", pmi_path),
                   c = column(h, "joint_count", pmi_path);
        for (std::size_t r = 1; r < pmi_rows.size(); ++r) {
            const auto& row = pmi_rows[r];
            const std::string where = pmi_path + " row " + std::to_string(r + 1);
            if (row.size() != h.size()) throw DataError(where + ": wrong number of fields");
            pmi.set(row[a], row[b], {parse_number(row[v], where), static_cast<std::size_t>(parse_number(row[c], where))});
        }
    }
    std::map<std::size_t, std::vector<PairScore>> by_layer;
    {
        const auto& h = amp_rows[0];
        const auto l = column(h, "layer", amp_path), wi = column(h, "w_i", amp_path), wj = column(h, "w_j", amp_path),
                   m = column(h, "mean_amp", amp_path), c = column(h, "count", amp_path);
        for (std::size_t r = 1; r < amp_rows.size(); ++r) {
            const auto& row = amp_rows[r];
            const std::string where = amp_path + " row " + std::to_string(r + 1);
            if (row.size() != h.size()) throw DataError(where + ": wrong number of fields");
            by_layer[static_cast<std::size_t>(parse_number(row[l], where))].push_back(
                {row[wi], row[wj], parse_number(row[m], where), static_cast<std::size_t>(parse_number(row[c], where))});
        }
    }
    CsvWriter csv({"layer", "rho", "n_pairs"});
    for (const auto& [layer, pairs] : by_layer) {
        const auto corr = amp_pmi_correlation(pairs, pmi);
        csv.row({std::to_string(layer), format_number(corr.rho), std::to_string(corr.pairs)});
    }
    csv.save(out);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Norm-based attribution analysis of Transformer layers"};
    app.require_subcommand(1);
    Globals g;
    double mask_rate = 0.0;
    auto* mask_opt = app.add_option("--mask-rate", mask_rate, "Fraction of tokens replaced by the mask token "
                                                              "(default 0.12 for non-causal models, 0 for causal)")
                         ->check(CLI::Range(0.0, 1.0));
    app.add_option("--seed", g.seed, "Seed for token masking");
    app.add_option("--threads", g.threads, "Worker threads (results do not depend on this)")->check(CLI::PositiveNumber);
    app.add_option("--precision", g.precision, "Arithmetic precision")->check(CLI::IsMember({"f64"}));

    std::string model, corpus, out, scope, scopes, mode, axis = "row", amp_file, pmi_file, dims_out;
    std::size_t layer = 0, top = 50, models = 2;
    double pct = 1.0;
    bool as_json = false;

    auto* selfcheck = app.add_subcommand("selfcheck", "Property checks over random tiny models");
    selfcheck->add_option("--models", models, "Models per architecture/activation/causality combination")
        ->check(CLI::PositiveNumber);

    auto* maps = app.add_subcommand("maps", "Dump attribution maps");
    maps->add_option("--model", model)->required();
    maps->add_option("--corpus", corpus)->required();
    maps->add_option("--scope", scope)->required();
    auto* maps_layer = maps->add_option("--layer", layer);
    maps->add_option("--out", out, "Output directory")->required();
    maps->add_flag("--json", as_json, "Write JSON arrays instead of binary dumps");

    auto* change = app.add_subcommand("change", "Contextualization change between two scopes, per layer");
    change->add_option("--model", model)->required();
    change->add_option("--corpus", corpus)->required();
    change->add_option("--scopes", scopes, "Two scopes, e.g. atb,atbff")->required();
    change->add_option("--out", out)->required();

    auto* amp = app.add_subcommand("amp", "FF-amp pair scores for one layer");
    amp->add_option("--model", model)->required();
    amp->add_option("--corpus", corpus)->required();
    amp->add_option("--layer", layer)->required();
    amp->add_option("--top", top);
    amp->add_option("--out", out, "Output directory")->required();
    amp->add_option("--axis", axis, "Normalization axis: row (default) or column");

    auto* norms = app.add_subcommand("norms", "Mean FF output and bypass norms per layer");
    norms->add_option("--model", model)->required();
    norms->add_option("--corpus", corpus)->required();
    norms->add_option("--out", out)->required();

    auto* ln_cancel = app.add_subcommand("ln-cancel", "LN gamma vs FF output dimensions, masked FF change");
    ln_cancel->add_option("--model", model)->required();
    ln_cancel->add_option("--corpus", corpus)->required();
    ln_cancel->add_option("--out", out)->required();
    ln_cancel->add_option("--mask-bottom-pct", pct, "Percent of smallest-gamma dimensions to drop");
    auto* dims_opt = ln_cancel->add_option("--dims-out", dims_out, "Per-dimension CSV (default <out>.dims.csv)");

    auto* pmi = app.add_subcommand("pmi", "PMI of subword pairs");
    pmi->add_option("--corpus", corpus)->required();
    pmi->add_option("--mode", mode, "doc | sent | chunk512")->required();
    pmi->add_option("--out", out)->required();
    auto* pmi_model = pmi->add_option("--model", model, "Weight file whose special tokens are excluded");

    auto* amp_pmi = app.add_subcommand("amp-pmi", "Spearman correlation of FF-amp scores and PMI");
    amp_pmi->add_option("--amp", amp_file)->required();
    amp_pmi->add_option("--pmi", pmi_file)->required();
    amp_pmi->add_option("--out", out)->required();

    for (auto* sub : {selfcheck, maps, change, amp, norms, ln_cancel, pmi, amp_pmi}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }
    if (*mask_opt) g.mask_rate = mask_rate;

    try {
        if (*selfcheck) return cmd_selfcheck(g.seed, models);
        if (*maps)
            return cmd_maps(g, model, corpus, scope, *maps_layer ? std::optional<std::size_t>(layer) : std::nullopt, out,
                            as_json);
        if (*change) return cmd_change(g, model, corpus, scopes, out);
        if (*amp) return cmd_amp(g, model, corpus, layer, top, out, axis);
        if (*norms) return cmd_norms(g, model, corpus, out);
        if (*ln_cancel)
            return cmd_ln_cancel(g, model, corpus, out, *dims_opt ? std::optional<fs::path>(dims_out) : std::nullopt, pct);
        if (*pmi) return cmd_pmi(corpus, mode, out, *pmi_model ? std::optional<std::string>(model) : std::nullopt);
        if (*amp_pmi) return cmd_amp_pmi(amp_file, pmi_file, out);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}
