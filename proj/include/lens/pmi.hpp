#pragma once

// Unit-presence PMI over subword pairs and its correlation with FF-amp scores.

#include <cmath>
#include <cstdint>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lens/error.hpp"
#include "lens/metrics.hpp"
#include "lens/sequence.hpp"
#include "lens/stats.hpp"

namespace lens {

enum class CooccurrenceMode { Document, Sentence, Chunk512 };

inline constexpr std::size_t kChunkTokens = 512;

inline CooccurrenceMode parse_cooccurrence_mode(std::string_view s) {
    if (s == "doc") return CooccurrenceMode::Document;
    if (s == "sent") return CooccurrenceMode::Sentence;
    if (s == "chunk512") return CooccurrenceMode::Chunk512;
    throw UsageError("unknown co-occurrence mode '" + std::string(s) + "' (expected doc|sent|chunk512)");
}

/// True if token k of a sequence is a special token.
using SpecialPredicate = std::function<bool(const TokenSequence&, std::size_t)>;

/// Recognizes bracketed vocabulary entries such as [CLS], <s>, <|endoftext|>.
inline bool looks_special(std::string_view w) {
    if (w.size() < 3) return false;
    return (w.front() == '[' && w.back() == ']') || (w.front() == '<' && w.back() == '>');
}

inline SpecialPredicate special_by_word() {
    return [](const TokenSequence& s, std::size_t k) { return looks_special(s.words[k]); };
}

inline SpecialPredicate special_by_config(const ModelConfig& cfg) {
    return [cfg](const TokenSequence& s, std::size_t k) { return cfg.is_special(s.token_ids[k]); };
}

/// Co-occurrence units as sets of subword strings (special tokens removed).
inline std::vector<std::set<std::string>> cooccurrence_units(const std::vector<TokenSequence>& corpus,
                                                             CooccurrenceMode mode,
                                                             const SpecialPredicate& is_special) {
    std::vector<std::set<std::string>> units;
    if (mode == CooccurrenceMode::Chunk512) {
        std::size_t filled = 0;
        for (const auto& seq : corpus) {
            for (std::size_t k = 0; k < seq.size(); ++k) {
                if (filled % kChunkTokens == 0) units.emplace_back();
                ++filled;
                if (!is_special(seq, k)) units.back().insert(seq.words[k]);
            }
        }
        return units;
    }
    // Keys keep first-appearance order so results do not depend on id collation.
    std::map<std::pair<std::string, std::int64_t>, std::size_t> index;
    for (const auto& seq : corpus) {
        const std::string doc = seq.doc_id.value_or(seq.id);
        for (std::size_t k = 0; k < seq.size(); ++k) {
            std::int64_t sentence = 0;
            if (mode == CooccurrenceMode::Sentence && seq.sentence_index) sentence = (*seq.sentence_index)[k];
            const auto key = std::make_pair(doc, sentence);
            auto it = index.find(key);
            if (it == index.end()) {
                it = index.emplace(key, units.size()).first;
                units.emplace_back();
            }
            if (!is_special(seq, k)) units[it->second].insert(seq.words[k]);
        }
    }
    return units;
}

struct PmiEntry {
    double pmi = 0.0;
    std::size_t joint = 0;
};

/// PMI over unordered subword pairs, stored with the lexicographically smaller word first.
class PmiTable {
public:
    void set(const std::string& a, const std::string& b, PmiEntry e) { entries_[ordered(a, b)] = e; }

    std::optional<PmiEntry> find(const std::string& a, const std::string& b) const {
        auto it = entries_.find(ordered(a, b));
        if (it == entries_.end()) return std::nullopt;
        return it->second;
    }

    const std::map<std::pair<std::string, std::string>, PmiEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

private:
    static std::pair<std::string, std::string> ordered(const std::string& a, const std::string& b) {
        return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
    }

    std::map<std::pair<std::string, std::string>, PmiEntry> entries_;
};

/// PMI(a, b) = log(P(a, b) / (P(a) P(b))) with P = fraction of units containing the word(s).
/// Pairs of identical subwords and pairs never seen together are omitted.
inline PmiTable pmi_table(const std::vector<TokenSequence>& corpus, CooccurrenceMode mode,
                          const SpecialPredicate& is_special = special_by_word()) {
    const auto units = cooccurrence_units(corpus, mode, is_special);
    if (units.empty()) throw DataError("pmi: corpus is empty");
    std::map<std::string, std::size_t> single;
    std::map<std::pair<std::string, std::string>, std::size_t> joint;
    for (const auto& u : units) {
        for (auto a = u.begin(); a != u.end(); ++a) {
            ++single[*a];
            for (auto b = std::next(a); b != u.end(); ++b) ++joint[{*a, *b}];
        }
    }
    const double total = static_cast<double>(units.size());
    PmiTable table;
    for (const auto& [key, count] : joint) {
        const double pa = static_cast<double>(single[key.first]);
        const double pb = static_cast<double>(single[key.second]);
        table.set(key.first, key.second, {std::log(static_cast<double>(count) * total / (pa * pb)), count});
    }
    return table;
}

struct AmpPmiCorrelation {
    double rho = 0.0;
    std::size_t pairs = 0;
};

/// Spearman ρ between mean FF-amp scores and PMI over the pairs present in both.
inline AmpPmiCorrelation amp_pmi_correlation(const std::vector<PairScore>& amp, const PmiTable& pmi) {
    std::vector<double> a, b;
    for (const auto& p : amp) {
        if (p.first == p.second) continue;
        if (auto e = pmi.find(p.first, p.second)) {
            a.push_back(p.mean);
            b.push_back(e->pmi);
        }
    }
    if (a.size() < 3)
        throw DataError("amp-pmi: only " + std::to_string(a.size()) + " shared pairs (need at least 3)");
    const auto rho = spearman_rho(a, b);
    if (!rho) throw DataError("amp-pmi: correlation undefined (constant scores)");
    return {*rho, a.size()};
}

} // namespace lens
