#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "lens/config.hpp"

namespace lens {

/// A pre-tokenized input sequence; `words` holds the surface subword strings.
struct TokenSequence {
    std::string id;
    std::vector<TokenId> token_ids;
    std::vector<std::string> words;
    std::optional<std::string> doc_id;
    std::optional<std::vector<std::int64_t>> sentence_index;

    std::size_t size() const noexcept { return token_ids.size(); }
};

struct MaskedSequence {
    TokenSequence masked;
    TokenSequence original;
    std::vector<std::size_t> positions; // ascending
};

/// Replaces exactly round(rate * n_maskable) non-special positions with `mask_id`.
/// Deterministic for a given seed.
inline MaskedSequence mask_tokens(const TokenSequence& seq, double rate, std::uint64_t seed,
                                  TokenId mask_id, const ModelConfig& cfg) {
    if (!(rate >= 0.0 && rate <= 1.0))
        throw std::invalid_argument("mask_tokens: rate must lie in [0, 1]");
    if (mask_id < 0 || static_cast<std::size_t>(mask_id) >= cfg.vocab_size)
        throw std::invalid_argument("mask_tokens: mask id outside vocabulary");

    std::vector<std::size_t> maskable;
    for (std::size_t k = 0; k < seq.size(); ++k)
        if (!cfg.is_special(seq.token_ids[k])) maskable.push_back(k);

    const auto count = static_cast<std::size_t>(std::llround(rate * static_cast<double>(maskable.size())));

    // Partial Fisher-Yates: the first `count` slots become the chosen positions.
    std::mt19937_64 rng(seed);
    for (std::size_t k = 0; k < count; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, maskable.size() - 1);
        std::swap(maskable[k], maskable[pick(rng)]);
    }
    MaskedSequence out{seq, seq, {maskable.begin(), maskable.begin() + static_cast<std::ptrdiff_t>(count)}};
    std::sort(out.positions.begin(), out.positions.end());
    for (auto p : out.positions) out.masked.token_ids[p] = mask_id;
    return out;
}

} // namespace lens
