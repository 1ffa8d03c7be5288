#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "lens/error.hpp"

namespace lens {

// Row-major so that a token representation is a contiguous row (x·W convention).
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::RowVectorXd;

using TokenId = std::int32_t;

enum class Architecture { PostLN, PreLN };

enum class ActivationKind { GeluErf, GeluTanh, Relu, Silu, Identity };

inline std::string_view to_string(Architecture a) {
    return a == Architecture::PostLN ? "post_ln" : "pre_ln";
}

inline std::string_view to_string(ActivationKind k) {
    switch (k) {
    case ActivationKind::GeluErf: return "gelu_erf";
    case ActivationKind::GeluTanh: return "gelu_tanh";
    case ActivationKind::Relu: return "relu";
    case ActivationKind::Silu: return "silu";
    case ActivationKind::Identity: return "identity";
    }
    return "?";
}

inline Architecture parse_architecture(std::string_view s) {
    if (s == "post_ln") return Architecture::PostLN;
    if (s == "pre_ln") return Architecture::PreLN;
    throw DataError("unknown architecture '" + std::string(s) + "'");
}

inline ActivationKind parse_activation(std::string_view s) {
    for (auto k : {ActivationKind::GeluErf, ActivationKind::GeluTanh, ActivationKind::Relu,
                   ActivationKind::Silu, ActivationKind::Identity}) {
        if (to_string(k) == s) return k;
    }
    throw DataError("unknown activation '" + std::string(s) + "'");
}

/// Architecture hyperparameters of an exported or synthetic model.
struct ModelConfig {
    std::size_t num_layers = 0;
    std::size_t hidden_dim = 0;
    std::size_t ff_dim = 0;
    std::size_t num_heads = 1;
    std::size_t head_dim = 0;
    Architecture architecture = Architecture::PostLN;
    ActivationKind activation = ActivationKind::GeluErf;
    std::size_t vocab_size = 0;
    std::size_t max_positions = 0;
    bool has_segment_embeddings = false;
    double ln_epsilon = 1e-12;
    // name -> id, e.g. {"mask": 103, "cls": 101}; every listed id is special.
    std::map<std::string, TokenId> special_token_ids;
    bool causal = false;

    std::optional<TokenId> mask_id() const {
        auto it = special_token_ids.find("mask");
        if (it == special_token_ids.end()) return std::nullopt;
        return it->second;
    }

    bool is_special(TokenId id) const {
        return std::any_of(special_token_ids.begin(), special_token_ids.end(),
                           [id](const auto& kv) { return kv.second == id; });
    }

    void validate() const {
        if (hidden_dim == 0 || num_heads == 0 || ff_dim == 0)
            throw DataError("config: hidden_dim, ff_dim and num_heads must be positive");
        if (hidden_dim != num_heads * head_dim)
            throw DataError("config: hidden_dim (" + std::to_string(hidden_dim) +
                            ") != num_heads * head_dim (" + std::to_string(num_heads) + " * " +
                            std::to_string(head_dim) + ")");
        if (!(ln_epsilon > 0.0)) throw DataError("config: ln_epsilon must be > 0");
        if (vocab_size == 0 || max_positions == 0)
            throw DataError("config: vocab_size and max_positions must be positive");
        for (const auto& [name, id] : special_token_ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= vocab_size)
                throw DataError("config: special token '" + name + "' id out of vocabulary");
        }
    }
};

} // namespace lens
