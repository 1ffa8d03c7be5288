#pragma once

// On-disk formats.
//
//   LENS weight file   "LENS1\0\0\0" | u64 LE header_len | JSON header | f32 LE payload
//                      header = {"config": {...}, "tensors": [{name, dtype, shape, offset, length}]}
//                      offsets are relative to the first payload byte, lengths are in bytes.
//   Corpus             JSONL, one sequence per line: id, tokens, words, [doc_id], [sentence_index]
//   Map dump           u32 LE n | n*n f32 LE (row-major), or a JSON array of rows
//   CSV                RFC 4180 quoting, '.' decimal point, 9 significant digits

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "lens/error.hpp"
#include "lens/forward.hpp"
#include "lens/model.hpp"
#include "lens/sequence.hpp"

namespace lens {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr std::array<char, 8> kLensMagic = {'L', 'E', 'N', 'S', '1', '\0', '\0', '\0'};

namespace detail {

inline std::uint32_t f32_bits(double v) {
    const auto f = static_cast<float>(v);
    return std::bit_cast<std::uint32_t>(f);
}

inline double from_f32_bits(std::uint32_t bits) { return static_cast<double>(std::bit_cast<float>(bits)); }

template <class UInt>
void put_le(std::string& out, UInt v) {
    for (std::size_t b = 0; b < sizeof(UInt); ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

template <class UInt>
UInt get_le(const unsigned char* p) {
    UInt v = 0;
    for (std::size_t b = 0; b < sizeof(UInt); ++b) v |= static_cast<UInt>(p[b]) << (8 * b);
    return v;
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for '" + path.string() + "'");
}

/// A named view onto model storage used for both writing and loading.
struct TensorSlot {
    std::string name;
    std::vector<std::size_t> shape;
    double* data;
};

inline void add_matrix(std::vector<TensorSlot>& out, std::string name, Matrix& m) {
    out.push_back({std::move(name), {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, m.data()});
}

inline void add_vector(std::vector<TensorSlot>& out, std::string name, Vector& v) {
    out.push_back({std::move(name), {static_cast<std::size_t>(v.size())}, v.data()});
}

/// All tensors of a model in canonical order.
inline std::vector<TensorSlot> tensor_slots(Model& m) {
    std::vector<TensorSlot> out;
    add_matrix(out, "embed.token", m.embedding.token);
    add_matrix(out, "embed.pos", m.embedding.position);
    if (m.embedding.segment) add_matrix(out, "embed.seg", *m.embedding.segment);
    if (m.embedding.ln_gamma) add_vector(out, "embed.ln.gamma", *m.embedding.ln_gamma);
    if (m.embedding.ln_beta) add_vector(out, "embed.ln.beta", *m.embedding.ln_beta);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        auto& l = m.layers[i];
        const std::string p = "layer." + std::to_string(i) + ".";
        add_matrix(out, p + "attn.q.weight", l.wq);
        add_vector(out, p + "attn.q.bias", l.bq);
        add_matrix(out, p + "attn.k.weight", l.wk);
        add_vector(out, p + "attn.k.bias", l.bk);
        add_matrix(out, p + "attn.v.weight", l.wv);
        add_vector(out, p + "attn.v.bias", l.bv);
        add_matrix(out, p + "attn.o.weight", l.wo);
        add_vector(out, p + "attn.o.bias", l.bo);
        add_vector(out, p + "ln1.gamma", l.ln1_gamma);
        add_vector(out, p + "ln1.beta", l.ln1_beta);
        add_matrix(out, p + "ff.w1", l.w1);
        add_vector(out, p + "ff.b1", l.b1);
        add_matrix(out, p + "ff.w2", l.w2);
        add_vector(out, p + "ff.b2", l.b2);
        add_vector(out, p + "ln2.gamma", l.ln2_gamma);
        add_vector(out, p + "ln2.beta", l.ln2_beta);
    }
    if (m.final_ln) {
        add_vector(out, "final_ln.gamma", m.final_ln->gamma);
        add_vector(out, "final_ln.beta", m.final_ln->beta);
    }
    return out;
}

template <class T>
T require(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) throw DataError(where + ": missing field '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw DataError(where + ": field '" + key + "' has the wrong type");
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Model config <-> JSON

inline json config_to_json(const ModelConfig& c) {
    json specials = json::object();
    for (const auto& [name, id] : c.special_token_ids) specials[name] = id;
    return {{"num_layers", c.num_layers},
            {"hidden_dim", c.hidden_dim},
            {"ff_dim", c.ff_dim},
            {"num_heads", c.num_heads},
            {"head_dim", c.head_dim},
            {"architecture", std::string(to_string(c.architecture))},
            {"activation", std::string(to_string(c.activation))},
            {"vocab_size", c.vocab_size},
            {"max_positions", c.max_positions},
            {"has_segment_embeddings", c.has_segment_embeddings},
            {"ln_epsilon", c.ln_epsilon},
            {"special_token_ids", specials},
            {"causal", c.causal}};
}

inline ModelConfig config_from_json(const json& j) {
    const std::string where = "config";
    if (!j.is_object()) throw DataError("config: expected an object");
    using detail::require;
    ModelConfig c;
    c.num_layers = require<std::size_t>(j, "num_layers", where);
    c.hidden_dim = require<std::size_t>(j, "hidden_dim", where);
    c.ff_dim = require<std::size_t>(j, "ff_dim", where);
    c.num_heads = require<std::size_t>(j, "num_heads", where);
    c.head_dim = j.contains("head_dim") ? require<std::size_t>(j, "head_dim", where)
                                        : (c.num_heads ? c.hidden_dim / c.num_heads : 0);
    c.architecture = parse_architecture(require<std::string>(j, "architecture", where));
    c.activation = parse_activation(require<std::string>(j, "activation", where));
    c.vocab_size = require<std::size_t>(j, "vocab_size", where);
    c.max_positions = require<std::size_t>(j, "max_positions", where);
    c.has_segment_embeddings = j.value("has_segment_embeddings", false);
    c.ln_epsilon = require<double>(j, "ln_epsilon", where);
    if (j.contains("special_token_ids")) {
        for (const auto& [name, id] : j.at("special_token_ids").items()) {
            if (!id.is_number_integer()) throw DataError("config: special token '" + name + "' is not an integer");
            c.special_token_ids[name] = id.get<TokenId>();
        }
    }
    c.causal = j.value("causal", false);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// LENS weight file

inline std::string serialize_model(const Model& model) {
    Model copy = model; // tensor_slots needs mutable storage
    const auto slots = detail::tensor_slots(copy);
    json tensors = json::array();
    std::string payload;
    for (const auto& s : slots) {
        const std::size_t count = std::accumulate(s.shape.begin(), s.shape.end(), std::size_t{1}, std::multiplies<>());
        tensors.push_back({{"name", s.name}, {"dtype", "f32"}, {"shape", s.shape}, {"offset", payload.size()},
                           {"length", count * 4}});
        for (std::size_t k = 0; k < count; ++k) detail::put_le<std::uint32_t>(payload, detail::f32_bits(s.data[k]));
    }
    const std::string header = json{{"config", config_to_json(model.config)}, {"tensors", tensors}}.dump();
    std::string out(kLensMagic.begin(), kLensMagic.end());
    detail::put_le<std::uint64_t>(out, header.size());
    out += header;
    out += payload;
    return out;
}

inline void save_model(const Model& model, const fs::path& path) { detail::write_file(path, serialize_model(model)); }

inline Model parse_model(const std::string& bytes) {
    constexpr std::size_t kPrefix = kLensMagic.size() + 8;
    if (bytes.size() < kPrefix || !std::equal(kLensMagic.begin(), kLensMagic.end(), bytes.begin()))
        throw DataError("weight file: bad magic (expected LENS1)");
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    const auto header_len = detail::get_le<std::uint64_t>(raw + kLensMagic.size());
    if (header_len > bytes.size() - kPrefix) throw DataError("weight file: header extends past end of file");
    json header;
    try {
        header = json::parse(bytes.substr(kPrefix, header_len));
    } catch (const json::parse_error& e) {
        throw DataError(std::string("weight file: header is not valid JSON: ") + e.what());
    }
    if (!header.contains("config") || !header.contains("tensors") || !header["tensors"].is_array())
        throw DataError("weight file: header needs 'config' and 'tensors'");

    const std::size_t payload_begin = kPrefix + header_len;
    const std::size_t payload_size = bytes.size() - payload_begin;

    struct Entry {
        std::string name;
        std::vector<std::size_t> shape;
        std::size_t offset, length;
    };
    std::map<std::string, Entry> entries;
    for (const auto& t : header["tensors"]) {
        const std::string where = "weight file tensor";
        Entry e{detail::require<std::string>(t, "name", where), {}, 0, 0};
        const std::string w = "tensor '" + e.name + "'";
        if (detail::require<std::string>(t, "dtype", w) != "f32") throw DataError(w + ": dtype must be f32");
        e.shape = detail::require<std::vector<std::size_t>>(t, "shape", w);
        e.offset = detail::require<std::size_t>(t, "offset", w);
        e.length = detail::require<std::size_t>(t, "length", w);
        const std::size_t count = std::accumulate(e.shape.begin(), e.shape.end(), std::size_t{1}, std::multiplies<>());
        if (e.shape.empty() || e.shape.size() > 2 || count * 4 != e.length)
            throw DataError(w + ": shape does not match length " + std::to_string(e.length));
        if (!entries.emplace(e.name, e).second) throw DataError(w + ": declared twice");
    }

    std::vector<const Entry*> by_offset;
    for (const auto& [name, e] : entries) by_offset.push_back(&e);
    std::sort(by_offset.begin(), by_offset.end(), [](const Entry* a, const Entry* b) {
        return a->offset != b->offset ? a->offset < b->offset : a->name < b->name;
    });
    std::size_t prev_end = 0;
    const Entry* prev = nullptr;
    for (const Entry* e : by_offset) {
        if (prev && e->offset < prev_end)
            throw DataError("weight file: tensor '" + e->name + "' overlaps tensor '" + prev->name + "'");
        if (e->offset + e->length > payload_size)
            throw DataError("weight file: truncated payload, tensor '" + e->name + "' is unreadable");
        prev_end = e->offset + e->length;
        prev = e;
    }

    Model model;
    model.config = config_from_json(header["config"]);
    const auto& cfg = model.config;
    if (entries.count("embed.seg")) model.embedding.segment = Matrix();
    if (entries.count("embed.ln.gamma")) model.embedding.ln_gamma = Vector();
    if (entries.count("embed.ln.beta")) model.embedding.ln_beta = Vector();
    if (entries.count("final_ln.gamma") || entries.count("final_ln.beta")) model.final_ln = LayerNormParams{};
    model.layers.resize(cfg.num_layers);

    // Size storage from the declared shapes; Model::validate() checks them against the config.
    auto slots = detail::tensor_slots(model);
    std::set<std::string> expected;
    for (auto& slot : slots) {
        expected.insert(slot.name);
        auto it = entries.find(slot.name);
        if (it == entries.end()) throw DataError("weight file: missing tensor '" + slot.name + "'");
    }
    for (const auto& [name, e] : entries)
        if (!expected.count(name)) throw DataError("weight file: unexpected tensor '" + name + "'");

    // Resize then re-collect slots so that data pointers refer to the final buffers.
    auto resize = [&](const std::string& name, auto& target) {
        const auto& shape = entries.at(name).shape;
        using T = std::decay_t<decltype(target)>;
        if constexpr (std::is_same_v<T, Vector>) {
            if (shape.size() != 1) throw DataError("tensor '" + name + "': expected a 1-D shape");
            target.resize(static_cast<Eigen::Index>(shape[0]));
        } else {
            if (shape.size() != 2) throw DataError("tensor '" + name + "': expected a 2-D shape");
            target.resize(static_cast<Eigen::Index>(shape[0]), static_cast<Eigen::Index>(shape[1]));
        }
    };
    {
        auto& m = model;
        resize("embed.token", m.embedding.token);
        resize("embed.pos", m.embedding.position);
        if (m.embedding.segment) resize("embed.seg", *m.embedding.segment);
        if (m.embedding.ln_gamma) resize("embed.ln.gamma", *m.embedding.ln_gamma);
        if (m.embedding.ln_beta) resize("embed.ln.beta", *m.embedding.ln_beta);
        for (std::size_t i = 0; i < m.layers.size(); ++i) {
            auto& l = m.layers[i];
            const std::string p = "layer." + std::to_string(i) + ".";
            resize(p + "attn.q.weight", l.wq);
            resize(p + "attn.q.bias", l.bq);
            resize(p + "attn.k.weight", l.wk);
            resize(p + "attn.k.bias", l.bk);
            resize(p + "attn.v.weight", l.wv);
            resize(p + "attn.v.bias", l.bv);
            resize(p + "attn.o.weight", l.wo);
            resize(p + "attn.o.bias", l.bo);
            resize(p + "ln1.gamma", l.ln1_gamma);
            resize(p + "ln1.beta", l.ln1_beta);
            resize(p + "ff.w1", l.w1);
            resize(p + "ff.b1", l.b1);
            resize(p + "ff.w2", l.w2);
            resize(p + "ff.b2", l.b2);
            resize(p + "ln2.gamma", l.ln2_gamma);
            resize(p + "ln2.beta", l.ln2_beta);
        }
        if (m.final_ln) {
            resize("final_ln.gamma", m.final_ln->gamma);
            resize("final_ln.beta", m.final_ln->beta);
        }
    }
    for (auto& slot : detail::tensor_slots(model)) {
        const Entry& e = entries.at(slot.name);
        const auto* src = raw + payload_begin + e.offset;
        const std::size_t count = e.length / 4;
        for (std::size_t k = 0; k < count; ++k) {
            const double v = detail::from_f32_bits(detail::get_le<std::uint32_t>(src + 4 * k));
            if (!std::isfinite(v)) throw DataError("tensor '" + slot.name + "': non-finite value at index " + std::to_string(k));
            slot.data[k] = v;
        }
    }
    model.validate();
    return model;
}

inline Model load_model(const fs::path& path) {
    try {
        return parse_model(detail::read_file(path));
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

/// Reads only the config from a weight file header.
inline ModelConfig load_config(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    std::array<char, 16> prefix{};
    in.read(prefix.data(), prefix.size());
    if (in.gcount() != 16 || !std::equal(kLensMagic.begin(), kLensMagic.end(), prefix.begin()))
        throw DataError(path.string() + ": bad magic (expected LENS1)");
    const auto header_len = detail::get_le<std::uint64_t>(reinterpret_cast<const unsigned char*>(prefix.data()) + 8);
    if (header_len > fs::file_size(path) - 16) throw DataError(path.string() + ": header extends past end of file");
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    try {
        const json j = json::parse(header);
        if (!j.contains("config")) throw DataError(path.string() + ": header has no 'config'");
        return config_from_json(j["config"]);
    } catch (const json::parse_error&) {
        throw DataError(path.string() + ": header is not valid JSON");
    }
}

// ---------------------------------------------------------------------------
// Corpus

inline TokenSequence parse_corpus_line(const std::string& line, std::size_t line_no) {
    const std::string where = "corpus line " + std::to_string(line_no);
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error&) {
        throw DataError(where + ": not valid JSON");
    }
    if (!j.is_object()) throw DataError(where + ": expected a JSON object");
    TokenSequence s;
    if (!j.contains("id") || !(j["id"].is_string() || j["id"].is_number_integer()))
        throw DataError(where + ": missing or invalid 'id'");
    s.id = j["id"].is_string() ? j["id"].get<std::string>() : std::to_string(j["id"].get<long long>());
    s.token_ids = detail::require<std::vector<TokenId>>(j, "tokens", where);
    s.words = detail::require<std::vector<std::string>>(j, "words", where);
    if (s.words.size() != s.token_ids.size())
        throw DataError(where + ": 'words' and 'tokens' differ in length");
    if (s.token_ids.empty()) throw DataError(where + ": empty token list");
    if (j.contains("doc_id") && !j["doc_id"].is_null()) {
        const auto& d = j["doc_id"];
        if (!(d.is_string() || d.is_number_integer())) throw DataError(where + ": invalid 'doc_id'");
        s.doc_id = d.is_string() ? d.get<std::string>() : std::to_string(d.get<long long>());
    }
    if (j.contains("sentence_index") && !j["sentence_index"].is_null()) {
        s.sentence_index = detail::require<std::vector<std::int64_t>>(j, "sentence_index", where);
        if (s.sentence_index->size() != s.token_ids.size())
            throw DataError(where + ": 'sentence_index' and 'tokens' differ in length");
    }
    return s;
}

inline std::vector<TokenSequence> read_corpus(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus '" + path.string() + "'");
    std::vector<TokenSequence> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        out.push_back(parse_corpus_line(line, line_no));
    }
    return out;
}

inline std::string corpus_line(const TokenSequence& s) {
    json j{{"id", s.id}, {"tokens", s.token_ids}, {"words", s.words}};
    if (s.doc_id) j["doc_id"] = *s.doc_id;
    if (s.sentence_index) j["sentence_index"] = *s.sentence_index;
    return j.dump();
}

inline void write_corpus(const std::vector<TokenSequence>& corpus, const fs::path& path) {
    std::string text;
    for (const auto& s : corpus) text += corpus_line(s) + "\n";
    detail::write_file(path, text);
}

// ---------------------------------------------------------------------------
// Map dumps (values stored as f32)

inline void write_map_binary(const Matrix& map, const fs::path& path) {
    if (map.rows() != map.cols()) throw std::invalid_argument("write_map_binary: map must be square");
    std::string out;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(map.rows()));
    for (Eigen::Index i = 0; i < map.rows(); ++i)
        for (Eigen::Index j = 0; j < map.cols(); ++j) detail::put_le<std::uint32_t>(out, detail::f32_bits(map(i, j)));
    detail::write_file(path, out);
}

inline Matrix read_map_binary(const fs::path& path) {
    const std::string bytes = detail::read_file(path);
    if (bytes.size() < 4) throw DataError(path.string() + ": map dump too short");
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    const auto n = static_cast<std::size_t>(detail::get_le<std::uint32_t>(raw));
    if (bytes.size() != 4 + 4 * n * n) throw DataError(path.string() + ": map dump size does not match n");
    Matrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < n * n; ++k)
        m.data()[k] = detail::from_f32_bits(detail::get_le<std::uint32_t>(raw + 4 + 4 * k));
    return m;
}

inline void write_map_json(const Matrix& map, const fs::path& path) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < map.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < map.cols(); ++j) row.push_back(static_cast<double>(static_cast<float>(map(i, j))));
        rows.push_back(std::move(row));
    }
    detail::write_file(path, rows.dump() + "\n");
}

inline Matrix read_map_json(const fs::path& path) {
    json j;
    try {
        j = json::parse(detail::read_file(path));
    } catch (const json::parse_error&) {
        throw DataError(path.string() + ": map dump is not valid JSON");
    }
    const auto n = static_cast<Eigen::Index>(j.size());
    Matrix m(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!j[static_cast<std::size_t>(i)].is_array() || static_cast<Eigen::Index>(j[static_cast<std::size_t>(i)].size()) != n)
            throw DataError(path.string() + ": map dump is not square");
        for (Eigen::Index k = 0; k < n; ++k) m(i, k) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)].get<double>();
    }
    return m;
}

// ---------------------------------------------------------------------------
// CSV

/// Shortest form with at most 9 significant digits; "nan" for undefined values.
inline std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (v == 0.0) v = 0.0; // drop the sign of -0
    std::array<char, 64> buf{};
    auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v, std::chars_format::general, 9);
    return std::string(buf.data(), res.ptr);
}

inline std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

inline std::string csv_line(const std::vector<std::string>& fields) {
    std::string out;
    for (std::size_t k = 0; k < fields.size(); ++k) {
        if (k) out += ',';
        out += csv_field(fields[k]);
    }
    out += '\n';
    return out;
}

/// Parses RFC 4180 CSV text into rows of fields.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, any = false;
    for (std::size_t k = 0; k < text.size(); ++k) {
        const char c = text[k];
        if (quoted) {
            if (c == '"') {
                if (k + 1 < text.size() && text[k + 1] == '"') {
                    field += '"';
                    ++k;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && k + 1 < text.size() && text[k + 1] == '\n') ++k;
            if (any || !field.empty()) {
                row.push_back(std::move(field));
                rows.push_back(std::move(row));
            }
            row.clear();
            field.clear();
            any = false;
        } else {
            field += c;
            any = true;
        }
    }
    if (quoted) throw DataError("csv: unterminated quoted field");
    if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
    return parse_csv(detail::read_file(path));
}

inline double parse_number(const std::string& s, const std::string& where) {
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw DataError(where + ": '" + s + "' is not a number");
    return v;
}

/// Collects CSV text in memory; written in one piece so output is all-or-nothing.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header) { text_ = csv_line(header); }

    void row(const std::vector<std::string>& fields) { text_ += csv_line(fields); }

    const std::string& text() const { return text_; }

    void save(const fs::path& path) const { detail::write_file(path, text_); }

private:
    std::string text_;
};

// ---------------------------------------------------------------------------
// Exporter reference sample

struct ReferenceCheck {
    std::string sequence_id;
    double max_abs_diff = 0.0;
};

/// Compares the engine's final hidden state with the reference recorded in an
/// export manifest: {"reference": {"id", "tokens", "words"?, "final_hidden": [[...]]}}.
inline ReferenceCheck compare_reference(const Model& model, const json& manifest) {
    if (!manifest.contains("reference")) throw DataError("manifest: missing 'reference'");
    const auto& ref = manifest["reference"];
    TokenSequence seq;
    seq.id = ref.value("id", std::string("reference"));
    seq.token_ids = detail::require<std::vector<TokenId>>(ref, "tokens", "manifest reference");
    seq.words = ref.value("words", std::vector<std::string>(seq.token_ids.size()));
    const auto expected = detail::require<std::vector<std::vector<double>>>(ref, "final_hidden", "manifest reference");
    const HiddenStates hs = forward_model(seq, model);
    const Matrix& got = hs.final();
    if (expected.size() != static_cast<std::size_t>(got.rows()))
        throw DataError("manifest reference: final_hidden has " + std::to_string(expected.size()) + " rows, engine produced " +
                        std::to_string(got.rows()));
    ReferenceCheck out{seq.id, 0.0};
    for (std::size_t i = 0; i < expected.size(); ++i) {
        if (expected[i].size() != static_cast<std::size_t>(got.cols()))
            throw DataError("manifest reference: final_hidden row width mismatch");
        for (std::size_t k = 0; k < expected[i].size(); ++k)
            out.max_abs_diff = std::max(out.max_abs_diff, std::abs(expected[i][k] - got(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k))));
    }
    return out;
}

} // namespace lens
