#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include <gtest/gtest.h>
#include <unistd.h>

#include "lens/io.hpp"
#include "lens/random_model.hpp"

using namespace lens;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class TempDir : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("lens_io_" + std::to_string(::getpid()) + "_" +
                ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    fs::path path(const std::string& name) const { return dir_ / name; }

private:
    fs::path dir_;
};

struct Split {
    json header;
    std::string payload;
};

Split split(const std::string& bytes) {
    std::uint64_t len = 0;
    for (int k = 7; k >= 0; --k) len = (len << 8) | static_cast<unsigned char>(bytes[8 + static_cast<std::size_t>(k)]);
    return {json::parse(bytes.substr(16, len)), bytes.substr(16 + len)};
}

std::string join(const json& header, const std::string& payload) {
    const std::string h = header.dump();
    std::string out("LENS1\0\0\0", 8);
    std::uint64_t len = h.size();
    for (int k = 0; k < 8; ++k) out += static_cast<char>((len >> (8 * k)) & 0xff);
    return out + h + payload;
}

template <class F>
std::string data_error(F&& f) {
    try {
        f();
    } catch (const DataError& e) {
        EXPECT_EQ(e.exit_code(), 2);
        return e.what();
    }
    ADD_FAILURE() << "expected DataError";
    return {};
}

bool has(const std::string& text, const std::string& part) { return text.find(part) != std::string::npos; }

Model sample_model(Architecture arch = Architecture::PostLN) {
    return random_model(tiny_config(arch, ActivationKind::GeluErf, 8, 2, 2), 21);
}

} // namespace

using WeightFile = TempDir;

TEST_F(WeightFile, RoundTripIsBitIdentical) {
    for (auto arch : {Architecture::PostLN, Architecture::PreLN}) {
        const Model m = sample_model(arch);
        save_model(m, path("m.lens"));
        const Model r = load_model(path("m.lens"));
        EXPECT_EQ(config_to_json(r.config), config_to_json(m.config));
        EXPECT_EQ(r.embedding.token, m.embedding.token);
        EXPECT_EQ(r.final_ln.has_value(), m.final_ln.has_value());
        for (std::size_t l = 0; l < m.layers.size(); ++l) {
            EXPECT_EQ(r.layers[l].wq, m.layers[l].wq);
            EXPECT_EQ(r.layers[l].w1, m.layers[l].w1);
            EXPECT_EQ(r.layers[l].ln2_beta, m.layers[l].ln2_beta);
        }
        EXPECT_EQ(serialize_model(r), serialize_model(m));
        EXPECT_EQ(config_to_json(load_config(path("m.lens"))), config_to_json(m.config));
    }
}

TEST_F(WeightFile, BadMagic) {
    std::string bytes = serialize_model(sample_model());
    bytes[0] = 'X';
    EXPECT_TRUE(has(data_error([&] { parse_model(bytes); }), "magic"));
    detail::write_file(path("bad.lens"), bytes);
    EXPECT_TRUE(has(data_error([&] { load_config(path("bad.lens")); }), "magic"));
}

TEST_F(WeightFile, TruncationNamesFirstUnreadableTensor) {
    const std::string bytes = serialize_model(sample_model());
    const auto [header, payload] = split(bytes);
    // Cut inside the tensor that starts halfway into the payload.
    std::string victim;
    std::size_t cut = 0;
    for (const auto& t : header["tensors"]) {
        const std::size_t off = t["offset"], len = t["length"];
        if (off <= payload.size() / 2 && payload.size() / 2 < off + len) {
            victim = t["name"];
            cut = off + len / 2;
        }
    }
    ASSERT_FALSE(victim.empty());
    const std::string truncated = bytes.substr(0, bytes.size() - payload.size() + cut);
    const auto msg = data_error([&] { parse_model(truncated); });
    EXPECT_TRUE(has(msg, "'" + victim + "'")) << msg;
    EXPECT_TRUE(has(msg, "truncated")) << msg;
}

TEST_F(WeightFile, OverlapIsRejected) {
    const auto [header, payload] = split(serialize_model(sample_model()));
    json h = header;
    h["tensors"][2]["offset"] = h["tensors"][1]["offset"].get<std::size_t>() + 4;
    EXPECT_TRUE(has(data_error([&] { parse_model(join(h, payload)); }), "overlaps"));
}

TEST_F(WeightFile, ShapeMismatchNamesTensor) {
    const auto [header, payload] = split(serialize_model(sample_model()));
    json h = header;
    for (auto& t : h["tensors"]) {
        if (t["name"] == "embed.pos") {
            const std::size_t d = t["shape"][1];
            t["shape"][0] = t["shape"][0].get<std::size_t>() - 1;
            t["length"] = t["length"].get<std::size_t>() - 4 * d;
        }
    }
    const auto msg = data_error([&] { parse_model(join(h, payload)); });
    EXPECT_TRUE(has(msg, "embed.pos")) << msg;

    h = header;
    h["tensors"][0]["length"] = 8;
    EXPECT_TRUE(has(data_error([&] { parse_model(join(h, payload)); }), "shape does not match length"));
}

TEST_F(WeightFile, MissingAndUnexpectedTensors) {
    const auto [header, payload] = split(serialize_model(sample_model()));
    json h = header;
    for (std::size_t k = 0; k < h["tensors"].size(); ++k)
        if (h["tensors"][k]["name"] == "layer.1.ff.w1") h["tensors"].erase(k);
    const auto missing = data_error([&] { parse_model(join(h, payload)); });
    EXPECT_TRUE(has(missing, "missing tensor 'layer.1.ff.w1'")) << missing;
    h = header;
    auto extra = h["tensors"][0];
    extra["name"] = "layer.9.ff.w1";
    extra["offset"] = payload.size();
    h["tensors"].push_back(extra);
    EXPECT_TRUE(has(data_error([&] { parse_model(join(h, payload + std::string(extra["length"].get<std::size_t>(), '\0'))); }),
                    "unexpected tensor"));
}

TEST_F(WeightFile, NonFiniteValueNamesTensor) {
    Model m = sample_model();
    m.layers[1].b2[3] = std::numeric_limits<double>::quiet_NaN();
    const auto msg = data_error([&] { parse_model(serialize_model(m)); });
    EXPECT_TRUE(has(msg, "layer.1.ff.b2")) << msg;
    EXPECT_TRUE(has(msg, "index 3")) << msg;
}

using Corpus = TempDir;

TEST_F(Corpus, RoundTrip) {
    TokenSequence a{"s1", {3, 4, 5}, {"a", "b", "c"}, "d1", std::vector<std::int64_t>{0, 0, 1}};
    TokenSequence b{"s2", {6}, {"x,\"y\""}, std::nullopt, std::nullopt};
    write_corpus({a, b}, path("c.jsonl"));
    const auto r = read_corpus(path("c.jsonl"));
    ASSERT_EQ(r.size(), 2u);
    EXPECT_EQ(r[0].token_ids, a.token_ids);
    EXPECT_EQ(r[0].words, a.words);
    EXPECT_EQ(r[0].doc_id, a.doc_id);
    EXPECT_EQ(r[0].sentence_index, a.sentence_index);
    EXPECT_EQ(r[1].words, b.words);
    EXPECT_FALSE(r[1].doc_id.has_value());
}

TEST_F(Corpus, ErrorsCarryLineNumbers) {
    {
        std::ofstream out(path("c.jsonl"));
        out << R"({"id": 1, "tokens": [1, 2], "words": ["a", "b"]})" << "\n\n"
            << R"({"id": 2, "tokens": [1, 2], "words": ["a"]})" << "\n";
    }
    const auto msg = data_error([&] { read_corpus(path("c.jsonl")); });
    EXPECT_TRUE(has(msg, "corpus line 3")) << msg;
    EXPECT_TRUE(has(data_error([] { parse_corpus_line("{not json", 7); }), "line 7"));
    EXPECT_TRUE(has(data_error([] { parse_corpus_line(R"({"tokens": [1], "words": ["a"]})", 1); }), "'id'"));
    EXPECT_TRUE(has(data_error([] { parse_corpus_line(R"({"id": "x", "tokens": [], "words": []})", 1); }), "empty"));
    EXPECT_TRUE(has(data_error([&] { read_corpus(path("missing.jsonl")); }), "cannot open"));
}

using MapDump = TempDir;

TEST_F(MapDump, BinaryAndJsonRoundTrip) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 5.0);
    Matrix m(4, 4);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<float>(u(rng));
    m(0, 3) = 7.0; // asymmetric entry catches transposition
    write_map_binary(m, path("m.bin"));
    write_map_json(m, path("m.json"));
    EXPECT_EQ(read_map_binary(path("m.bin")), m);
    EXPECT_EQ(read_map_json(path("m.json")), m);
    EXPECT_EQ(fs::file_size(path("m.bin")), 4u + 4u * 16u);
    detail::write_file(path("short.bin"), std::string("\x03\0\0\0\0\0", 6));
    EXPECT_TRUE(has(data_error([&] { read_map_binary(path("short.bin")); }), "size"));
}

TEST(Csv, QuotingRoundTrip) {
    const std::vector<std::vector<std::string>> rows{{"a", "b,c", "say \"hi\""}, {"multi\nline", "", "x"}};
    std::string text;
    for (const auto& r : rows) text += csv_line(r);
    EXPECT_EQ(parse_csv(text), rows);
    EXPECT_EQ(parse_csv("x,y\r\n1,2\r\n"), (std::vector<std::vector<std::string>>{{"x", "y"}, {"1", "2"}}));
    EXPECT_THROW(parse_csv("\"open"), DataError);
    CsvWriter w({"layer", "value"});
    w.row({"0", format_number(0.5)});
    EXPECT_EQ(w.text(), "layer,value\n0,0.5\n");
}

TEST(Csv, FormatNumber) {
    EXPECT_EQ(format_number(0.1), "0.1");
    EXPECT_EQ(format_number(-0.0), "0");
    EXPECT_EQ(format_number(2.0), "2");
    EXPECT_EQ(format_number(1.0 / 3.0), "0.333333333");
    EXPECT_EQ(format_number(std::numeric_limits<double>::quiet_NaN()), "nan");
    EXPECT_EQ(format_number(-std::numeric_limits<double>::infinity()), "-inf");
    EXPECT_TRUE(std::isnan(parse_number("nan", "t")));
    const double v = 0.123456789123;
    EXPECT_NEAR(parse_number(format_number(v), "t"), v, 1e-9);
    EXPECT_THROW(parse_number("1.5x", "t"), DataError);
}

TEST(Reference, MatchesOwnForwardPass) {
    const Model m = sample_model(Architecture::PreLN);
    const auto seq = random_sequence(m.config, 5, 2);
    const Matrix h = forward_model(seq, m).final();
    json rows = json::array();
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
        json r = json::array();
        for (Eigen::Index k = 0; k < h.cols(); ++k) r.push_back(h(i, k));
        rows.push_back(r);
    }
    json manifest{{"reference", {{"id", "ref"}, {"tokens", seq.token_ids}, {"final_hidden", rows}}}};
    EXPECT_EQ(compare_reference(m, manifest).max_abs_diff, 0.0);
    manifest["reference"]["final_hidden"][2][1] = h(2, 1) + 0.25;
    EXPECT_NEAR(compare_reference(m, manifest).max_abs_diff, 0.25, 1e-12);
    manifest["reference"]["final_hidden"].erase(0);
    EXPECT_THROW(compare_reference(m, manifest), DataError);
    EXPECT_THROW(compare_reference(m, json::object()), DataError);
}
