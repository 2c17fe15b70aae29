#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "mergeforge/tensor_store.hpp"

using namespace mergeforge;

namespace {

std::string minimal_file() {
    // One F32 tensor "t" of shape [2], data [1.0f, 2.0f].
    WeightMap wm;
    Tensor t;
    t.values = {1.0f, 2.0f};
    t.shape = {2};
    wm.tensors.emplace("t", std::move(t));
    return serialize_weights(wm, DtypePolicy::preserve_original());
}

std::string make_raw(const std::string& header_json, const std::string& data) {
    std::string out;
    detail::write_u64_le(header_json.size(), out);
    out += header_json + data;
    return out;
}

ParsedHeader parse_str(const std::string& bytes) {
    return parse_header(reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size());
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("parse minimal well-formed file") {
    const std::string raw = minimal_file();
    const ParsedHeader h = parse_str(raw);
    REQUIRE(h.tensors.size() == 1);
    CHECK(h.tensors[0].name == "t");
    CHECK(h.tensors[0].dtype == DType::F32);
    CHECK(h.tensors[0].shape == std::vector<uint64_t>{2});
    CHECK(h.tensors[0].data_offsets == std::pair<uint64_t, uint64_t>{0, 8});
}

TEST_CASE("header with trailing-space padding parses") {
    std::string hj = R"({"t":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})";
    hj.resize(64, ' ');
    const ParsedHeader h = parse_str(make_raw(hj, std::string(8, '\0')));
    CHECK(h.header_length == 64);
    CHECK(h.tensors.size() == 1);
}

TEST_CASE("structural errors are rejected with diagnostics") {
    SUBCASE("truncated stream") {
        CHECK_THROWS_AS(parse_str("abc"), StoreError);
    }
    SUBCASE("declared end offset exceeds file size") {
        const std::string hj = R"({"t":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}})";
        CHECK_THROWS_WITH_AS(parse_str(make_raw(hj, std::string(8, '\0'))),
                             doctest::Contains("exceeds data region"), StoreError);
    }
    SUBCASE("overlapping tensors") {
        const std::string hj =
            R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},)"
            R"("b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}})";
        CHECK_THROWS_WITH_AS(parse_str(make_raw(hj, std::string(12, '\0'))),
                             doctest::Contains("overlap"), StoreError);
    }
    SUBCASE("duplicate names") {
        const std::string hj =
            R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},)"
            R"("a":{"dtype":"F32","shape":[2],"data_offsets":[8,16]}})";
        CHECK_THROWS_WITH_AS(parse_str(make_raw(hj, std::string(16, '\0'))),
                             doctest::Contains("duplicate"), StoreError);
    }
    SUBCASE("unknown dtype") {
        const std::string hj = R"({"t":{"dtype":"I8","shape":[8],"data_offsets":[0,8]}})";
        CHECK_THROWS_WITH_AS(parse_str(make_raw(hj, std::string(8, '\0'))),
                             doctest::Contains("unknown dtype"), StoreError);
    }
    SUBCASE("byte span inconsistent with shape") {
        const std::string hj = R"({"t":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})";
        CHECK_THROWS_AS(parse_str(make_raw(hj, std::string(8, '\0'))), StoreError);
    }
    SUBCASE("malformed JSON") {
        CHECK_THROWS_AS(parse_str(make_raw("{nonsense", std::string(8, '\0'))), StoreError);
    }
    SUBCASE("header length larger than file") {
        std::string raw = minimal_file();
        raw[0] = static_cast<char>(0xFF);
        raw[1] = static_cast<char>(0xFF);
        CHECK_THROWS_AS(parse_str(raw), StoreError);
    }
}

TEST_CASE("f32 store-load round trip is bitwise") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<float> dist(-100.0f, 100.0f);
    WeightMap wm;
    for (const char* name : {"layer.0.weight", "layer.0.bias", "embed"}) {
        Tensor t;
        t.shape = {4, 5};
        for (int i = 0; i < 20; ++i) t.values.push_back(dist(rng));
        wm.tensors.emplace(name, std::move(t));
    }
    wm.metadata["format"] = "pt";
    const auto path = temp_path("mf_test_roundtrip.safetensors");
    store_weights(wm, path);
    const WeightMap back = load_weights(path);
    REQUIRE(back.tensors.size() == wm.tensors.size());
    CHECK(back.metadata == wm.metadata);
    for (const auto& [name, t] : wm.tensors) {
        const Tensor& b = back.tensors.at(name);
        CHECK(b.shape == t.shape);
        REQUIRE(b.values.size() == t.values.size());
        CHECK(std::memcmp(b.values.data(), t.values.data(), 4 * t.values.size()) == 0);
    }
    std::filesystem::remove(path);
}

TEST_CASE("canonical re-serialization is byte-identical") {
    const std::string once = minimal_file();
    const ParsedHeader h = parse_str(once);
    (void)h;
    const auto path = temp_path("mf_test_canon.safetensors");
    {
        std::ofstream f(path, std::ios::binary);
        f.write(once.data(), static_cast<std::streamsize>(once.size()));
    }
    const WeightMap back = load_weights(path);
    const std::string twice = serialize_weights(back, DtypePolicy::preserve_original());
    CHECK(once == twice);
    std::filesystem::remove(path);
}

TEST_CASE("forced-dtype policy converts and reload matches the rounded values") {
    WeightMap wm;
    Tensor t;
    t.values = {1.0f, 1.0009765625f, -2.5f, 0.0f};
    t.shape = {4};
    wm.tensors.emplace("w", std::move(t));
    const auto path = temp_path("mf_test_bf16.safetensors");
    store_weights(wm, path, DtypePolicy::force(DType::BF16));
    const WeightMap back = load_weights(path);
    const Tensor& b = back.tensors.at("w");
    CHECK(b.original_dtype == DType::BF16);
    CHECK(b.values[0] == 1.0f);
    CHECK(b.values[1] == 1.0f);  // rounds down to the even neighbor
    CHECK(b.values[2] == -2.5f);
    CHECK(b.values[3] == 0.0f);
    std::filesystem::remove(path);
}

TEST_CASE("nan tensors load but are flagged") {
    WeightMap wm;
    Tensor t;
    t.values = {1.0f, std::nanf(""), 3.0f};
    t.shape = {3};
    wm.tensors.emplace("bad", std::move(t));
    Tensor u;
    u.values = {1.0f};
    u.shape = {1};
    wm.tensors.emplace("good", std::move(u));
    const auto path = temp_path("mf_test_nan.safetensors");
    store_weights(wm, path);
    LoadReport report;
    const WeightMap back = load_weights(path, &report);
    CHECK(back.tensors.size() == 2);
    CHECK(report.nan_tensors == std::vector<std::string>{"bad"});
    std::filesystem::remove(path);
}

TEST_CASE("corrupted-header fuzz never crashes") {
    const std::string good = minimal_file();
    std::mt19937_64 rng(1234);
    int errors = 0, accepted = 0;
    for (int i = 0; i < 300; ++i) {
        std::string fuzzed = good;
        const int flips = 1 + static_cast<int>(rng() % 4);
        for (int f = 0; f < flips; ++f) {
            const size_t pos = rng() % fuzzed.size();
            fuzzed[pos] = static_cast<char>(rng() & 0xFF);
        }
        try {
            parse_str(fuzzed);
            ++accepted;  // a mutation may still be well-formed
        } catch (const StoreError&) {
            ++errors;
        }
    }
    CHECK(errors + accepted == 300);
    CHECK(errors > 100);  // most corruptions must be caught
}

TEST_CASE("any header-length corruption past file size is rejected") {
    const std::string good = minimal_file();
    for (int byte = 0; byte < 8; ++byte) {
        for (int bit = 0; bit < 8; ++bit) {
            std::string bad = good;
            bad[byte] = static_cast<char>(bad[byte] ^ (1 << bit));
            const uint64_t n =
                detail::read_u64_le(reinterpret_cast<const uint8_t*>(bad.data()));
            if (n > bad.size() - 8) CHECK_THROWS_AS(parse_str(bad), StoreError);
        }
    }
}
