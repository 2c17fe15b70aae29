#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mergeforge/dtype.hpp"

namespace mergeforge {

// Thrown for malformed checkpoint files; message names the offending
// tensor or byte position.
class StoreError : public std::runtime_error {
public:
    explicit StoreError(const std::string& what) : std::runtime_error(what) {}
};

struct TensorMeta {
    std::string name;
    DType dtype = DType::F32;
    std::vector<uint64_t> shape;
    std::pair<uint64_t, uint64_t> data_offsets{0, 0};  // relative to data region

    uint64_t num_elements() const {
        uint64_t n = 1;
        for (uint64_t d : shape) n *= d;
        return n;
    }
    uint64_t num_bytes() const { return num_elements() * element_size(dtype); }
};

struct Tensor {
    std::vector<float> values;  // 32-bit working precision
    std::vector<uint64_t> shape;
    DType original_dtype = DType::F32;
};

// Named tensor collection. std::map keeps iteration lexicographic by name.
struct WeightMap {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;
};

struct LoadReport {
    std::vector<std::string> nan_tensors;  // loaded but flagged
};

struct ParsedHeader {
    uint64_t header_length = 0;
    std::vector<TensorMeta> tensors;  // file order
    std::map<std::string, std::string> metadata;
};

// Dtype policy for store_weights: keep each tensor's original dtype or
// force a single storage dtype for the whole file.
struct DtypePolicy {
    bool preserve = true;
    DType forced = DType::F32;

    static DtypePolicy preserve_original() { return {true, DType::F32}; }
    static DtypePolicy force(DType d) { return {false, d}; }
    DType resolve(DType original) const { return preserve ? original : forced; }
};

namespace detail {

inline uint64_t read_u64_le(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

inline void write_u64_le(uint64_t v, std::string& out) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

}  // namespace detail

// Parses the [8-byte LE length][JSON header] prefix and validates every
// tensor entry against the remaining data region of `file_size` bytes.
inline ParsedHeader parse_header(const uint8_t* data, size_t file_size) {
    if (file_size < 8) throw StoreError("truncated stream: " + std::to_string(file_size) + " bytes, need at least 8");
    const uint64_t n = detail::read_u64_le(data);
    if (n > file_size - 8)
        throw StoreError("header length " + std::to_string(n) + " exceeds file size " + std::to_string(file_size));
    const uint64_t data_region = file_size - 8 - n;

    nlohmann::json doc;
    // nlohmann collapses duplicate object keys, so track them in the callback.
    bool duplicate = false;
    std::string dup_key;
    std::vector<std::vector<std::string>> key_stack;
    auto cb = [&](int depth, nlohmann::json::parse_event_t ev, nlohmann::json& parsed) {
        (void)depth;
        if (ev == nlohmann::json::parse_event_t::object_start) {
            key_stack.emplace_back();
        } else if (ev == nlohmann::json::parse_event_t::object_end) {
            key_stack.pop_back();
        } else if (ev == nlohmann::json::parse_event_t::key) {
            auto& keys = key_stack.back();
            std::string k = parsed.get<std::string>();
            if (std::find(keys.begin(), keys.end(), k) != keys.end() && !duplicate) {
                duplicate = true;
                dup_key = k;
            }
            keys.push_back(std::move(k));
        }
        return true;
    };
    try {
        doc = nlohmann::json::parse(data + 8, data + 8 + n, cb);
    } catch (const nlohmann::json::exception& e) {
        throw StoreError(std::string("malformed JSON header: ") + e.what());
    }
    if (duplicate) throw StoreError("duplicate name in header: \"" + dup_key + "\"");
    if (!doc.is_object()) throw StoreError("malformed JSON header: top level is not an object");

    ParsedHeader out;
    out.header_length = n;
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        const std::string& name = it.key();
        if (name == "__metadata__") {
            if (!it.value().is_object()) throw StoreError("__metadata__ is not an object");
            for (auto m = it.value().begin(); m != it.value().end(); ++m) {
                if (!m.value().is_string())
                    throw StoreError("__metadata__ value for \"" + m.key() + "\" is not a string");
                out.metadata[m.key()] = m.value().get<std::string>();
            }
            continue;
        }
        if (name.empty()) throw StoreError("empty tensor name in header");
        TensorMeta meta;
        meta.name = name;
        const auto& entry = it.value();
        if (!entry.is_object()) throw StoreError("entry for \"" + name + "\" is not an object");
        if (!entry.contains("dtype") || !entry["dtype"].is_string())
            throw StoreError("tensor \"" + name + "\": missing or non-string dtype");
        if (!parse_dtype(entry["dtype"].get<std::string>(), meta.dtype))
            throw StoreError("tensor \"" + name + "\": unknown dtype \"" + entry["dtype"].get<std::string>() + "\"");
        if (!entry.contains("shape") || !entry["shape"].is_array())
            throw StoreError("tensor \"" + name + "\": missing or non-array shape");
        for (const auto& d : entry["shape"]) {
            if (!d.is_number_unsigned())
                throw StoreError("tensor \"" + name + "\": negative or non-integer dimension");
            meta.shape.push_back(d.get<uint64_t>());
        }
        if (!entry.contains("data_offsets") || !entry["data_offsets"].is_array() ||
            entry["data_offsets"].size() != 2 || !entry["data_offsets"][0].is_number_unsigned() ||
            !entry["data_offsets"][1].is_number_unsigned())
            throw StoreError("tensor \"" + name + "\": data_offsets must be [begin, end]");
        meta.data_offsets = {entry["data_offsets"][0].get<uint64_t>(),
                             entry["data_offsets"][1].get<uint64_t>()};
        const auto [begin, end] = meta.data_offsets;
        if (end < begin) throw StoreError("tensor \"" + name + "\": end offset precedes begin");
        if (end - begin != meta.num_bytes())
            throw StoreError("tensor \"" + name + "\": byte span " + std::to_string(end - begin) +
                             " does not match shape and dtype (" + std::to_string(meta.num_bytes()) + ")");
        if (end > data_region)
            throw StoreError("tensor \"" + name + "\": end offset " + std::to_string(end) +
                             " exceeds data region size " + std::to_string(data_region));
        out.tensors.push_back(std::move(meta));
    }

    // Reject overlapping byte ranges (zero-length spans may share a position).
    std::vector<const TensorMeta*> by_begin;
    for (const auto& t : out.tensors) by_begin.push_back(&t);
    std::sort(by_begin.begin(), by_begin.end(), [](const TensorMeta* a, const TensorMeta* b) {
        return a->data_offsets < b->data_offsets;
    });
    for (size_t i = 1; i < by_begin.size(); ++i) {
        if (by_begin[i]->data_offsets.first < by_begin[i - 1]->data_offsets.second)
            throw StoreError("tensors \"" + by_begin[i - 1]->name + "\" and \"" + by_begin[i]->name +
                             "\" have overlapping data offsets");
    }
    return out;
}

inline ParsedHeader parse_header(const std::vector<uint8_t>& bytes) {
    return parse_header(bytes.data(), bytes.size());
}

inline std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StoreError("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const std::streamoff size = in.tellg();
    in.seekg(0);
    std::vector<uint8_t> bytes(static_cast<size_t>(size));
    if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), size))
        throw StoreError("short read on " + path.string());
    return bytes;
}

inline WeightMap load_weights(const std::filesystem::path& path, LoadReport* report = nullptr) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    ParsedHeader header;
    try {
        header = parse_header(bytes);
    } catch (const StoreError& e) {
        throw StoreError(path.string() + ": " + e.what());
    }
    const uint8_t* data_region = bytes.data() + 8 + header.header_length;

    WeightMap wm;
    wm.metadata = header.metadata;
    for (const auto& meta : header.tensors) {
        Tensor t;
        t.shape = meta.shape;
        t.original_dtype = meta.dtype;
        const uint64_t count = meta.num_elements();
        t.values.resize(count);
        const uint8_t* src = data_region + meta.data_offsets.first;
        bool has_nan = false;
        switch (meta.dtype) {
            case DType::F32:
                std::memcpy(t.values.data(), src, count * 4);
                break;
            case DType::F16:
                for (uint64_t i = 0; i < count; ++i) {
                    uint16_t bits;
                    std::memcpy(&bits, src + 2 * i, 2);
                    t.values[i] = decode_f16(bits);
                }
                break;
            case DType::BF16:
                for (uint64_t i = 0; i < count; ++i) {
                    uint16_t bits;
                    std::memcpy(&bits, src + 2 * i, 2);
                    t.values[i] = decode_bf16(bits);
                }
                break;
        }
        for (uint64_t i = 0; i < count && !has_nan; ++i) has_nan = std::isnan(t.values[i]);
        if (has_nan && report) report->nan_tensors.push_back(meta.name);
        wm.tensors.emplace(meta.name, std::move(t));
    }
    return wm;
}

// Serializes a WeightMap to the canonical layout: tensors sorted
// lexicographically, data region contiguous with no gaps, header JSON with
// a fixed field order. Re-serializing a canonical file is byte-identical.
inline std::string serialize_weights(const WeightMap& wm, const DtypePolicy& policy) {
    nlohmann::ordered_json header = nlohmann::ordered_json::object();
    if (!wm.metadata.empty()) {
        nlohmann::ordered_json meta = nlohmann::ordered_json::object();
        for (const auto& [k, v] : wm.metadata) meta[k] = v;
        header["__metadata__"] = std::move(meta);
    }

    std::string data;
    for (const auto& [name, tensor] : wm.tensors) {
        const DType target = policy.resolve(tensor.original_dtype);
        const uint64_t begin = data.size();
        switch (target) {
            case DType::F32: {
                const size_t at = data.size();
                data.resize(at + tensor.values.size() * 4);
                std::memcpy(data.data() + at, tensor.values.data(), tensor.values.size() * 4);
                break;
            }
            case DType::F16:
                for (float v : tensor.values) {
                    const uint16_t bits = encode_f16(v);
                    data.push_back(static_cast<char>(bits & 0xFF));
                    data.push_back(static_cast<char>(bits >> 8));
                }
                break;
            case DType::BF16:
                for (float v : tensor.values) {
                    const uint16_t bits = encode_bf16(v);
                    data.push_back(static_cast<char>(bits & 0xFF));
                    data.push_back(static_cast<char>(bits >> 8));
                }
                break;
        }
        nlohmann::ordered_json entry = nlohmann::ordered_json::object();
        entry["dtype"] = dtype_name(target);
        entry["shape"] = tensor.shape;
        entry["data_offsets"] = {begin, data.size()};
        header[name] = std::move(entry);
    }

    const std::string header_json = header.dump();
    std::string out;
    out.reserve(8 + header_json.size() + data.size());
    detail::write_u64_le(header_json.size(), out);
    out += header_json;
    out += data;
    return out;
}

inline void store_weights(const WeightMap& wm, const std::filesystem::path& path,
                          const DtypePolicy& policy = DtypePolicy::preserve_original()) {
    const std::string bytes = serialize_weights(wm, policy);
    std::ofstream outf(path, std::ios::binary | std::ios::trunc);
    if (!outf) throw StoreError("cannot open " + path.string() + " for writing");
    outf.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!outf) throw StoreError("short write on " + path.string());
}

}  // namespace mergeforge
