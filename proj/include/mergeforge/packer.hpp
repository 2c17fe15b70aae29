#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace mergeforge {

class PackError : public std::runtime_error {
public:
    explicit PackError(const std::string& what) : std::runtime_error(what) {}
};

struct TokenSequence {
    std::string id;
    std::vector<uint32_t> tokens;
};

struct Segment {
    std::string id;       // originating sequence
    uint32_t chunk = 0;   // chunk index within that sequence
    uint64_t start = 0;   // offset inside the block
    uint64_t length = 0;
};

// Fixed-capacity training block: concatenated chunks with boundary metadata
// for cross-document attention masking. No padding inside the occupied region.
struct PackedBlock {
    uint64_t capacity = 4096;
    std::vector<Segment> segments;
    std::vector<uint32_t> tokens;

    uint64_t fill() const { return tokens.size(); }
    uint64_t remaining() const { return capacity - tokens.size(); }
};

inline constexpr uint64_t kDefaultBlockCapacity = 4096;

// Best-fit-decreasing without truncation: oversized sequences split at exact
// capacity boundaries, then chunks are sorted (length desc, input order asc)
// and each placed into the open block with the least sufficient remaining
// space, ties to the lowest block index.
inline std::vector<PackedBlock> best_fit_pack(const std::vector<TokenSequence>& sequences,
                                              uint64_t capacity = kDefaultBlockCapacity) {
    if (capacity < 1) throw PackError("capacity must be at least 1");

    struct Chunk {
        const TokenSequence* seq;
        uint32_t chunk_index;
        uint64_t offset;  // into seq->tokens
        uint64_t length;
        size_t input_order;
    };
    std::vector<Chunk> chunks;
    size_t order = 0;
    for (const auto& s : sequences) {
        for (uint64_t off = 0; off < s.tokens.size(); off += capacity) {
            const uint64_t len = std::min<uint64_t>(capacity, s.tokens.size() - off);
            chunks.push_back({&s, static_cast<uint32_t>(off / capacity), off, len, order++});
        }
    }
    std::sort(chunks.begin(), chunks.end(), [](const Chunk& a, const Chunk& b) {
        if (a.length != b.length) return a.length > b.length;
        return a.input_order < b.input_order;
    });

    std::vector<PackedBlock> blocks;
    // (remaining, block index): lower_bound finds the tightest block that
    // still fits, preferring the lowest index among equals.
    std::set<std::pair<uint64_t, size_t>> open;
    for (const auto& c : chunks) {
        auto it = open.lower_bound({c.length, 0});
        size_t bi;
        if (it == open.end()) {
            bi = blocks.size();
            blocks.push_back(PackedBlock{capacity, {}, {}});
        } else {
            bi = it->second;
            open.erase(it);
        }
        PackedBlock& b = blocks[bi];
        b.segments.push_back({c.seq->id, c.chunk_index, b.fill(), c.length});
        b.tokens.insert(b.tokens.end(), c.seq->tokens.begin() + static_cast<ptrdiff_t>(c.offset),
                        c.seq->tokens.begin() + static_cast<ptrdiff_t>(c.offset + c.length));
        if (b.remaining() > 0) open.insert({b.remaining(), bi});
    }
    return blocks;
}

enum class PitPhase : uint8_t { TaskOnly, TaskPlusDocument };

// Concatenation with end-of-sequence separators: task items joined by a
// single separator, optionally followed by the source document.
inline TokenSequence pit_concat(const std::vector<TokenSequence>& task_items,
                                const TokenSequence* document, uint32_t eos_id, PitPhase phase) {
    if (task_items.empty()) throw PackError("pit_concat requires at least one task item");
    if (phase == PitPhase::TaskPlusDocument && document == nullptr)
        throw PackError("task_plus_document phase requires a document");
    for (const auto& item : task_items)
        if (item.tokens.empty()) throw PackError("task item \"" + item.id + "\" is empty");

    TokenSequence out;
    out.id = task_items.front().id;
    for (size_t i = 0; i < task_items.size(); ++i) {
        if (i > 0) out.tokens.push_back(eos_id);
        out.tokens.insert(out.tokens.end(), task_items[i].tokens.begin(), task_items[i].tokens.end());
    }
    if (phase == PitPhase::TaskPlusDocument) {
        if (document->tokens.empty()) throw PackError("document \"" + document->id + "\" is empty");
        out.tokens.push_back(eos_id);
        out.tokens.insert(out.tokens.end(), document->tokens.begin(), document->tokens.end());
    }
    return out;
}

// Disjoint (start, end) spans covering [0, fill), one per segment in order.
inline std::vector<std::pair<uint64_t, uint64_t>> segment_mask_bounds(const PackedBlock& block) {
    std::vector<std::pair<uint64_t, uint64_t>> spans;
    for (const auto& s : block.segments) spans.emplace_back(s.start, s.start + s.length);
    return spans;
}

// Line-delimited JSON I/O.

inline TokenSequence sequence_from_json_line(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw PackError(std::string("sequence line is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("tokens") ||
        !j["tokens"].is_array())
        throw PackError("sequence line must be {\"id\": string, \"tokens\": [ints]}");
    TokenSequence s;
    s.id = j["id"].get<std::string>();
    for (const auto& t : j["tokens"]) {
        if (!t.is_number_unsigned()) throw PackError("sequence \"" + s.id + "\": non-integer token");
        s.tokens.push_back(t.get<uint32_t>());
    }
    if (s.tokens.empty()) throw PackError("sequence \"" + s.id + "\" has no tokens");
    return s;
}

inline std::vector<TokenSequence> read_sequences(std::istream& in) {
    std::vector<TokenSequence> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(sequence_from_json_line(line));
        } catch (const PackError& e) {
            throw PackError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

inline void write_blocks(const std::vector<PackedBlock>& blocks, std::ostream& out) {
    for (const auto& b : blocks) {
        nlohmann::ordered_json j;
        j["capacity"] = b.capacity;
        j["segments"] = nlohmann::ordered_json::array();
        for (const auto& s : b.segments)
            j["segments"].push_back(
                {{"id", s.id}, {"chunk", s.chunk}, {"start", s.start}, {"len", s.length}});
        j["tokens"] = b.tokens;
        out << j.dump() << "\n";
    }
}

}  // namespace mergeforge
