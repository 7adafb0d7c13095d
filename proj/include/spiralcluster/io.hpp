#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "spiralcluster/error.hpp"

namespace spiralcluster::io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline std::uint32_t get_u32(std::string_view in, std::size_t offset) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
    return v;
}

inline float get_f32(std::string_view in, std::size_t offset) {
    return std::bit_cast<float>(get_u32(in, offset));
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return std::move(ss).str();
}

// Writes to a sibling temp file and renames, so readers never see a half-written artifact.
inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw io_error("cannot write " + tmp.string());
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw io_error("short write on " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw io_error("cannot rename " + tmp.string() + ": " + ec.message());
}

// Float32 table with a 4-byte magic and u32 header words, shared by the ATC1 and ATL1 formats.
struct Float32Table {
    std::vector<std::uint32_t> header;
    std::vector<float> values;
};

inline std::string encode_table(std::string_view magic, const Float32Table& t) {
    std::string out(magic);
    for (auto h : t.header) put_u32(out, h);
    out.reserve(out.size() + 4 * t.values.size());
    for (float v : t.values) put_f32(out, v);
    return out;
}

inline Float32Table decode_table(std::string_view bytes, std::string_view magic, std::size_t header_words,
                                 const std::string& what) {
    if (bytes.size() < magic.size() || bytes.substr(0, magic.size()) != magic)
        throw bad_magic_error(what + ": expected magic \"" + std::string(magic) + "\"");
    const std::size_t head = magic.size() + 4 * header_words;
    if (bytes.size() < head)
        throw truncated_error(what + ": header truncated: expected " + std::to_string(head) + " bytes, got " +
                              std::to_string(bytes.size()));
    Float32Table t;
    std::uint64_t count = 1;
    for (std::size_t i = 0; i < header_words; ++i) {
        t.header.push_back(get_u32(bytes, magic.size() + 4 * i));
        count *= t.header.back();
    }
    const std::uint64_t expected = head + 4 * count;
    if (bytes.size() != expected)
        throw truncated_error(what + ": expected " + std::to_string(expected) + " bytes, got " +
                              std::to_string(bytes.size()));
    t.values.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) t.values[i] = get_f32(bytes, head + 4 * i);
    return t;
}

// "id,label" CSV. An empty label field means unlabelled.
struct LabelRow {
    std::string id;
    std::string label;
};

inline std::string encode_labels_csv(const std::vector<LabelRow>& rows) {
    std::string out = "id,label\n";
    for (const auto& r : rows) out += r.id + "," + r.label + "\n";
    return out;
}

inline std::vector<LabelRow> decode_labels_csv(std::string_view text, const std::string& what) {
    std::vector<LabelRow> rows;
    std::size_t pos = 0;
    bool first = true;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;
        if (first) {
            first = false;
            if (line == "id,label") continue;
        }
        const auto comma = line.find(',');
        if (comma == std::string_view::npos) throw load_error(what + ": malformed line \"" + std::string(line) + "\"");
        rows.push_back({std::string(line.substr(0, comma)), std::string(line.substr(comma + 1))});
    }
    return rows;
}

inline std::vector<LabelRow> read_labels_csv(const std::filesystem::path& path) {
    return decode_labels_csv(read_file(path), path.string());
}

}  // namespace spiralcluster::io
