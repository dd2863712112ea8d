#include "cbmkit/io_util.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cbmkit/error.hpp"

namespace cbmkit {

namespace {

template <typename U>
U to_little(U value) {
    if constexpr (std::endian::native == std::endian::little) {
        return value;
    } else {
        U out = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            out = (out << 8) | ((value >> (8 * i)) & 0xFF);
        }
        return out;
    }
}

template <typename U>
void append_raw(std::string& out, U value) {
    value = to_little(value);
    char buf[sizeof(U)];
    std::memcpy(buf, &value, sizeof(U));
    out.append(buf, sizeof(U));
}

template <typename U>
U read_raw(const char* bytes) {
    U value;
    std::memcpy(&value, bytes, sizeof(U));
    return to_little(value);
}

}  // namespace

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) fail(ErrorCode::Io, "read error on " + path.string());
    return std::move(ss).str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) fail(ErrorCode::Io, "write error on " + path.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        fail(ErrorCode::Io, "cannot move output into place: " + path.string());
    }
}

std::vector<std::string> split_lines(std::string_view text) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        lines.emplace_back(line);
        start = end + 1;
    }
    return lines;
}

void append_le_u64(std::string& out, std::uint64_t value) { append_raw(out, value); }

std::uint64_t read_le_u64(std::span<const char> bytes) {
    if (bytes.size() < 8) fail(ErrorCode::Corrupt, "truncated integer");
    return read_raw<std::uint64_t>(bytes.data());
}

void append_le_f64(std::string& out, std::span<const double> values) {
    out.reserve(out.size() + values.size() * 8);
    for (double v : values) append_raw(out, std::bit_cast<std::uint64_t>(v));
}

void read_le_f64(std::span<const char> bytes, std::span<double> out) {
    if (bytes.size() != out.size() * 8) fail(ErrorCode::Shape, "f64 block has wrong byte length");
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::bit_cast<double>(read_raw<std::uint64_t>(bytes.data() + 8 * i));
    }
}

void append_le_f32(std::string& out, std::span<const double> values) {
    out.reserve(out.size() + values.size() * 4);
    for (double v : values) append_raw(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

void read_le_f32(std::span<const char> bytes, std::span<double> out) {
    if (bytes.size() != out.size() * 4) fail(ErrorCode::Shape, "f32 block has wrong byte length");
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::bit_cast<float>(read_raw<std::uint32_t>(bytes.data() + 4 * i));
    }
}

std::string csv_field(std::string_view text) {
    if (text.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(text);
    std::string out = "\"";
    for (char c : text) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::string fnv1a64_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = kHex[h & 0xF];
        h >>= 4;
    }
    return out;
}

}  // namespace cbmkit
