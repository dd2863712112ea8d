#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cbmkit {

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary and renames over `path`, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::vector<std::string> split_lines(std::string_view text);

void append_le_u64(std::string& out, std::uint64_t value);
std::uint64_t read_le_u64(std::span<const char> bytes);
void append_le_f64(std::string& out, std::span<const double> values);
void read_le_f64(std::span<const char> bytes, std::span<double> out);
void append_le_f32(std::string& out, std::span<const double> values);
void read_le_f32(std::span<const char> bytes, std::span<double> out);

/// Quotes a CSV field when it contains a comma, quote or newline.
std::string csv_field(std::string_view text);

/// 64-bit FNV-1a, rendered as 16 lowercase hex digits.
std::string fnv1a64_hex(std::string_view bytes);

}  // namespace cbmkit
