#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace prefcurate {

using json = nlohmann::json;

std::vector<json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, std::span<const json> records);
void append_jsonl(const std::filesystem::path& path, const json& record);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

// Little-endian primitives, independent of host byte order.
void put_u32(std::ostream& os, std::uint32_t v);
void put_u64(std::ostream& os, std::uint64_t v);
void put_f64(std::ostream& os, double v);
std::uint32_t get_u32(std::istream& is);
std::uint64_t get_u64(std::istream& is);
double get_f64(std::istream& is);

}  // namespace prefcurate
