#include "prefcurate/io.hpp"

#include <bit>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace prefcurate {

namespace {

void ensure_parent(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

template <typename T>
void put_le(std::ostream& os, T v) {
  char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw std::runtime_error("truncated binary stream");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, std::span<const json> records) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) out << r.dump() << '\n';
}

void append_jsonl(const std::filesystem::path& path, const json& record) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path.string());
  out << record.dump() << '\n';
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void put_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
void put_u64(std::ostream& os, std::uint64_t v) { put_le(os, v); }
void put_f64(std::ostream& os, double v) { put_le(os, std::bit_cast<std::uint64_t>(v)); }
std::uint32_t get_u32(std::istream& is) { return get_le<std::uint32_t>(is); }
std::uint64_t get_u64(std::istream& is) { return get_le<std::uint64_t>(is); }
double get_f64(std::istream& is) { return std::bit_cast<double>(get_le<std::uint64_t>(is)); }

}  // namespace prefcurate
