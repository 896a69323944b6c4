#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "kanseg/tensor.hpp"

namespace kanseg::io {

static_assert(std::endian::native == std::endian::little, "binary records are stored little-endian");

/// Record file layout:
///   "KTSR" u32 version u32 count
///   per record: u32 name_len, name, u8 dtype (1 = f32, 2 = f64), u8 rank, u32 extents[rank], data
inline constexpr char kMagic[4] = {'K', 'T', 'S', 'R'};
inline constexpr std::uint32_t kVersion = 1;

template <class T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "records hold f32 or f64 tensors");
  return std::is_same_v<T, float> ? 1 : 2;
}

template <class T>
struct Record {
  std::string name;
  Tensor<T> tensor;
};

namespace detail {

template <class U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U get(std::istream& is, const std::string& what) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw IoError("truncated record stream while reading " + what);
  return v;
}

}  // namespace detail

template <class T>
void write_tensor(std::ostream& os, const std::string& name, const Tensor<T>& t) {
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  detail::put<std::uint8_t>(os, dtype_code<T>());
  detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
}

/// Reads one record, converting the stored precision to T.
template <class T>
Record<T> read_tensor(std::istream& is) {
  Record<T> r;
  const auto len = detail::get<std::uint32_t>(is, "name length");
  if (len > (1u << 16)) throw IoError("record name length " + std::to_string(len) + " is implausible");
  r.name.resize(len);
  is.read(r.name.data(), len);
  if (!is) throw IoError("truncated record name");
  const auto dtype = detail::get<std::uint8_t>(is, r.name + " dtype");
  const auto rank = detail::get<std::uint8_t>(is, r.name + " rank");
  if (dtype != 1 && dtype != 2) throw IoError(r.name + ": unknown dtype code " + std::to_string(dtype));
  Shape shape(rank);
  for (auto& e : shape) e = detail::get<std::uint32_t>(is, r.name + " extent");
  const std::size_t n = numel(shape);
  std::vector<T> data(n);
  if (dtype == 1) {
    std::vector<float> raw(n);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(float)));
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<T>(raw[i]);
  } else {
    std::vector<double> raw(n);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(double)));
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<T>(raw[i]);
  }
  if (!is) throw IoError("truncated data for record " + r.name);
  r.tensor = Tensor<T>(std::move(shape), std::move(data));
  return r;
}

template <class T>
void write_records(std::ostream& os, const std::vector<Record<T>>& records) {
  os.write(kMagic, 4);
  detail::put<std::uint32_t>(os, kVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) write_tensor(os, r.name, r.tensor);
  if (!os) throw IoError("failed writing record stream");
}

template <class T>
std::vector<Record<T>> read_records(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("not a tensor record file (bad magic)");
  const auto version = detail::get<std::uint32_t>(is, "version");
  if (version != kVersion) throw IoError("unsupported record version " + std::to_string(version));
  const auto count = detail::get<std::uint32_t>(is, "record count");
  std::vector<Record<T>> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) out.push_back(read_tensor<T>(is));
  return out;
}

template <class T>
void save_records(const std::filesystem::path& path, const std::vector<Record<T>>& records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_records(os, records);
}

template <class T>
std::vector<Record<T>> load_records(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_records<T>(is);
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace kanseg::io
