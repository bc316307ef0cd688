#pragma once

// Named tensor table on disk.
//
//   "SSVC" | u32 version | u32 count
//   count x ( u32 name_len | name bytes | u32 rank | rank x u64 dim | f32 values )
//   u64 FNV-1a of every preceding byte
//
// All integers and floats are little-endian. Writes go to a temporary file that
// is renamed into place.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "ssvc/tensor.hpp"

namespace ssvc {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;

using TensorTable = std::vector<std::pair<std::string, Tensor>>;

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Writes bytes to `path` via a sibling temporary file and rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(cat("cannot write ", tmp.string()));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError(cat("write failed for ", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(cat("cannot open ", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

namespace detail {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& s, std::size_t end) : s_(s), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, s_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  [[nodiscard]] std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw DataError("corrupt file: truncated tensor table");
  }
  const std::string& s_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const TensorTable& table) {
  std::string out = "SSVC";
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(table.size()));
  for (const auto& [name, t] : table) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) detail::put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    out.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(float));
  }
  detail::put<std::uint64_t>(out, fnv1a64(reinterpret_cast<const std::uint8_t*>(out.data()), out.size()));
  return out;
}

inline TensorTable parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "SSVC") != 0) throw DataError("not a checkpoint");
  if (bytes.size() < 12) throw DataError("corrupt file: truncated header");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion) throw DataError(cat("unsupported version ", version));
  if (bytes.size() < 20) throw DataError("corrupt file: truncated");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, 8);
  if (stored != fnv1a64(reinterpret_cast<const std::uint8_t*>(bytes.data()), body))
    throw DataError("corrupt file: checksum mismatch");
  detail::Reader r(bytes, body);
  r.bytes(8);
  const auto count = r.get<std::uint32_t>();
  TensorTable table;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::string name = r.bytes(len);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw DataError(cat("corrupt file: rank ", rank, " for ", name));
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>();
      if (d > (1ull << 31)) throw DataError(cat("corrupt file: dimension ", d, " for ", name));
      shape.push_back(static_cast<int>(d));
      n *= d;
    }
    if (n > body) throw DataError(cat("corrupt file: tensor ", name, " larger than file"));
    std::string raw = r.bytes(n * sizeof(float));
    fvec data(n);
    std::memcpy(data.data(), raw.data(), raw.size());
    table.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.pos() != body) throw DataError("corrupt file: trailing bytes");
  return table;
}

inline void save_checkpoint(const TensorTable& table, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(table));
}

inline TensorTable load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

inline const Tensor& find_tensor(const TensorTable& t, const std::string& name) {
  for (const auto& [n, v] : t)
    if (n == name) return v;
  throw DataError(cat("checkpoint has no tensor '", name, "'"));
}

}  // namespace ssvc
