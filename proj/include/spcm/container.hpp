#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "spcm/common.hpp"
#include "spcm/tensor.hpp"

namespace spcm {

// "SPCM" tensor container. Layout, all little-endian:
//   magic 'S''P''C''M' | version u16 | count u16
//   per entry: name_len u16 | name bytes | rank u8 | extents u32[rank] | payload f32[]
// Storage precision is f32; values round-trip bit-exactly at that width.
constexpr std::uint16_t kContainerVersion = 1;

struct ContainerEntry {
  std::string name;
  Tensor tensor;
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char(v >> 8));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}

  std::size_t offset() const { return pos_; }

  const unsigned char* take(std::size_t n, const char* what) {
    if (pos_ + n > buf_.size())
      throw IoError(strf("%s: truncated reading %s at byte %zu: expected %zu more bytes, have %zu",
                         path_.c_str(), what, pos_, n, buf_.size() - pos_));
    const unsigned char* p = reinterpret_cast<const unsigned char*>(buf_.data()) + pos_;
    pos_ += n;
    return p;
  }

  std::uint8_t u8(const char* what) { return *take(1, what); }
  std::uint16_t u16(const char* what) {
    const unsigned char* p = take(2, what);
    return std::uint16_t(p[0] | (p[1] << 8));
  }
  std::uint32_t u32(const char* what) {
    const unsigned char* p = take(4, what);
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_container(const std::filesystem::path& path,
                           const std::vector<ContainerEntry>& entries) {
  if (entries.size() > 0xffff)
    throw IoError(strf("container: %zu entries exceed the u16 count field", entries.size()));
  std::string out;
  out += "SPCM";
  detail::put_u16(out, kContainerVersion);
  detail::put_u16(out, std::uint16_t(entries.size()));
  for (const auto& e : entries) {
    if (e.name.empty()) throw IoError("container: empty tensor name");
    if (e.name.size() > 0xffff)
      throw IoError(strf("container: tensor name of %zu bytes exceeds the u16 length field",
                         e.name.size()));
    Tensor::validate_shape(e.tensor.shape);
    detail::put_u16(out, std::uint16_t(e.name.size()));
    out += e.name;
    out.push_back(char(e.tensor.rank()));
    for (std::size_t ext : e.tensor.shape) {
      if (ext > 0xffffffffULL) throw IoError("container: extent exceeds u32");
      detail::put_u32(out, std::uint32_t(ext));
    }
    for (double v : e.tensor.data) {
      const std::uint32_t bits = std::bit_cast<std::uint32_t>(float(v));
      detail::put_u32(out, bits);
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(strf("%s: cannot open for writing", path.string().c_str()));
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw IoError(strf("%s: short write", path.string().c_str()));
}

inline std::vector<ContainerEntry> load_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(strf("%s: cannot open", path.string().c_str()));
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::ByteReader r(buf, path.string());

  const unsigned char* magic = r.take(4, "magic");
  if (std::string(reinterpret_cast<const char*>(magic), 4) != "SPCM")
    throw IoError(strf("%s: bad magic at byte 0", path.string().c_str()));
  const std::uint16_t version = r.u16("version");
  if (version != kContainerVersion)
    throw IoError(strf("%s: unsupported version %u at byte 4", path.string().c_str(), version));
  const std::uint16_t count = r.u16("entry count");

  std::vector<ContainerEntry> entries;
  entries.reserve(count);
  for (std::uint16_t i = 0; i < count; ++i) {
    const std::size_t base = r.offset();
    const std::uint16_t name_len = r.u16("name length");
    if (name_len == 0)
      throw IoError(strf("%s: empty tensor name in entry %u at byte %zu", path.string().c_str(),
                         i, base));
    const unsigned char* nm = r.take(name_len, "name");
    std::string name(reinterpret_cast<const char*>(nm), name_len);
    const std::uint8_t rank = r.u8("rank");
    if (rank == 0 || rank > kMaxRank)
      throw IoError(strf("%s: entry '%s' rank %u outside 1..%zu at byte %zu",
                         path.string().c_str(), name.c_str(), rank, kMaxRank, r.offset() - 1));
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (std::uint8_t a = 0; a < rank; ++a) {
      shape[a] = r.u32("extent");
      if (shape[a] == 0)
        throw IoError(strf("%s: entry '%s' axis %u has zero extent", path.string().c_str(),
                           name.c_str(), a));
      n *= shape[a];
    }
    Tensor t(shape);
    for (std::size_t k = 0; k < n; ++k) {
      const std::uint32_t bits = r.u32("payload");
      t.data[k] = double(std::bit_cast<float>(bits));
    }
    entries.push_back({std::move(name), std::move(t)});
  }
  if (!r.done())
    throw IoError(strf("%s: %zu trailing bytes after last entry at byte %zu",
                       path.string().c_str(), buf.size() - r.offset(), r.offset()));
  return entries;
}

inline const Tensor& container_find(const std::vector<ContainerEntry>& entries,
                                    const std::string& name) {
  for (const auto& e : entries)
    if (e.name == name) return e.tensor;
  throw IoError(strf("container: no entry named '%s'", name.c_str()));
}

}  // namespace spcm
