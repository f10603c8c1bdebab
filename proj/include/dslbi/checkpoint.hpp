#pragma once

// Checkpoint container: layer index -> named tensors, plus scalar metadata.
//
//   "DSLBICKP"                 8-byte magic
//   u32 version                currently 1
//   u32 meta_count             then per entry: u16 key_len, key bytes, f64 value
//   u32 entry_count            then per entry: u32 layer, u16 name_len, name bytes,
//                              u32 rank, u64 extent[rank], f64 value[prod(extent)]
//
// All integers and doubles are little-endian; doubles are stored as their IEEE-754 bit pattern.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dslbi/network.hpp"
#include "dslbi/tensor.hpp"

namespace dslbi {

inline constexpr std::array<char, 8> kCheckpointMagic{'D', 'S', 'L', 'B', 'I', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::uint32_t layer = 0;
  std::string name;
  Tensor tensor;
  friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

struct Checkpoint {
  std::map<std::string, double> meta;
  std::vector<CheckpointEntry> entries;

  void put(std::uint32_t layer, std::string name, Tensor t) {
    for (auto& e : entries)
      if (e.layer == layer && e.name == name) {
        e.tensor = std::move(t);
        return;
      }
    entries.push_back({layer, std::move(name), std::move(t)});
  }

  const Tensor* find(std::uint32_t layer, const std::string& name) const {
    for (const auto& e : entries)
      if (e.layer == layer && e.name == name) return &e.tensor;
    return nullptr;
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put_le(T v) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
  void put_f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void put_raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  void put_string16(const std::string& s) {
    if (s.size() > 0xFFFF) throw std::invalid_argument("checkpoint: name longer than 65535 bytes");
    put_le(static_cast<std::uint16_t>(s.size()));
    put_raw(s.data(), s.size());
  }
  std::string take() { return std::move(bytes_); }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get_le(const char* what) {
    need(sizeof(T), what);
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      u |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  double get_f64(const char* what) { return std::bit_cast<double>(get_le<std::uint64_t>(what)); }
  std::string get_raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string16(const char* what) { return get_raw(get_le<std::uint16_t>(what), what); }
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw std::runtime_error("checkpoint truncated at byte offset " + std::to_string(pos_) + " while reading " +
                               what);
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.put_raw(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.put_le(kCheckpointVersion);
  w.put_le(static_cast<std::uint32_t>(ck.meta.size()));
  for (const auto& [key, value] : ck.meta) {
    w.put_string16(key);
    w.put_f64(value);
  }
  w.put_le(static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& e : ck.entries) {
    w.put_le(e.layer);
    w.put_string16(e.name);
    w.put_le(static_cast<std::uint32_t>(e.tensor.rank()));
    for (std::size_t d : e.tensor.shape()) w.put_le(static_cast<std::uint64_t>(d));
    for (double v : e.tensor.values()) w.put_f64(v);
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  const std::string magic = r.get_raw(kCheckpointMagic.size(), "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0)
    throw std::runtime_error("checkpoint: bad magic at byte offset 0");
  const auto version = r.get_le<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  const auto meta_count = r.get_le<std::uint32_t>("meta count");
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    std::string key = r.get_string16("meta key");
    ck.meta[key] = r.get_f64("meta value");
  }
  const auto count = r.get_le<std::uint32_t>("entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.layer = r.get_le<std::uint32_t>("layer index");
    e.name = r.get_string16("tensor name");
    const auto rank = r.get_le<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get_le<std::uint64_t>("extent"));
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = r.get_f64("tensor data");
    e.tensor = Tensor(std::move(shape), std::move(data));
    ck.entries.push_back(std::move(e));
  }
  if (!r.at_end())
    throw std::runtime_error("checkpoint: trailing bytes after offset " + std::to_string(r.offset()));
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string bytes = encode_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

inline const char* slot_name(std::size_t slot) { return slot == 0 ? "W" : "b"; }

/// Network parameters under names "W" (weights) and "b" (biases).
inline void store_network(Checkpoint& ck, const Network& net) {
  for (const auto& id : param_ids(net))
    ck.put(static_cast<std::uint32_t>(id.layer), slot_name(id.slot), param(net, id));
}

inline void restore_network(Network& net, const Checkpoint& ck) {
  for (const auto& id : param_ids(net)) {
    const Tensor* t = ck.find(static_cast<std::uint32_t>(id.layer), slot_name(id.slot));
    if (!t)
      throw std::runtime_error("checkpoint lacks " + std::string(slot_name(id.slot)) + " for layer " +
                               std::to_string(id.layer));
    require_same_shape(*t, param(net, id), "restore_network");
    param(net, id) = *t;
  }
}

}  // namespace dslbi
