#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "quickdrop/distill.hpp"
#include "quickdrop/model.hpp"

// Binary layouts, all integers and floats little-endian:
//
//   model:     "QDMD" u32 version, u64 arch digest, u32 scalar bytes, u32 count,
//              then per tensor: u32 name length, name, u8 role, u32 rank,
//              u64 dims[rank], values
//   synthetic: "QDSY" u32 version, u32 classes, u32 m_c[classes], u32 C, H, W,
//              u32 scalar bytes, f64 scale, then the buckets in class order

namespace quickdrop {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::array<char, 4> kModelMagic{'Q', 'D', 'M', 'D'};
inline constexpr std::array<char, 4> kSyntheticMagic{'Q', 'D', 'S', 'Y'};

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  template <class U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  template <class T>
  void scalar(T v) {
    if constexpr (sizeof(T) == 4) {
      uint(std::bit_cast<std::uint32_t>(v));
    } else {
      uint(std::bit_cast<std::uint64_t>(v));
    }
  }
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes_.data()), static_cast<std::streamsize>(bytes_.size()));
    if (!out) throw CheckpointError("write failed: " + path);
  }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot read " + path);
    bytes_.assign(std::istreambuf_iterator<char>(in), {});
  }
  void need(std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw CheckpointError(path_ + ": truncated at byte " + std::to_string(pos_));
    }
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  template <class U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  template <class T>
  T scalar() {
    if constexpr (sizeof(T) == 4) {
      return std::bit_cast<T>(uint<std::uint32_t>());
    } else {
      return std::bit_cast<T>(uint<std::uint64_t>());
    }
  }
  void expect_end() const {
    if (pos_ != bytes_.size()) {
      throw CheckpointError(path_ + ": " + std::to_string(bytes_.size() - pos_) +
                            " trailing bytes");
    }
  }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::vector<unsigned char> bytes_;
  std::size_t pos_ = 0;
};

inline void read_header(ByteReader& in, const std::array<char, 4>& magic) {
  std::array<char, 4> got{};
  in.raw(got.data(), got.size());
  if (got != magic) {
    throw CheckpointError(in.path() + ": bad magic '" + std::string(got.begin(), got.end()) +
                          "', expected '" + std::string(magic.begin(), magic.end()) +
                          "' version " + std::to_string(kCheckpointVersion));
  }
  const auto version = in.uint<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(in.path() + ": unsupported version " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));
  }
}

template <class T>
void check_precision(ByteReader& in) {
  const auto bytes = in.uint<std::uint32_t>();
  if (bytes != sizeof(T)) {
    throw CheckpointError(in.path() + ": stored with " + std::to_string(bytes) +
                          "-byte scalars, loading as " + std::to_string(sizeof(T)) + "-byte");
  }
}

}  // namespace detail

template <class T>
void save_model(const std::string& path, const ParamSet<T>& params, const ArchSpec& spec) {
  detail::ByteWriter out;
  out.raw(kModelMagic.data(), kModelMagic.size());
  out.uint(kCheckpointVersion);
  out.uint(spec.digest());
  out.uint(static_cast<std::uint32_t>(sizeof(T)));
  out.uint(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params.entries) {
    out.uint(static_cast<std::uint32_t>(p.name.size()));
    out.raw(p.name.data(), p.name.size());
    out.uint(static_cast<std::uint8_t>(p.role));
    out.uint(static_cast<std::uint32_t>(p.value.shape().size()));
    for (std::size_t d : p.value.shape()) out.uint(static_cast<std::uint64_t>(d));
    for (T v : p.value.values()) out.scalar(v);
  }
  out.save(path);
}

/// Loads a model saved for `spec`; the architecture digest must match.
template <class T>
ParamSet<T> load_model(const std::string& path, const ArchSpec& spec) {
  detail::ByteReader in(path);
  detail::read_header(in, kModelMagic);
  const auto digest = in.uint<std::uint64_t>();
  if (digest != spec.digest()) {
    throw CheckpointError(path + ": architecture digest does not match " + spec.canonical());
  }
  detail::check_precision<T>(in);
  const auto count = in.uint<std::uint32_t>();
  ParamSet<T> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(in.uint<std::uint32_t>(), '\0');
    in.raw(name.data(), name.size());
    const auto role = static_cast<LayerRole>(in.uint<std::uint8_t>());
    Shape shape(in.uint<std::uint32_t>());
    for (auto& d : shape) d = static_cast<std::size_t>(in.uint<std::uint64_t>());
    std::vector<T> values(shape_numel(shape));
    for (auto& v : values) v = in.scalar<T>();
    params.entries.push_back({std::move(name), role,
                              Tensor<T>::from_values(std::move(shape), std::move(values), true)});
  }
  in.expect_end();
  return params;
}

template <class T>
void save_synthetic(const std::string& path, const SyntheticDataset<T>& syn) {
  detail::ByteWriter out;
  out.raw(kSyntheticMagic.data(), kSyntheticMagic.size());
  out.uint(kCheckpointVersion);
  out.uint(static_cast<std::uint32_t>(syn.classes));
  for (std::size_t c = 0; c < syn.classes; ++c) {
    out.uint(static_cast<std::uint32_t>(syn.count(static_cast<int>(c))));
  }
  out.uint(static_cast<std::uint32_t>(syn.dims.channels));
  out.uint(static_cast<std::uint32_t>(syn.dims.height));
  out.uint(static_cast<std::uint32_t>(syn.dims.width));
  out.uint(static_cast<std::uint32_t>(sizeof(T)));
  out.scalar(syn.scale);
  for (const auto& [c, bucket] : syn.buckets) {
    for (T v : bucket.values()) out.scalar(v);
  }
  out.save(path);
}

template <class T>
SyntheticDataset<T> load_synthetic(const std::string& path) {
  detail::ByteReader in(path);
  detail::read_header(in, kSyntheticMagic);
  SyntheticDataset<T> syn;
  syn.classes = in.uint<std::uint32_t>();
  std::vector<std::size_t> counts(syn.classes);
  for (auto& m : counts) m = in.uint<std::uint32_t>();
  syn.dims.channels = in.uint<std::uint32_t>();
  syn.dims.height = in.uint<std::uint32_t>();
  syn.dims.width = in.uint<std::uint32_t>();
  detail::check_precision<T>(in);
  syn.scale = in.scalar<double>();
  for (std::size_t c = 0; c < syn.classes; ++c) {
    if (counts[c] == 0) continue;
    const Shape shape{counts[c], syn.dims.channels, syn.dims.height, syn.dims.width};
    std::vector<T> values(shape_numel(shape));
    for (auto& v : values) v = in.scalar<T>();
    syn.buckets.emplace(static_cast<int>(c),
                        Tensor<T>::from_values(shape, std::move(values), true));
  }
  in.expect_end();
  return syn;
}

}  // namespace quickdrop
