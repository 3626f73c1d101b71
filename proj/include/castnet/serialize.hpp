#pragma once

// CNET1 model files, little-endian:
//
//   header (16 bytes)  "CNET1\0" | u16 version=1 | u32 layer count | u32 total params
//   spec block         u32 H | u32 W | u32 C | u32 name length | name bytes
//                      per layer: u8 kind tag, then u32 hyperparameters
//                        conv      kernel_h kernel_w cin cout stride padding(0 valid, 1 same)
//                        batchnorm channels
//                        maxpool   window stride
//                        dense     in_features units
//                        others    (none)
//   parameters         raw f32 per tensor, layer order, declaration order
//   trailer            u32 CRC-32 of every preceding byte

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "castnet/errors.hpp"
#include "castnet/model.hpp"

namespace castnet {

static_assert(std::endian::native == std::endian::little, "CNET1 I/O assumes a little-endian host");

inline constexpr std::array<std::uint8_t, 6> kCnetMagic{0x43, 0x4E, 0x45, 0x54, 0x31, 0x00};
inline constexpr std::uint16_t kCnetVersion = 1;
inline constexpr std::size_t kCnetHeaderBytes = 16;
inline constexpr std::size_t kCnetChecksumBytes = 4;

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void put_u32(std::size_t v) {
    if (v > 0xFFFFFFFFu) throw ConfigError("value " + std::to_string(v) + " does not fit in u32");
    put(static_cast<std::uint32_t>(v));
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t n) : data_(data), n_(n) {}

  template <typename U>
  U get(const char* what) {
    if (pos_ + sizeof(U) > n_) throw DataError(std::string("CNET1 file truncated while reading ") + what);
    U v;
    std::memcpy(&v, data_ + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string get_string(std::size_t len) {
    if (pos_ + len > n_) throw DataError("CNET1 file truncated while reading model name");
    std::string s(reinterpret_cast<const char*>(data_ + pos_), len);
    pos_ += len;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, data, static_cast<uInt>(n)));
}

inline void write_spec_block(ByteWriter& w, const ModelSpec& spec) {
  for (auto d : spec.input_shape) w.put_u32(d);
  w.put_u32(spec.name.size());
  w.put_bytes(spec.name.data(), spec.name.size());
  for (const auto& l : spec.layers) {
    w.put(static_cast<std::uint8_t>(l.kind));
    switch (l.kind) {
      case LayerKind::conv:
        w.put_u32(l.kernel);
        w.put_u32(l.kernel);
        w.put_u32(l.in_channels);
        w.put_u32(l.out_channels);
        w.put_u32(l.stride);
        w.put_u32(l.padding == Padding::same ? 1 : 0);
        break;
      case LayerKind::batchnorm:
        w.put_u32(l.channels);
        break;
      case LayerKind::maxpool:
        w.put_u32(l.window);
        w.put_u32(l.pool_stride);
        break;
      case LayerKind::dense:
        w.put_u32(l.in_features);
        w.put_u32(l.units);
        break;
      default:
        break;
    }
  }
}

}  // namespace detail

// Bytes of the spec block alone (between header and parameters).
inline std::size_t spec_block_size(const ModelSpec& spec) {
  detail::ByteWriter w;
  detail::write_spec_block(w, spec);
  return w.bytes().size();
}

inline std::vector<std::uint8_t> encode_model(const ModelSpec& spec, const ParamStore<float>& params) {
  detail::check_params(spec, params.layers.size());
  const ParamCount pc = count_params(spec);
  if (params.count(true) != pc.trainable || params.count(false) != pc.non_trainable) {
    throw ShapeError("parameter store does not match spec parameter counts");
  }
  detail::ByteWriter w;
  w.put_bytes(kCnetMagic.data(), kCnetMagic.size());
  w.put(kCnetVersion);
  w.put_u32(spec.layers.size());
  w.put_u32(pc.total);
  detail::write_spec_block(w, spec);
  for (const auto& l : params.layers) {
    for (const auto& t : l.tensors) w.put_bytes(t.ptr(), t.size() * sizeof(float));
  }
  const std::uint32_t crc = detail::crc32_of(w.bytes().data(), w.bytes().size());
  w.put(crc);
  return std::move(w.bytes());
}

inline Model decode_model(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kCnetHeaderBytes + kCnetChecksumBytes) throw DataError("CNET1 file truncated: too short for header");
  if (!std::equal(kCnetMagic.begin(), kCnetMagic.end(), bytes.begin())) throw DataError("not a CNET1 file: bad magic");
  const std::size_t body = bytes.size() - kCnetChecksumBytes;
  detail::ByteReader r(bytes.data(), bytes.size());
  r.get_string(kCnetMagic.size());
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCnetVersion) throw DataError("unsupported CNET1 version " + std::to_string(version));
  const auto n_layers = r.get<std::uint32_t>("layer count");
  const auto total = r.get<std::uint32_t>("parameter count");

  Model m;
  m.spec.input_shape = {r.get<std::uint32_t>("input shape"), r.get<std::uint32_t>("input shape"),
                        r.get<std::uint32_t>("input shape")};
  m.spec.name = r.get_string(r.get<std::uint32_t>("name length"));
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const auto tag = r.get<std::uint8_t>("layer tag");
    LayerSpec l;
    switch (static_cast<LayerKind>(tag)) {
      case LayerKind::conv: {
        const auto kh = r.get<std::uint32_t>("conv kernel");
        const auto kw = r.get<std::uint32_t>("conv kernel");
        if (kh != kw) throw DataError("CNET1: non-square conv kernels are not supported");
        const auto cin = r.get<std::uint32_t>("conv channels");
        const auto cout = r.get<std::uint32_t>("conv channels");
        const auto stride = r.get<std::uint32_t>("conv stride");
        const auto pad = r.get<std::uint32_t>("conv padding");
        l = LayerSpec::conv(kh, cin, cout, pad == 1 ? Padding::same : Padding::valid, stride);
        break;
      }
      case LayerKind::batchnorm:
        l = LayerSpec::batchnorm(r.get<std::uint32_t>("batchnorm channels"));
        break;
      case LayerKind::relu:
        l = LayerSpec::relu();
        break;
      case LayerKind::maxpool: {
        const auto win = r.get<std::uint32_t>("pool window");
        l = LayerSpec::maxpool(win, r.get<std::uint32_t>("pool stride"));
        break;
      }
      case LayerKind::gap:
        l = LayerSpec::gap();
        break;
      case LayerKind::dense: {
        const auto in = r.get<std::uint32_t>("dense features");
        l = LayerSpec::dense(in, r.get<std::uint32_t>("dense units"));
        break;
      }
      case LayerKind::sigmoid:
        l = LayerSpec::sigmoid();
        break;
      default:
        throw DataError("CNET1: unknown layer tag " + std::to_string(tag));
    }
    m.spec.layers.push_back(l);
  }
  try {
    propagate_shapes(m.spec);
  } catch (const ShapeError& e) {
    throw DataError(std::string("CNET1: inconsistent layer stack: ") + e.what());
  }
  if (count_params(m.spec).total != total) throw DataError("CNET1: header parameter count disagrees with layer stack");
  if (r.pos() + total * sizeof(float) != body) {
    throw DataError("CNET1 file truncated or oversized: expected " + std::to_string(r.pos() + total * 4 + 4) +
                    " bytes, got " + std::to_string(bytes.size()));
  }
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));
  if (stored != detail::crc32_of(bytes.data(), body)) throw DataError("CNET1 checksum mismatch");

  m.params = zero_params<float>(m.spec);
  const std::uint8_t* p = bytes.data() + r.pos();
  for (auto& l : m.params.layers) {
    for (auto& t : l.tensors) {
      std::memcpy(t.ptr(), p, t.size() * sizeof(float));
      p += t.size() * sizeof(float);
    }
  }
  return m;
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write to '" + path.string() + "' failed");
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void save_model(const Model& model, const std::filesystem::path& path) {
  write_file(path, encode_model(model.spec, model.params));
}

inline Model load_model(const std::filesystem::path& path) { return decode_model(read_file(path)); }

}  // namespace castnet
