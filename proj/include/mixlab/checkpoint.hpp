#pragma once

// Single-file binary container shared by model checkpoints and chunk-store
// caches. All integers and floats are little-endian.
//
//   magic      8 bytes  "MIXLABCK"
//   version    u32      (1)
//   blob       u32 length + UTF-8 key=value text
//   count      u32      number of tensors
//   per tensor:
//     name     u32 length + bytes
//     dtype    u32 length + bytes   "f32" | "f64" | "token-i32"
//     rank     u32, then rank x u64 dims
//     data     numel x element size, row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mixlab/config.hpp"
#include "mixlab/data.hpp"
#include "mixlab/model.hpp"

namespace mixlab {

inline constexpr char kCheckpointMagic[8] = {'M', 'I', 'X', 'L', 'A', 'B', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  std::string dtype;
  Shape shape;
  std::vector<unsigned char> bytes;  // little-endian payload

  std::size_t numel() const { return numel_of(shape); }
};

struct Container {
  std::string blob;
  std::vector<StoredTensor> tensors;

  const StoredTensor& find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw FormatError("container has no tensor '" + name + "'", 0);
  }
};

namespace detail {

inline std::size_t dtype_size(const std::string& dtype, std::size_t offset) {
  if (dtype == "f32" || dtype == "token-i32") return 4;
  if (dtype == "f64") return 8;
  throw FormatError("unknown tensor dtype '" + dtype + "'", offset);
}

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    out_.insert(out_.end(), c, c + n);
  }
  template <class U>
  void le(U value) {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
    const Bits bits = std::bit_cast<Bits>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<unsigned char>(bits >> (8 * i)));
  }
  void str(const std::string& s) {
    le(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  const std::vector<unsigned char>& bytes() const { return out_; }

 private:
  std::vector<unsigned char> out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& in) : in_(in) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == in_.size(); }

  const unsigned char* take(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) throw FormatError(std::string("truncated while reading ") + what, pos_);
    const unsigned char* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  template <class U>
  U le(const char* what) {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
    const unsigned char* p = take(sizeof(U), what);
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<Bits>(p[i]) << (8 * i);
    return std::bit_cast<U>(bits);
  }
  std::string str(const char* what, std::size_t limit = 1u << 30) {
    const std::size_t at = pos_;
    const auto n = le<std::uint32_t>(what);
    if (n > limit) throw FormatError(std::string("implausible length for ") + what, at);
    const unsigned char* p = take(n, what);
    return std::string(reinterpret_cast<const char*>(p), n);
  }

 private:
  const std::vector<unsigned char>& in_;
  std::size_t pos_ = 0;
};

template <class U>
std::vector<unsigned char> encode_values(std::span<const U> values) {
  ByteWriter w;
  for (U v : values) w.le(v);
  return w.bytes();
}

template <class U>
std::vector<U> decode_values(const StoredTensor& t) {
  std::vector<U> out(t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
    Bits bits = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) bits |= static_cast<Bits>(t.bytes[i * sizeof(U) + b]) << (8 * b);
    out[i] = std::bit_cast<U>(bits);
  }
  return out;
}

}  // namespace detail

inline std::vector<unsigned char> encode_container(const Container& c) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.le(kCheckpointVersion);
  w.str(c.blob);
  w.le(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.bytes.size() != t.numel() * detail::dtype_size(t.dtype, 0))
      throw FormatError("tensor '" + t.name + "' payload does not match its shape", 0);
    w.str(t.name);
    w.str(t.dtype);
    w.le(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.le(static_cast<std::uint64_t>(d));
    w.raw(t.bytes.data(), t.bytes.size());
  }
  return w.bytes();
}

inline Container decode_container(const std::vector<unsigned char>& bytes) {
  detail::ByteReader r(bytes);
  const unsigned char* magic = r.take(sizeof kCheckpointMagic, "magic");
  if (std::memcmp(magic, kCheckpointMagic, sizeof kCheckpointMagic) != 0) throw FormatError("bad magic", 0);
  const std::size_t version_at = r.offset();
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported container version " + std::to_string(version), version_at);
  Container c;
  c.blob = r.str("config blob");
  const auto count = r.le<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.str("tensor name", 4096);
    const std::size_t dtype_at = r.offset();
    t.dtype = r.str("tensor dtype", 64);
    const std::size_t elem = detail::dtype_size(t.dtype, dtype_at);
    const std::size_t rank_at = r.offset();
    const auto rank = r.le<std::uint32_t>("tensor rank");
    if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank), rank_at);
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::size_t dim_at = r.offset();
      const auto dim = r.le<std::uint64_t>("tensor dimension");
      if (dim > (std::uint64_t{1} << 40) || (dim && numel > (std::size_t{1} << 40) / dim))
        throw FormatError("implausible tensor dimension", dim_at);
      t.shape.push_back(static_cast<std::size_t>(dim));
      numel *= static_cast<std::size_t>(dim);
    }
    const unsigned char* p = r.take(numel * elem, "tensor data");
    t.bytes.assign(p, p + numel * elem);
    c.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after the last tensor", r.offset());
  return c;
}

inline void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// ---------------------------------------------------------------------------
// Models

template <class T>
Container model_container(const Model<T>& m) {
  Container c;
  c.blob = "kind=model\n" + m.config.to_text();
  for (const auto& [name, t] : m.params)
    c.tensors.push_back({name, precision_of<T>() == Precision::check64 ? "f64" : "f32", t.shape(), detail::encode_values<T>(t.data())});
  return c;
}

// Rebuilds a model; stored tensors must match the parameter set the config
// implies. Values stored at the other precision are converted.
template <class T>
Model<T> model_from_container(const Container& c) {
  KeyValues kv = parse_key_values(c.blob);
  if (kv["kind"] != "model") throw FormatError("container does not hold a model", 0);
  kv.erase("kind");
  ModelConfig cfg;
  cfg.apply(kv);
  if (!kv.empty()) throw FormatError("unknown config key '" + kv.begin()->first + "' in checkpoint", 0);
  cfg.validate();
  const Model<T> layout = make_model<T>(cfg, 0);
  if (layout.params.size() != c.tensors.size())
    throw FormatError("checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, config implies " +
                      std::to_string(layout.params.size()), 0);
  Model<T> m{cfg, {}};
  for (const auto& st : c.tensors) {
    const Tensor<T>& expected = layout[st.name];
    if (st.shape != expected.shape())
      throw FormatError("tensor '" + st.name + "' has shape " + shape_str(st.shape) + ", expected " + shape_str(expected.shape()), 0);
    std::vector<T> values;
    if (st.dtype == "f32") {
      for (float v : detail::decode_values<float>(st)) values.push_back(static_cast<T>(v));
    } else if (st.dtype == "f64") {
      for (double v : detail::decode_values<double>(st)) values.push_back(static_cast<T>(v));
    } else {
      throw FormatError("parameter '" + st.name + "' has non-float dtype " + st.dtype, 0);
    }
    m.params.add(st.name, Tensor<T>(st.shape, std::move(values), true));
  }
  return m;
}

template <class T>
void save_checkpoint(const Model<T>& m, const std::string& path) {
  write_file_bytes(path, encode_container(model_container(m)));
}

template <class T>
Model<T> load_checkpoint(const std::string& path) {
  return model_from_container<T>(decode_container(read_file_bytes(path)));
}

// ---------------------------------------------------------------------------
// Chunk stores

inline Container chunk_store_container(const CorpusSplit& split, std::size_t n_ctx, PadSide side) {
  Container c;
  c.blob = "kind=chunk_store\nn_ctx=" + std::to_string(n_ctx) + "\npadding_side=" + to_string(side) + "\n";
  auto pack = [&](const char* name, const std::vector<TokenSequence>& seqs) {
    std::vector<std::int32_t> ids;
    for (const auto& s : seqs) {
      if (s.size() != n_ctx) throw InputError("chunk store: sequence length differs from n_ctx");
      ids.insert(ids.end(), s.ids.begin(), s.ids.end());
    }
    c.tensors.push_back({name, "token-i32", {seqs.size(), n_ctx}, detail::encode_values<std::int32_t>(ids)});
  };
  pack("train", split.train);
  pack("eval", split.eval);
  return c;
}

inline CorpusSplit chunk_store_from_container(const Container& c) {
  KeyValues kv = parse_key_values(c.blob);
  if (kv["kind"] != "chunk_store") throw FormatError("container does not hold a chunk store", 0);
  const PadSide side = pad_side_from_string(kv["padding_side"]);
  CorpusSplit out;
  auto unpack = [&](const char* name, std::vector<TokenSequence>& dst) {
    const StoredTensor& t = c.find(name);
    if (t.dtype != "token-i32" || t.shape.size() != 2) throw FormatError(std::string("chunk store tensor '") + name + "' malformed", 0);
    const auto ids = detail::decode_values<std::int32_t>(t);
    const std::size_t n = t.shape[1];
    for (std::size_t i = 0; i < t.shape[0]; ++i)
      dst.push_back({std::vector<int>(ids.begin() + static_cast<std::ptrdiff_t>(i * n), ids.begin() + static_cast<std::ptrdiff_t>((i + 1) * n)), side});
  };
  unpack("train", out.train);
  unpack("eval", out.eval);
  return out;
}

inline void save_chunk_store(const CorpusSplit& split, std::size_t n_ctx, PadSide side, const std::string& path) {
  write_file_bytes(path, encode_container(chunk_store_container(split, n_ctx, side)));
}

inline CorpusSplit load_chunk_store(const std::string& path) { return chunk_store_from_container(decode_container(read_file_bytes(path))); }

}  // namespace mixlab
