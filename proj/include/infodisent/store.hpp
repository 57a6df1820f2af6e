#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <zlib.h>

#include "infodisent/errors.hpp"
#include "infodisent/feature_map.hpp"
#include "infodisent/head.hpp"
#include "infodisent/train.hpp"

namespace infodisent {

// ---------------------------------------------------------------------------------------
// little-endian primitives

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { buf_.append(s); }
  void matrix(const Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
  }
  void vector(const Vector& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) f64(v[i]);
  }

  const std::string& data() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const char> data) : data_(data) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get_le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get_le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get_le(4)); }
  std::uint64_t u64() { return get_le(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  Matrix matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = f64();
    return m;
  }
  Vector vector(Eigen::Index n) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = f64();
    return v;
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw FormatError("truncated data");
  }
  std::uint64_t get_le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const char> data_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::string_view bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------------------
// IDFM feature sets
//
// header (22 bytes): "IDFM" | version u16 | C u32 | N u32 | k u32 | flags u32 (bit 0: labels)
// record: image_id u32 | label u32 (0xFFFFFFFF without labels) | H u16 | W u16 |
//         C*H*W float32, channel-major then row-major

inline constexpr std::array<char, 4> kIdfmMagic = {'I', 'D', 'F', 'M'};
inline constexpr std::uint16_t kIdfmVersion = 1;
inline constexpr std::size_t kIdfmHeaderBytes = 22;
inline constexpr std::size_t kIdfmRecordHeaderBytes = 12;
inline constexpr std::uint32_t kNoLabel = 0xFFFFFFFFu;
inline constexpr std::uint32_t kFlagLabels = 1u;

struct FeatureSetHeader {
  std::uint16_t version = kIdfmVersion;
  std::uint32_t channels = 0;
  std::uint32_t images = 0;
  std::uint32_t classes = 0;
  std::uint32_t flags = 0;

  bool labels_present() const { return (flags & kFlagLabels) != 0; }
};

inline std::string encode_idfm_header(const FeatureSetHeader& h) {
  ByteWriter w;
  w.bytes(std::string_view(kIdfmMagic.data(), kIdfmMagic.size()));
  w.u16(h.version);
  w.u32(h.channels);
  w.u32(h.images);
  w.u32(h.classes);
  w.u32(h.flags);
  return w.take();
}

inline FeatureSetHeader decode_idfm_header(std::span<const char> bytes) {
  if (bytes.size() < kIdfmHeaderBytes) throw FormatError("IDFM: truncated header");
  if (std::memcmp(bytes.data(), kIdfmMagic.data(), kIdfmMagic.size()) != 0) throw FormatError("IDFM: bad magic");
  ByteReader r(bytes.subspan(4));
  FeatureSetHeader h;
  h.version = r.u16();
  if (h.version != kIdfmVersion) throw FormatError("IDFM: unsupported version " + std::to_string(h.version));
  h.channels = r.u32();
  h.images = r.u32();
  h.classes = r.u32();
  h.flags = r.u32();
  if (h.channels < 1) throw FormatError("IDFM: channel count must be >= 1");
  if (h.images < 1) throw FormatError("IDFM: image count must be >= 1");
  if ((h.flags & ~kFlagLabels) != 0) throw FormatError("IDFM: unknown flag bits");
  if (h.labels_present() && h.classes < 1) throw FormatError("IDFM: labels present but class count is 0");
  return h;
}

/// Streaming IDFM writer; the image count is patched into the header by finish().
class FeatureSetWriter {
 public:
  FeatureSetWriter(const std::string& path, std::uint32_t channels, std::uint32_t classes, bool labels)
      : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) throw FormatError("cannot write '" + path + "'");
    if (channels < 1) throw DimensionError("FeatureSetWriter: channel count must be >= 1");
    header_.channels = channels;
    header_.classes = classes;
    header_.flags = labels ? kFlagLabels : 0;
    const std::string h = encode_idfm_header(header_);
    out_.write(h.data(), static_cast<std::streamsize>(h.size()));
  }
  FeatureSetWriter(const FeatureSetWriter&) = delete;
  FeatureSetWriter& operator=(const FeatureSetWriter&) = delete;
  ~FeatureSetWriter() {
    if (!finished_) {
      try {
        finish();
      } catch (...) {
      }
    }
  }

  void write(const FeatureMap& f) {
    if (finished_) throw FormatError("FeatureSetWriter: already finished");
    if (f.channels() != static_cast<int>(header_.channels)) throw DimensionError("FeatureSetWriter: channel mismatch");
    if (f.height() > 0xFFFF || f.width() > 0xFFFF) throw DimensionError("FeatureSetWriter: grid exceeds 65535");
    if (!f.finite()) throw NumericError("FeatureSetWriter: non-finite value in image " + std::to_string(f.image_id));
    std::uint32_t label = kNoLabel;
    if (header_.labels_present()) {
      if (!f.label) throw ParameterError("FeatureSetWriter: image " + std::to_string(f.image_id) + " has no label");
      if (*f.label >= header_.classes) throw ParameterError("FeatureSetWriter: label out of range");
      label = *f.label;
    }
    ByteWriter w;
    w.u32(f.image_id);
    w.u32(label);
    w.u16(static_cast<std::uint16_t>(f.height()));
    w.u16(static_cast<std::uint16_t>(f.width()));
    for (double v : f.data()) w.f32(static_cast<float>(v));
    out_.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
    if (!out_) throw FormatError("write failed for '" + path_ + "'");
    ++header_.images;
  }

  void finish() {
    if (finished_) return;
    finished_ = true;
    if (header_.images < 1) throw FormatError("FeatureSetWriter: no images written to '" + path_ + "'");
    const std::string h = encode_idfm_header(header_);
    out_.seekp(0);
    out_.write(h.data(), static_cast<std::streamsize>(h.size()));
    out_.close();
    if (!out_) throw FormatError("write failed for '" + path_ + "'");
  }

  std::uint32_t written() const { return header_.images; }

 private:
  std::ofstream out_;
  std::string path_;
  FeatureSetHeader header_;
  bool finished_ = false;
};

inline void write_featureset(const std::string& path, const FeatureSet& set) {
  if (set.empty()) throw FormatError("write_featureset: empty dataset");
  const bool labels = set.images.front().label.has_value();
  FeatureSetWriter w(path, static_cast<std::uint32_t>(set.channels), static_cast<std::uint32_t>(set.num_classes),
                     labels);
  for (const auto& f : set.images) w.write(f);
  w.finish();
}

struct ReaderOptions {
  // Largest record payload the reader will buffer; larger records are rejected.
  std::size_t max_record_bytes = std::size_t{1} << 30;
  // When set, the header channel count must match.
  std::optional<std::uint32_t> expected_channels;
};

/// Streaming IDFM reader: one record buffered at a time.
class FeatureSetReader {
 public:
  explicit FeatureSetReader(const std::string& path, ReaderOptions options = {})
      : in_(path, std::ios::binary), path_(path), options_(options) {
    if (!in_) throw FormatError("cannot open '" + path + "'");
    std::array<char, kIdfmHeaderBytes> raw{};
    in_.read(raw.data(), raw.size());
    if (in_.gcount() != static_cast<std::streamsize>(raw.size())) throw FormatError("IDFM: truncated header");
    header_ = decode_idfm_header(raw);
    if (options_.expected_channels && *options_.expected_channels != header_.channels) {
      throw DimensionError("IDFM: file has " + std::to_string(header_.channels) + " channels, expected " +
                           std::to_string(*options_.expected_channels));
    }
  }

  const FeatureSetHeader& header() const { return header_; }

  /// Next record, or nullopt after the last one. Trailing bytes are a format error.
  std::optional<FeatureMap> next() {
    if (read_ == header_.images) {
      if (in_.peek() != std::char_traits<char>::eof()) throw FormatError("IDFM: trailing data after last record");
      return std::nullopt;
    }
    std::array<char, kIdfmRecordHeaderBytes> rh{};
    in_.read(rh.data(), rh.size());
    if (in_.gcount() != static_cast<std::streamsize>(rh.size())) {
      throw FormatError("IDFM: truncated record " + std::to_string(read_));
    }
    ByteReader r(rh);
    const std::uint32_t image_id = r.u32();
    const std::uint32_t label = r.u32();
    const int h = r.u16(), w = r.u16();
    if (h < 1 || w < 1) throw FormatError("IDFM: empty grid in record " + std::to_string(read_));
    const std::size_t values = static_cast<std::size_t>(header_.channels) * h * w;
    const std::size_t payload = values * 4;
    if (payload > options_.max_record_bytes) throw FormatError("IDFM: record exceeds the configured buffer cap");
    buffer_.resize(payload);
    peak_buffer_ = std::max(peak_buffer_, buffer_.capacity());
    in_.read(buffer_.data(), static_cast<std::streamsize>(payload));
    if (in_.gcount() != static_cast<std::streamsize>(payload)) {
      throw FormatError("IDFM: truncated record " + std::to_string(read_));
    }

    FeatureMap f(static_cast<int>(header_.channels), h, w);
    ByteReader body(buffer_);
    for (std::size_t i = 0; i < values; ++i) {
      const float v = body.f32();
      if (!std::isfinite(v)) throw FormatError("IDFM: non-finite value in image " + std::to_string(image_id));
      f.data()[i] = static_cast<double>(v);
    }
    f.image_id = image_id;
    if (header_.labels_present()) {
      if (label >= header_.classes) throw FormatError("IDFM: label out of range in image " + std::to_string(image_id));
      f.label = label;
    } else if (label != kNoLabel) {
      throw FormatError("IDFM: label present in an unlabelled file");
    }
    ++read_;
    return f;
  }

  std::size_t peak_buffer_bytes() const { return peak_buffer_; }

 private:
  std::ifstream in_;
  std::string path_;
  ReaderOptions options_;
  FeatureSetHeader header_;
  std::uint32_t read_ = 0;
  std::vector<char> buffer_;
  std::size_t peak_buffer_ = 0;
};

inline FeatureSet read_featureset(const std::string& path, ReaderOptions options = {}) {
  FeatureSetReader reader(path, options);
  FeatureSet set;
  set.channels = static_cast<int>(reader.header().channels);
  set.num_classes = static_cast<int>(reader.header().classes);
  set.images.reserve(reader.header().images);
  while (auto f = reader.next()) set.images.push_back(std::move(*f));
  return set;
}

// ---------------------------------------------------------------------------------------
// checkpoints
//
// "IDCK" | version u16 | kind u8 | hard_mode u8 | d u32 | k u32 | tau f64 |
// generator d*d f64 | class weights d*k f64 | bias k f64 (matrices row-major) |
// has_optimizer u8 [lr f64 | epoch u32 | step u64 | seed u64 | plateau_best f64 |
// plateau_bad u32 | plateau_reductions u32 | velocity generator, class weights, bias] |
// config_len u32 | config bytes | crc32 u32 over everything before it

inline constexpr std::array<char, 4> kCheckpointMagic = {'I', 'D', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct OptimizerSnapshot {
  double lr = 0.0;
  std::uint32_t epoch = 0;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  PlateauState plateau;
  ParamGrads velocity;
};

struct Checkpoint {
  HeadParams params;
  std::optional<OptimizerSnapshot> optimizer;
  std::string config_echo;
};

inline OptimizerSnapshot snapshot(const TrainState& s) {
  return {s.lr, static_cast<std::uint32_t>(s.epoch), s.step, s.seed, s.plateau, s.velocity};
}

inline std::string encode_checkpoint(const Checkpoint& ck) {
  const HeadParams& p = ck.params;
  p.validate();
  const auto d = p.channels(), k = p.classes();
  ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic.data(), kCheckpointMagic.size()));
  w.u16(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(p.kind));
  w.u8(p.hard_mode ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(k));
  w.f64(p.tau);
  w.matrix(p.generator);
  w.matrix(p.class_weights_raw);
  w.vector(p.bias);
  w.u8(ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    const OptimizerSnapshot& o = *ck.optimizer;
    if (o.velocity.generator.rows() != d || o.velocity.generator.cols() != d ||
        o.velocity.class_weights.rows() != d || o.velocity.class_weights.cols() != k || o.velocity.bias.size() != k) {
      throw DimensionError("encode_checkpoint: optimizer state shape mismatch");
    }
    w.f64(o.lr);
    w.u32(o.epoch);
    w.u64(o.step);
    w.u64(o.seed);
    w.f64(o.plateau.best);
    w.u32(static_cast<std::uint32_t>(o.plateau.bad_evals));
    w.u32(static_cast<std::uint32_t>(o.plateau.reductions));
    w.matrix(o.velocity.generator);
    w.matrix(o.velocity.class_weights);
    w.vector(o.velocity.bias);
  }
  w.u32(static_cast<std::uint32_t>(ck.config_echo.size()));
  w.bytes(ck.config_echo);
  const std::uint32_t crc = crc32_of(w.data());
  w.u32(crc);
  return w.take();
}

struct ExpectedDims {
  int channels = 0;
  int classes = 0;
};

inline Checkpoint decode_checkpoint(std::string_view bytes, std::optional<ExpectedDims> expected = {}) {
  if (bytes.size() < 4 + 4) throw FormatError("checkpoint: truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  ByteReader tail(std::span<const char>(bytes.data() + body.size(), 4));
  if (tail.u32() != crc32_of(body)) throw FormatError("checkpoint: checksum mismatch");

  ByteReader r(std::span<const char>(body.data() + 4, body.size() - 4));
  if (r.u16() != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
  Checkpoint ck;
  HeadParams& p = ck.params;
  const std::uint8_t kind = r.u8();
  if (kind > 1) throw FormatError("checkpoint: unknown head kind");
  p.kind = static_cast<HeadKind>(kind);
  p.hard_mode = r.u8() != 0;
  const auto d = static_cast<Eigen::Index>(r.u32());
  const auto k = static_cast<Eigen::Index>(r.u32());
  if (d < 1 || k < 1) throw FormatError("checkpoint: empty dimensions");
  if (expected && (expected->channels != d || (expected->classes > 0 && expected->classes != k))) {
    throw DimensionError("checkpoint: trained for d=" + std::to_string(d) + ", k=" + std::to_string(k) +
                         " but the session expects d=" + std::to_string(expected->channels) +
                         ", k=" + std::to_string(expected->classes));
  }
  const std::size_t need = static_cast<std::size_t>(8 * (1 + d * d + d * k + k));
  if (r.remaining() < need) throw FormatError("checkpoint: truncated parameters");
  p.tau = r.f64();
  p.generator = r.matrix(d, d);
  p.class_weights_raw = r.matrix(d, k);
  p.bias = r.vector(k);
  if (r.u8() != 0) {
    OptimizerSnapshot o;
    o.lr = r.f64();
    o.epoch = r.u32();
    o.step = r.u64();
    o.seed = r.u64();
    o.plateau.best = r.f64();
    o.plateau.bad_evals = static_cast<int>(r.u32());
    o.plateau.reductions = static_cast<int>(r.u32());
    o.velocity.generator = r.matrix(d, d);
    o.velocity.class_weights = r.matrix(d, k);
    o.velocity.bias = r.vector(k);
    ck.optimizer = std::move(o);
  }
  ck.config_echo = r.bytes(r.u32());
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  p.validate();
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) { write_file(path, encode_checkpoint(ck)); }

inline Checkpoint load_checkpoint(const std::string& path, std::optional<ExpectedDims> expected = {}) {
  return decode_checkpoint(read_file(path), expected);
}

}  // namespace infodisent
