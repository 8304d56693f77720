#include "cafo/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <system_error>
#include <unistd.h>

namespace cafo {
namespace {

constexpr std::array<std::byte, 4> kEmbeddingMagic{std::byte{'C'}, std::byte{'A'}, std::byte{'F'}, std::byte{'O'}};
constexpr std::array<std::byte, 4> kLabelMagic{std::byte{'C'}, std::byte{'A'}, std::byte{'F'}, std::byte{'L'}};

std::string at(std::size_t offset) { return " at byte offset " + std::to_string(offset); }

class Writer {
 public:
  explicit Writer(std::size_t reserve) { out_.reserve(reserve); }

  void bytes(std::span<const std::byte> b) { out_.insert(out_.end(), b.begin(), b.end()); }

  template <typename T>
  void le(T value) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out_.push_back(static_cast<std::byte>(u & 0xFFu));
      if constexpr (sizeof(T) > 1) u = static_cast<U>(u >> 8);
    }
  }

  void f32(float value) { le(std::bit_cast<std::uint32_t>(value)); }

  std::vector<std::byte> take() { return std::move(out_); }

 private:
  std::vector<std::byte> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::byte> in) : in_(in) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw Error(ErrorCode::TruncatedFile, std::string("expected ") + what + at(pos_));
    }
  }

  std::span<const std::byte> bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(std::to_integer<std::uint8_t>(in_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  float f32(const char* what) { return std::bit_cast<float>(le<std::uint32_t>(what)); }

 private:
  std::span<const std::byte> in_;
  std::size_t pos_ = 0;
};

void check_magic(Reader& r, const std::array<std::byte, 4>& magic) {
  auto got = r.bytes(4, "magic");
  if (!std::equal(got.begin(), got.end(), magic.begin())) {
    throw Error(ErrorCode::MagicMismatch, "bad magic" + at(0));
  }
}

void check_version(Reader& r) {
  const std::size_t off = r.offset();
  const auto version = r.le<std::uint32_t>("version");
  if (version != kFormatVersion) {
    throw Error(ErrorCode::VersionUnsupported, "version " + std::to_string(version) + at(off));
  }
}

void check_payload_size(const Reader& r, std::uint64_t count, std::size_t width, const char* what) {
  const std::uint64_t limit = std::numeric_limits<std::size_t>::max() / width;
  if (count > limit || r.remaining() < count * width) {
    throw Error(ErrorCode::TruncatedFile,
                std::string(what) + " payload needs " + std::to_string(count) + " values, file ends" +
                    at(r.offset() + (r.remaining() / width) * width));
  }
  if (r.remaining() > count * width) {
    throw Error(ErrorCode::TrailingData, "unexpected bytes" + at(r.offset() + count * width));
  }
}

}  // namespace

void validate(const EmbeddingMatrix& m) {
  if (m.rows() < 1 || m.cols() < 1) {
    throw Error(ErrorCode::ShapeMismatch, "embedding matrix must have at least one row and column");
  }
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (!std::isfinite(m.data(r, c))) {
        throw Error(ErrorCode::NonFiniteValue,
                    "element (" + std::to_string(r) + ", " + std::to_string(c) + ")" +
                        at(kEmbeddingHeaderBytes + 4 * std::size_t(r * m.cols() + c)));
      }
    }
  }
}

void validate(const LabelSet& labels) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= labels.num_classes) {
      throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(labels[i]) + " with num_classes " +
                                                  std::to_string(labels.num_classes) +
                                                  at(kLabelHeaderBytes + 4 * i));
    }
  }
}

std::vector<std::byte> encode_embeddings(const EmbeddingMatrix& m) {
  validate(m);
  const auto n = std::size_t(m.rows() * m.cols());
  Writer w(kEmbeddingHeaderBytes + 4 * n);
  w.bytes(kEmbeddingMagic);
  w.le<std::uint32_t>(kFormatVersion);
  w.le<std::uint8_t>(kDtypeFloat32);
  w.le<std::uint8_t>(0);
  w.le<std::uint16_t>(0);
  w.le<std::uint64_t>(std::uint64_t(m.rows()));
  w.le<std::uint64_t>(std::uint64_t(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) w.f32(static_cast<float>(m.data(r, c)));
  }
  return w.take();
}

EmbeddingMatrix decode_embeddings(std::span<const std::byte> bytes) {
  Reader r(bytes);
  check_magic(r, kEmbeddingMagic);
  check_version(r);
  const std::size_t dtype_off = r.offset();
  const auto dtype = r.le<std::uint8_t>("dtype");
  if (dtype != kDtypeFloat32) {
    throw Error(ErrorCode::VersionUnsupported, "dtype " + std::to_string(dtype) + at(dtype_off));
  }
  r.bytes(3, "reserved bytes");
  const std::size_t shape_off = r.offset();
  const auto rows = r.le<std::uint64_t>("rows");
  const auto cols = r.le<std::uint64_t>("cols");
  if (rows == 0 || cols == 0) {
    throw Error(ErrorCode::ShapeMismatch, "zero-sized shape" + at(shape_off));
  }
  if (cols > std::numeric_limits<std::uint64_t>::max() / rows) {
    throw Error(ErrorCode::TruncatedFile, "shape overflows" + at(shape_off));
  }
  check_payload_size(r, rows * cols, 4, "embedding");

  EmbeddingMatrix m;
  m.data.resize(Eigen::Index(rows), Eigen::Index(cols));
  for (Eigen::Index i = 0; i < m.data.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.data.cols(); ++j) {
      const std::size_t off = r.offset();
      const float v = r.f32("value");
      if (!std::isfinite(v)) {
        throw Error(ErrorCode::NonFiniteValue, "element (" + std::to_string(i) + ", " + std::to_string(j) + ")" + at(off));
      }
      m.data(i, j) = v;
    }
  }
  m.normalized = false;
  return m;
}

std::vector<std::byte> encode_labels(const LabelSet& labels) {
  validate(labels);
  Writer w(kLabelHeaderBytes + 4 * labels.size());
  w.bytes(kLabelMagic);
  w.le<std::uint32_t>(kFormatVersion);
  w.le<std::uint32_t>(labels.num_classes);
  w.le<std::uint64_t>(labels.size());
  for (auto l : labels.labels) w.le<std::uint32_t>(l);
  return w.take();
}

LabelSet decode_labels(std::span<const std::byte> bytes) {
  Reader r(bytes);
  check_magic(r, kLabelMagic);
  check_version(r);
  LabelSet out;
  out.num_classes = r.le<std::uint32_t>("num_classes");
  const auto count = r.le<std::uint64_t>("count");
  check_payload_size(r, count, 4, "label");
  out.labels.resize(count);
  for (auto& l : out.labels) l = r.le<std::uint32_t>("label");
  validate(out);
  return out;
}

std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<std::byte> bytes(static_cast<std::size_t>(size));
  if (!in.read(reinterpret_cast<char*>(bytes.data()), size)) {
    throw Error(ErrorCode::IoFailure, "cannot read " + path.string());
  }
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw Error(ErrorCode::IoFailure, "cannot write " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(ErrorCode::IoFailure, "cannot rename onto " + path.string());
  }
}

EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(read_file_bytes(path));
}

void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  write_file_atomic(path, encode_embeddings(m));
}

LabelSet read_labels(const std::filesystem::path& path) { return decode_labels(read_file_bytes(path)); }

void write_labels(const LabelSet& labels, const std::filesystem::path& path) {
  write_file_atomic(path, encode_labels(labels));
}

}  // namespace cafo
