#pragma once

// FPEB: per-video token embeddings written by a frozen backbone.
//
//   offset  size  field
//        0     4  magic "FPEB"
//        4     2  format version (u16, currently 1)
//        6     2  dtype code (u16, 0 = f32 little-endian)
//        8     4  frame count F (u32)
//       12     4  tokens per frame N (u32)
//       16     4  embedding dim D (u32)
//       20     2  CLS token index (u16, 0xFFFF = no CLS token)
//       22     2  reserved, zero
//       24   4FND payload, frame-major: [F][N][D]
//
// All integers are little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "fusionprobe/error.hpp"
#include "fusionprobe/tensor.hpp"

namespace fprobe {

inline constexpr std::array<char, 4> kEmbeddingMagic{'F', 'P', 'E', 'B'};
inline constexpr std::uint16_t kEmbeddingVersion = 1;
inline constexpr std::uint16_t kDtypeF32 = 0;
inline constexpr std::uint16_t kNoCls = 0xFFFF;
inline constexpr std::size_t kEmbeddingHeaderBytes = 24;

namespace le {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(bytes.data(), bytes.size());
}

template <typename T>
T get(const char* in) {
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), in, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

inline void put_floats(std::string& out, std::span<const float> values) {
  for (float v : values) put(out, v);
}

inline std::vector<float> get_floats(const char* in, std::size_t count) {
  std::vector<float> out(count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), in, count * sizeof(float));
  } else {
    for (std::size_t i = 0; i < count; ++i) out[i] = get<float>(in + i * sizeof(float));
  }
  return out;
}

}  // namespace le

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kMissingFile, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path.string());
}

struct EmbeddingHeader {
  std::uint16_t version = kEmbeddingVersion;
  std::uint16_t dtype = kDtypeF32;
  std::uint32_t frames = 0;
  std::uint32_t tokens = 0;
  std::uint32_t dim = 0;
  std::uint16_t cls_index = kNoCls;

  std::optional<std::size_t> cls() const {
    if (cls_index == kNoCls) return std::nullopt;
    return cls_index;
  }

  friend bool operator==(const EmbeddingHeader&, const EmbeddingHeader&) = default;
};

/// One video's token embeddings, [F_total, N, D].
struct EmbeddingFile {
  EmbeddingHeader header;
  std::vector<float> payload;

  std::size_t frame_stride() const { return std::size_t{header.tokens} * header.dim; }

  std::span<const float> frame(std::size_t f) const {
    return std::span<const float>(payload).subspan(f * frame_stride(), frame_stride());
  }

  void check() const {
    require(header.frames > 0 && header.tokens > 0 && header.dim > 0, ErrorCode::kBadFormat,
            "embedding dimensions must be positive");
    require(header.cls_index == kNoCls || header.cls_index < header.tokens, ErrorCode::kBadFormat,
            "cls_index " + std::to_string(header.cls_index) + " >= tokens " + std::to_string(header.tokens));
    require(payload.size() == std::size_t{header.frames} * header.tokens * header.dim, ErrorCode::kBadFormat,
            "payload length does not match F*N*D");
  }
};

inline std::string encode_embedding(const EmbeddingFile& file) {
  file.check();
  std::string out;
  out.reserve(kEmbeddingHeaderBytes + file.payload.size() * sizeof(float));
  out.append(kEmbeddingMagic.data(), kEmbeddingMagic.size());
  le::put(out, file.header.version);
  le::put(out, file.header.dtype);
  le::put(out, file.header.frames);
  le::put(out, file.header.tokens);
  le::put(out, file.header.dim);
  le::put(out, file.header.cls_index);
  le::put(out, std::uint16_t{0});
  le::put_floats(out, file.payload);
  return out;
}

inline EmbeddingHeader decode_embedding_header(const std::string& bytes, const std::string& what) {
  require(bytes.size() >= kEmbeddingHeaderBytes, ErrorCode::kBadFormat, what + ": truncated header");
  require(std::memcmp(bytes.data(), kEmbeddingMagic.data(), 4) == 0, ErrorCode::kBadFormat,
          what + ": bad magic (expected FPEB)");
  EmbeddingHeader h;
  h.version = le::get<std::uint16_t>(bytes.data() + 4);
  h.dtype = le::get<std::uint16_t>(bytes.data() + 6);
  h.frames = le::get<std::uint32_t>(bytes.data() + 8);
  h.tokens = le::get<std::uint32_t>(bytes.data() + 12);
  h.dim = le::get<std::uint32_t>(bytes.data() + 16);
  h.cls_index = le::get<std::uint16_t>(bytes.data() + 20);
  require(h.version == kEmbeddingVersion, ErrorCode::kBadFormat,
          what + ": unsupported version " + std::to_string(h.version));
  require(h.dtype == kDtypeF32, ErrorCode::kBadFormat, what + ": unsupported dtype " + std::to_string(h.dtype));
  return h;
}

inline EmbeddingFile decode_embedding(const std::string& bytes, const std::string& what = "embedding") {
  EmbeddingFile file;
  file.header = decode_embedding_header(bytes, what);
  const std::size_t count = std::size_t{file.header.frames} * file.header.tokens * file.header.dim;
  require(bytes.size() == kEmbeddingHeaderBytes + count * sizeof(float), ErrorCode::kBadFormat,
          what + ": payload is " + std::to_string(bytes.size() - kEmbeddingHeaderBytes) + " bytes, expected " +
              std::to_string(count * sizeof(float)));
  file.payload = le::get_floats(bytes.data() + kEmbeddingHeaderBytes, count);
  file.check();
  return file;
}

inline void write_embedding(const std::filesystem::path& path, const EmbeddingFile& file) {
  write_file_bytes(path, encode_embedding(file));
}

inline EmbeddingFile read_embedding(const std::filesystem::path& path) {
  return decode_embedding(read_file_bytes(path), path.string());
}

/// Reads only the 24-byte header.
inline EmbeddingHeader read_embedding_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kMissingFile, "cannot open " + path.string());
  std::string bytes(kEmbeddingHeaderBytes, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  bytes.resize(static_cast<std::size_t>(in.gcount()));
  return decode_embedding_header(bytes, path.string());
}

}  // namespace fprobe
