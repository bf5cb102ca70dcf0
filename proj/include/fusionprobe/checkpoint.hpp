#pragma once

// FPCK: fusion head + probe checkpoint, sharing the FPEB conventions
// (little-endian, f32 payloads).
//
//   magic "FPCK" | u16 version | u16 dtype (0 = f32)
//   u32 config length | config JSON (UTF-8): {"model": ModelConfig, "meta": {...}}
//   u32 tensor count
//   per tensor: u16 name length | name | u8 rank | u32 dims[rank] | f32 data

#include <cstring>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "fusionprobe/embedding_file.hpp"
#include "fusionprobe/model.hpp"

namespace fprobe {

inline constexpr std::array<char, 4> kCheckpointMagic{'F', 'P', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  Model<float> model;
  nlohmann::json meta;
};

inline std::string encode_checkpoint(const Model<float>& model, const nlohmann::json& meta = nlohmann::json::object()) {
  std::string out(kCheckpointMagic.data(), kCheckpointMagic.size());
  le::put(out, kCheckpointVersion);
  le::put(out, kDtypeF32);
  const std::string config = nlohmann::json{{"model", to_json(model.config())}, {"meta", meta}}.dump();
  le::put(out, static_cast<std::uint32_t>(config.size()));
  out += config;
  le::put(out, static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    le::put(out, static_cast<std::uint16_t>(p.name.size()));
    out += p.name;
    le::put(out, static_cast<std::uint8_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) le::put(out, static_cast<std::uint32_t>(d));
    le::put_floats(out, p.value.data());
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    require(pos + n <= bytes.size(), ErrorCode::kBadFormat, what + ": truncated");
  };
  need(8);
  require(std::memcmp(bytes.data(), kCheckpointMagic.data(), 4) == 0, ErrorCode::kBadFormat,
          what + ": bad magic (expected FPCK)");
  const auto version = le::get<std::uint16_t>(bytes.data() + 4);
  const auto dtype = le::get<std::uint16_t>(bytes.data() + 6);
  require(version == kCheckpointVersion, ErrorCode::kBadFormat, what + ": unsupported version");
  require(dtype == kDtypeF32, ErrorCode::kBadFormat, what + ": unsupported dtype");
  pos = 8;
  need(4);
  const auto config_len = le::get<std::uint32_t>(bytes.data() + pos);
  pos += 4;
  need(config_len);
  nlohmann::json config;
  try {
    config = nlohmann::json::parse(bytes.substr(pos, config_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kBadFormat, what + ": " + e.what());
  }
  pos += config_len;

  ParameterStore<float> loaded;
  need(4);
  const auto count = le::get<std::uint32_t>(bytes.data() + pos);
  pos += 4;
  for (std::uint32_t t = 0; t < count; ++t) {
    need(2);
    const auto name_len = le::get<std::uint16_t>(bytes.data() + pos);
    pos += 2;
    need(name_len + 1);
    std::string name = bytes.substr(pos, name_len);
    pos += name_len;
    const auto rank = static_cast<std::uint8_t>(bytes[pos]);
    pos += 1;
    Shape shape(rank);
    for (auto& d : shape) {
      need(4);
      d = le::get<std::uint32_t>(bytes.data() + pos);
      pos += 4;
    }
    const std::size_t n = shape_size(shape);
    need(n * sizeof(float));
    loaded.add(name, Tensor<float>(shape, le::get_floats(bytes.data() + pos, n)), true);
    pos += n * sizeof(float);
  }
  require(pos == bytes.size(), ErrorCode::kBadFormat, what + ": trailing bytes");

  Checkpoint ck{Model<float>(model_config_from_json(config.at("model"))), config.value("meta", nlohmann::json::object())};
  require(loaded.size() == ck.model.params().size(), ErrorCode::kBadFormat,
          what + ": parameter count does not match the model config");
  ck.model.load_params(loaded);
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model<float>& model,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  write_file_bytes(path, encode_checkpoint(model, meta));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path), path.string());
}

}  // namespace fprobe
