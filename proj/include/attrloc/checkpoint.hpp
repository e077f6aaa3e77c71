#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attrloc/network.hpp"

namespace attrloc {

inline constexpr char kCheckpointMagic[4] = {'A', 'L', 'M', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
inline std::uint64_t get_le(std::istream& is, int bytes, const std::string& what) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == EOF) throw ParseError("checkpoint: truncated " + what);
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace detail

/// "ALMC", u32 version, u64 manifest length, JSON manifest, f32 LE payload.
/// `extra` is stored verbatim under manifest["extra"].
template <typename T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& path, const nlohmann::json& extra = {}) {
  struct Entry {
    std::string name;
    Shape shape;
    const T* data;
    std::size_t count;
    const char* kind;
  };
  std::vector<Entry> entries;
  for (auto& [name, t] : model.named_parameters()) entries.push_back({name, t.shape(), t.ptr(), t.numel(), "param"});
  for (auto& b : model.named_buffers()) entries.push_back({b.name, Shape{b.values->size()}, b.values->data(), b.values->size(), "buffer"});

  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}, {"kind", e.kind}});
    offset += 4 * e.count;
  }
  nlohmann::json manifest{{"config", model.config}, {"tensors", tensors}, {"payload_bytes", offset}, {"extra", extra}};
  const std::string text = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : entries)
    for (std::size_t i = 0; i < e.count; ++i) detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(e.data[i])));
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

struct CheckpointHeader {
  std::uint32_t version = 0;
  nlohmann::json manifest;
};

inline CheckpointHeader read_checkpoint_header(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw ParseError("checkpoint: bad magic, not an ALMC file");
  CheckpointHeader h;
  h.version = static_cast<std::uint32_t>(detail::get_le(is, 4, "version"));
  if (h.version != kCheckpointVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(h.version));
  const auto len = detail::get_le(is, 8, "manifest length");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw ParseError("checkpoint: truncated manifest");
  try {
    h.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: manifest is not valid JSON: ") + e.what());
  }
  return h;
}

template <typename T>
struct LoadedCheckpoint {
  Model<T> model;
  nlohmann::json extra;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open checkpoint " + path.string());
  const auto header = read_checkpoint_header(is);
  const auto& manifest = header.manifest;
  ModelConfig cfg = manifest.at("config").get<ModelConfig>();
  Model<T> model(cfg, 0);

  const auto payload_bytes = manifest.at("payload_bytes").get<std::uint64_t>();
  std::vector<char> payload(payload_bytes);
  if (!is.read(payload.data(), static_cast<std::streamsize>(payload_bytes)))
    throw ParseError("checkpoint: payload shorter than the " + std::to_string(payload_bytes) + " bytes announced");

  std::map<std::string, std::pair<Shape, std::uint64_t>> index;
  for (const auto& t : manifest.at("tensors"))
    index[t.at("name").get<std::string>()] = {t.at("shape").get<Shape>(), t.at("offset").get<std::uint64_t>()};

  auto fill = [&](const std::string& name, const Shape& shape, T* dst) {
    auto it = index.find(name);
    if (it == index.end()) throw ParseError("checkpoint: missing tensor " + name);
    if (it->second.first != shape)
      throw ParseError("checkpoint: tensor " + name + " has shape " + shape_str(it->second.first) + ", model expects " +
                       shape_str(shape));
    const std::size_t count = shape_numel(shape);
    const std::uint64_t off = it->second.second;
    if (off + 4 * count > payload_bytes) throw ParseError("checkpoint: tensor " + name + " runs past the payload");
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[off + 4 * i + b])) << (8 * b);
      dst[i] = static_cast<T>(std::bit_cast<float>(bits));
    }
    index.erase(it);
  };
  for (auto& [name, t] : model.named_parameters()) fill(name, t.shape(), t.ptr());
  for (auto& b : model.named_buffers()) fill(b.name, Shape{b.values->size()}, b.values->data());
  if (!index.empty()) throw ParseError("checkpoint: unexpected tensor " + index.begin()->first);
  return {std::move(model), manifest.value("extra", nlohmann::json::object())};
}

}  // namespace attrloc
