#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prp/error.hpp"
#include "prp/scorer.hpp"

namespace prp {

// Layout: <dir>/manifest.json names every tensor with its shape and byte offset
// into <dir>/tensors.bin, a magic-prefixed blob of little-endian float64.
inline constexpr const char* kCheckpointMagic = "PRP-CHECKPOINT-1";
inline constexpr char kBlobMagic[8] = {'P', 'R', 'P', 'B', 'L', 'O', 'B', '1'};

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int n = 15; n >= 0; --n, v >>= 4) s[static_cast<std::size_t>(n)] = digits[v & 0xF];
  return s;
}

struct CheckpointMeta {
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
};

inline void save_checkpoint(const PrpModel& model, const std::filesystem::path& dir, const CheckpointMeta& meta) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["magic"] = kCheckpointMagic;
  manifest["dim"] = model.dim();
  manifest["n_users"] = model.n_users();
  manifest["n_items"] = model.n_items();
  manifest["config"] = meta.config;
  manifest["config_hash"] = hex64(fnv1a(meta.config.dump()));
  manifest["seed"] = meta.seed;
  manifest["epoch"] = meta.epoch;
  manifest["blob"] = "tensors.bin";
  auto tensors = nlohmann::json::array();

  std::ofstream blob(dir / "tensors.bin", std::ios::binary);
  if (!blob) throw DataError("cannot write " + (dir / "tensors.bin").string());
  blob.write(kBlobMagic, sizeof(kBlobMagic));
  std::uint64_t offset = sizeof(kBlobMagic);
  for (const auto& t : model.params().tensors()) {
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    for (double v : t.values) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      unsigned char bytes[8];
      for (int b = 0; b < 8; ++b, bits >>= 8) bytes[b] = static_cast<unsigned char>(bits & 0xFF);
      blob.write(reinterpret_cast<const char*>(bytes), 8);
    }
    offset += 8 * t.numel();
  }
  manifest["tensors"] = tensors;
  manifest["blob_bytes"] = offset;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

struct LoadedCheckpoint {
  std::unique_ptr<PrpModel> model;
  nlohmann::json manifest;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot read checkpoint manifest " + manifest_path.string());
  LoadedCheckpoint out;
  try {
    out.manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  const auto& m = out.manifest;
  if (!m.is_object() || m.value("magic", "") != kCheckpointMagic) throw DataError("checkpoint: bad magic in manifest");
  try {
    out.model = std::make_unique<PrpModel>(m.at("n_users").get<std::size_t>(), m.at("n_items").get<std::size_t>(),
                                           m.at("dim").get<std::size_t>());
    std::ifstream blob(dir / m.at("blob").get<std::string>(), std::ios::binary);
    if (!blob) throw DataError("cannot read checkpoint blob");
    std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
    if (bytes.size() < sizeof(kBlobMagic) || std::memcmp(bytes.data(), kBlobMagic, sizeof(kBlobMagic)) != 0) {
      throw DataError("checkpoint: bad magic in blob");
    }
    if (bytes.size() != m.at("blob_bytes").get<std::uint64_t>()) throw DataError("checkpoint: blob size mismatch");
    std::size_t seen = 0;
    for (const auto& entry : m.at("tensors")) {
      auto& t = out.model->params().at(entry.at("name").get<std::string>());
      if (entry.at("shape").get<std::vector<std::size_t>>() != t.shape) {
        throw DataError("checkpoint: shape mismatch for tensor " + t.name);
      }
      const auto offset = entry.at("offset").get<std::uint64_t>();
      if (offset + 8 * t.numel() > bytes.size()) throw DataError("checkpoint: tensor " + t.name + " overruns blob");
      for (std::size_t n = 0; n < t.numel(); ++n) {
        std::uint64_t bits = 0;
        for (int b = 7; b >= 0; --b) bits = (bits << 8) | static_cast<unsigned char>(bytes[offset + 8 * n + static_cast<std::size_t>(b)]);
        t.values[n] = std::bit_cast<double>(bits);
      }
      ++seen;
    }
    if (seen != out.model->params().tensors().size()) throw DataError("checkpoint: missing tensors");
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
  } catch (const UsageError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  return out;
}

}  // namespace prp
