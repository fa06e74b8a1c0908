#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "peace/data/bundle_io.hpp"
#include "peace/model/model.hpp"
#include "peace/training/binary_io.hpp"

namespace peace {

using Metadata = std::map<std::string, std::string>;

/// A checkpoint is `<prefix>.manifest` (text: `meta` and `param` lines) plus
/// `<prefix>.bin` (packed little-endian doubles in manifest order).
struct CheckpointPaths {
  std::filesystem::path manifest;
  std::filesystem::path payload;

  static CheckpointPaths from_prefix(const std::filesystem::path& prefix) {
    return {prefix.string() + ".manifest", prefix.string() + ".bin"};
  }
};

/// Writes the checkpoint and returns the FNV-1a hash of the payload.
inline std::uint64_t save_checkpoint(const std::filesystem::path& prefix, const ParamStore& store, const Metadata& meta) {
  auto paths = CheckpointPaths::from_prefix(prefix);
  if (paths.manifest.has_parent_path()) std::filesystem::create_directories(paths.manifest.parent_path());
  std::ostringstream payload;
  std::ofstream man(paths.manifest, std::ios::binary);
  if (!man) throw RuntimeError("cannot write " + paths.manifest.string());
  for (const auto& [k, v] : meta) man << "meta\t" << k << '\t' << v << '\n';
  std::size_t offset = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Parameter& p = store.at(i);
    man << "param\t" << p.name << '\t' << io_detail::join(p.value.shape()) << '\t' << offset << '\n';
    for (double v : p.value.values()) binio::put_f64(payload, v);
    offset += p.value.size();
  }
  const std::string bytes = payload.str();
  std::ofstream bin(paths.payload, std::ios::binary);
  if (!bin) throw RuntimeError("cannot write " + paths.payload.string());
  bin.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  binio::Fnv1a h;
  h.update(bytes);
  return h.value();
}

struct LoadedCheckpoint {
  Metadata meta;
  ParamStore store;
  std::uint64_t hash = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& prefix) {
  auto paths = CheckpointPaths::from_prefix(prefix);
  std::ifstream bin(paths.payload, std::ios::binary);
  if (!bin) throw RuntimeError("cannot open " + paths.payload.string());
  std::string bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  if (bytes.size() % 8 != 0) throw ValidationError(paths.payload.string() + ": payload is not a whole number of doubles");
  LoadedCheckpoint out;
  binio::Fnv1a h;
  h.update(bytes);
  out.hash = h.value();
  std::istringstream payload(bytes);
  const std::size_t total = bytes.size() / 8;

  io_detail::LineReader in(paths.manifest);
  std::size_t expected_offset = 0;
  while (in.next()) {
    auto f = io_detail::split(in.line(), '\t');
    if (f.empty()) in.fail("empty manifest line");
    if (f[0] == "meta") {
      if (f.size() != 3) in.fail("meta line needs key and value");
      out.meta[std::string(f[1])] = std::string(f[2]);
    } else if (f[0] == "param") {
      if (f.size() != 4) in.fail("param line needs name, shape and offset");
      auto shape = in.id_list(f[2], "dimension");
      std::size_t offset = in.id(f[3], "offset");
      if (offset != expected_offset) in.fail("parameter offsets must be contiguous");
      Tensor t(shape);
      if (offset + t.size() > total) in.fail("parameter extends past payload");
      for (auto& v : t.values()) v = binio::get_f64(payload);
      expected_offset += t.size();
      out.store.add(std::string(f[1]), std::move(t));
    } else {
      in.fail("unknown manifest entry '" + std::string(f[0]) + "'");
    }
  }
  if (expected_offset != total) throw ValidationError(paths.manifest.string() + ": payload size does not match manifest");
  return out;
}

inline Metadata model_metadata(const ModelParams& m) {
  const auto& c = m.config;
  return {{"kind", "backbone"},
          {"dim", std::to_string(c.dim)},
          {"interests", std::to_string(c.interests)},
          {"prototypes", std::to_string(c.prototypes)},
          {"mask_k", std::to_string(c.mask_k)},
          {"temperature", io_detail::format_double(c.temperature)},
          {"seq_cap", std::to_string(c.seq_cap)},
          {"hidden", std::to_string(c.hidden)},
          {"leaky_slope", io_detail::format_double(c.leaky_slope)},
          {"use_graph", c.use_graph ? "1" : "0"},
          {"use_pea", c.use_pea ? "1" : "0"},
          {"entity_count", std::to_string(m.entity_count)}};
}

namespace ckpt_detail {
inline const std::string& need(const Metadata& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw ValidationError("checkpoint metadata missing '" + key + "'");
  return it->second;
}
inline std::size_t need_size(const Metadata& m, const std::string& key) { return std::stoull(need(m, key)); }
inline double need_double(const Metadata& m, const std::string& key) { return std::stod(need(m, key)); }
}  // namespace ckpt_detail

inline std::uint64_t save_model(const std::filesystem::path& prefix, const ModelParams& m) {
  return save_checkpoint(prefix, m.store, model_metadata(m));
}

inline ModelParams load_model(const std::filesystem::path& prefix, std::uint64_t* hash = nullptr) {
  using namespace ckpt_detail;
  auto ck = load_checkpoint(prefix);
  if (need(ck.meta, "kind") != "backbone") throw ValidationError(prefix.string() + " is not a backbone checkpoint");
  ModelParams m;
  m.config.dim = need_size(ck.meta, "dim");
  m.config.interests = need_size(ck.meta, "interests");
  m.config.prototypes = need_size(ck.meta, "prototypes");
  m.config.mask_k = need_size(ck.meta, "mask_k");
  m.config.temperature = need_double(ck.meta, "temperature");
  m.config.seq_cap = need_size(ck.meta, "seq_cap");
  m.config.hidden = need_size(ck.meta, "hidden");
  m.config.leaky_slope = need_double(ck.meta, "leaky_slope");
  m.config.use_graph = need(ck.meta, "use_graph") == "1";
  m.config.use_pea = need(ck.meta, "use_pea") == "1";
  m.entity_count = need_size(ck.meta, "entity_count");
  m.config.validate();
  m.store = std::move(ck.store);
  if (hash) *hash = ck.hash;
  return m;
}

}  // namespace peace
