#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <string>
#include <vector>

#include "peace/data/dataset.hpp"
#include "peace/training/binary_io.hpp"

namespace peace {

inline constexpr char kStoreMagic[8] = {'P', 'E', 'A', 'C', 'E', 'E', 'M', 'B'};
inline constexpr std::uint32_t kStoreVersion = 1;

/// Byte offset of the write-time field in a snapshot file; the only field
/// that differs between otherwise identical snapshots.
inline constexpr std::size_t kStoreTimeOffset = 8 + 4 + 4 + 8 + 8 + 8 + 8;

/// One published snapshot of precomputed user and entity embeddings.
struct EmbeddingStore {
  std::uint64_t snapshot_id = 0;
  std::uint64_t model_hash = 0;
  std::int64_t write_time = 0;
  std::size_t dim = 0;
  std::map<std::size_t, std::vector<double>> users;
  std::map<std::size_t, std::vector<double>> entities;

  std::size_t row_count() const { return users.size() + entities.size(); }

  const std::vector<double>& user(std::size_t id) const {
    auto it = users.find(id);
    if (it == users.end()) throw ValidationError("store has no user " + std::to_string(id));
    return it->second;
  }
  const std::vector<double>& entity(std::size_t id) const {
    auto it = entities.find(id);
    if (it == entities.end()) throw ValidationError("store has no entity " + std::to_string(id));
    return it->second;
  }
};

/// Header: magic, version u32, dim u32, user count u64, entity count u64,
/// snapshot id u64, model hash u64, write time i64. Then fixed-width records
/// kind byte ('U'/'E'), id u64, dim doubles; all little-endian.
inline void write_store(const EmbeddingStore& s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out.write(kStoreMagic, 8);
  binio::put_u32(out, kStoreVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(s.dim));
  binio::put_u64(out, s.users.size());
  binio::put_u64(out, s.entities.size());
  binio::put_u64(out, s.snapshot_id);
  binio::put_u64(out, s.model_hash);
  binio::put_u64(out, static_cast<std::uint64_t>(s.write_time));
  auto rows = [&](char kind, const std::map<std::size_t, std::vector<double>>& m) {
    for (const auto& [id, v] : m) {
      if (v.size() != s.dim) throw ValidationError("store vector has wrong dimension");
      out.put(kind);
      binio::put_u64(out, id);
      for (double x : v) binio::put_f64(out, x);
    }
  };
  rows('U', s.users);
  rows('E', s.entities);
  if (!out) throw RuntimeError("write failed for " + path.string());
}

inline EmbeddingStore read_store(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kStoreMagic)) {
    throw ValidationError(path.string() + ": not an embedding store");
  }
  if (binio::get_u32(in) != kStoreVersion) throw ValidationError(path.string() + ": unsupported store version");
  EmbeddingStore s;
  s.dim = binio::get_u32(in);
  const std::uint64_t nu = binio::get_u64(in);
  const std::uint64_t ne = binio::get_u64(in);
  s.snapshot_id = binio::get_u64(in);
  s.model_hash = binio::get_u64(in);
  s.write_time = static_cast<std::int64_t>(binio::get_u64(in));
  for (std::uint64_t r = 0; r < nu + ne; ++r) {
    char kind = 0;
    if (!in.get(kind)) throw ValidationError(path.string() + ": truncated store");
    std::size_t id = binio::get_u64(in);
    std::vector<double> v(s.dim);
    for (auto& x : v) x = binio::get_f64(in);
    auto& sink = kind == 'U' ? s.users : kind == 'E' ? s.entities : throw ValidationError("bad record kind");
    sink[id] = std::move(v);
  }
  if (s.users.size() != nu || s.entities.size() != ne) throw ValidationError(path.string() + ": record counts do not match header");
  return s;
}

namespace store_detail {
inline std::vector<std::pair<std::uint64_t, std::filesystem::path>> snapshots(const std::filesystem::path& dir) {
  std::vector<std::pair<std::uint64_t, std::filesystem::path>> out;
  if (!std::filesystem::exists(dir)) return out;
  static const std::regex pattern(R"(snapshot-(\d+)\.emb)");
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, pattern)) out.emplace_back(std::stoull(m[1].str()), entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}
}  // namespace store_detail

inline std::filesystem::path snapshot_path(const std::filesystem::path& dir, std::uint64_t id) {
  char name[64];
  std::snprintf(name, sizeof name, "snapshot-%06llu.emb", static_cast<unsigned long long>(id));
  return dir / name;
}

/// Publishes `s` under the next snapshot id of `dir` via write-then-rename;
/// published snapshots are never modified. Returns the file path.
inline std::filesystem::path publish_snapshot(EmbeddingStore& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto existing = store_detail::snapshots(dir);
  s.snapshot_id = existing.empty() ? 1 : existing.back().first + 1;
  s.write_time = std::chrono::duration_cast<std::chrono::seconds>(
                     std::chrono::system_clock::now().time_since_epoch())
                     .count();
  auto final_path = snapshot_path(dir, s.snapshot_id);
  auto tmp = final_path;
  tmp += ".tmp";
  write_store(s, tmp);
  std::filesystem::rename(tmp, final_path);
  return final_path;
}

inline std::filesystem::path latest_snapshot(const std::filesystem::path& dir) {
  auto all = store_detail::snapshots(dir);
  if (all.empty()) throw ValidationError("no snapshot in " + dir.string());
  return all.back().second;
}

/// Mean of the stored embeddings of the item's entities.
inline std::vector<double> item_embedding(std::size_t item, const ItemEntityMap& map, const EmbeddingStore& store) {
  const auto& ents = map.at(item);
  std::vector<double> out(store.dim, 0.0);
  for (auto e : ents) {
    const auto& h = store.entity(e);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += h[k];
  }
  for (auto& v : out) v /= static_cast<double>(ents.size());
  return out;
}

/// Zero-shot preference: inner product of user and item encodings.
inline double zeroshot_score(std::span<const double> user, std::span<const double> item) { return dot(user, item); }

}  // namespace peace
