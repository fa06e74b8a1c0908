#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "peace/data/bundle_io.hpp"

namespace peace::testing {

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("peace-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Small hand-made bundle: 6 entities on a path 0-1-2-3-4-5, one source
/// domain (0) with items 0..3, one target domain (1) with items 10..12,
/// three users with profiles.
inline DatasetBundle tiny_bundle() {
  DatasetBundle b;
  b.graph.entity_count = 6;
  b.graph.relation_count = 2;
  for (std::size_t i = 0; i + 1 < 6; ++i) b.graph.triplets.push_back({i, i % 2, i + 1});
  b.graph.features = Tensor::matrix(6, kFeatureDim);
  Rng rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : b.graph.features.values()) v = n(rng);
  b.item_entities.entities_of = {{0, {0, 1}}, {1, {2}}, {2, {3, 4, 5}}, {3, {1, 4}},
                                 {10, {0}},   {11, {2, 3}}, {12, {5, 4}}};
  b.domains = {{0, DomainRole::source}, {1, DomainRole::target}};
  b.source_records[0] = {
      {0, 0, 0, {}, 1, 1},     {0, 0, 1, {0}, 0, 2},    {0, 1, 2, {}, 1, 3},  {0, 1, 3, {2}, 1, 4},
      {0, 2, 1, {}, 0, 5},     {0, 2, 0, {}, 1, 6},     {0, 0, 2, {0}, 1, 7}, {0, 1, 0, {2, 3}, 0, 8},
  };
  b.target_records[1] = {
      {1, 0, 10, {}, 1, 1}, {1, 1, 11, {}, 1, 2}, {1, 2, 12, {}, 0, 3}, {1, 0, 11, {10}, 0, 4},
      {1, 1, 12, {11}, 1, 5}, {1, 2, 10, {}, 1, 6}, {1, 0, 12, {10}, 1, 7},
  };
  b.schema.fields = {{0, Side::user, 3}, {1, Side::item, 2}};
  for (std::size_t u = 0; u < 3; ++u) b.profiles.users[u] = {{0, u}};
  for (std::size_t i : {10, 11, 12}) b.profiles.items[i] = {{1, i % 2}};
  return b;
}

}  // namespace peace::testing
