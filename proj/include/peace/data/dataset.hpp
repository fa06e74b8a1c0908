#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "peace/numerics/autograd.hpp"

namespace peace {

inline constexpr std::size_t kFeatureDim = 32;
inline constexpr std::size_t kMaxEntitiesPerItem = 3;

struct Triplet {
  std::size_t head = 0;
  std::size_t relation = 0;
  std::size_t tail = 0;

  friend auto operator<=>(const Triplet&, const Triplet&) = default;
};

/// Entities, typed relations and the initial 32-dim entity features.
struct EntityGraph {
  std::size_t entity_count = 0;
  std::size_t relation_count = 0;
  std::vector<Triplet> triplets;
  Tensor features;  // entity_count x kFeatureDim

  /// Undirected neighbor lists with a self-loop on every node, neighbors in
  /// ascending id order. Relation ids are not used.
  Adjacency adjacency() const {
    std::vector<std::set<std::size_t>> nb(entity_count);
    for (std::size_t i = 0; i < entity_count; ++i) nb[i].insert(i);
    for (const auto& t : triplets) {
      nb[t.head].insert(t.tail);
      nb[t.tail].insert(t.head);
    }
    Adjacency adj;
    for (const auto& s : nb) {
      adj.neighbors.insert(adj.neighbors.end(), s.begin(), s.end());
      adj.offsets.push_back(adj.neighbors.size());
    }
    return adj;
  }

  friend bool operator==(const EntityGraph&, const EntityGraph&) = default;
};

/// phi: item -> 1..3 entities.
struct ItemEntityMap {
  std::map<std::size_t, std::vector<std::size_t>> entities_of;

  const std::vector<std::size_t>& at(std::size_t item) const {
    auto it = entities_of.find(item);
    if (it == entities_of.end()) throw ValidationError("item " + std::to_string(item) + " is not mapped to any entity");
    return it->second;
  }
  bool contains(std::size_t item) const { return entities_of.count(item) != 0; }

  friend bool operator==(const ItemEntityMap&, const ItemEntityMap&) = default;
};

struct InteractionRecord {
  std::size_t domain = 0;
  std::size_t user = 0;
  std::size_t item = 0;
  std::vector<std::size_t> behaviors;
  int label = 0;
  std::int64_t timestamp = 0;

  friend bool operator==(const InteractionRecord&, const InteractionRecord&) = default;
};

/// ⟨user, entity, label⟩ produced by expanding an item-level record.
struct EntityRecord {
  std::size_t domain = 0;
  std::size_t user = 0;
  std::size_t entity = 0;
  int label = 0;

  friend bool operator==(const EntityRecord&, const EntityRecord&) = default;
};

enum class Side { user, item };
enum class DomainRole { source, target };

struct FieldSpec {
  std::size_t field = 0;
  Side side = Side::user;
  std::size_t cardinality = 0;

  friend bool operator==(const FieldSpec&, const FieldSpec&) = default;
};

/// Declared categorical profile fields, sorted by field id.
struct ProfileSchema {
  std::vector<FieldSpec> fields;

  const FieldSpec* find(std::size_t field) const {
    for (const auto& f : fields)
      if (f.field == field) return &f;
    return nullptr;
  }
  std::vector<FieldSpec> side(Side s) const {
    std::vector<FieldSpec> out;
    for (const auto& f : fields)
      if (f.side == s) out.push_back(f);
    return out;
  }

  friend bool operator==(const ProfileSchema&, const ProfileSchema&) = default;
};

using FieldValues = std::vector<std::pair<std::size_t, std::size_t>>;  // (field id, value id)

struct ProfileFeatures {
  std::map<std::size_t, FieldValues> users;
  std::map<std::size_t, FieldValues> items;

  friend bool operator==(const ProfileFeatures&, const ProfileFeatures&) = default;
};

struct DatasetBundle {
  EntityGraph graph;
  ItemEntityMap item_entities;
  std::map<std::size_t, DomainRole> domains;
  /// Records per domain in file order.
  std::map<std::size_t, std::vector<InteractionRecord>> source_records;
  std::map<std::size_t, std::vector<InteractionRecord>> target_records;
  ProfileSchema schema;
  ProfileFeatures profiles;
  /// Planted entity -> topic assignment (synthetic bundles only).
  std::optional<std::vector<std::size_t>> truth;

  std::vector<std::size_t> source_domains() const { return keys_with(DomainRole::source); }
  std::vector<std::size_t> target_domains() const { return keys_with(DomainRole::target); }

  std::size_t user_count() const {
    std::size_t n = 0;
    for (const auto* recs : {&source_records, &target_records})
      for (const auto& [d, rs] : *recs)
        for (const auto& r : rs) n = std::max(n, r.user + 1);
    return n;
  }

  /// Distinct items seen in a domain's log, ascending.
  std::vector<std::size_t> catalog(std::size_t domain) const {
    std::set<std::size_t> items;
    for (const auto* recs : {&source_records, &target_records}) {
      auto it = recs->find(domain);
      if (it == recs->end()) continue;
      for (const auto& r : it->second) items.insert(r.item);
    }
    return {items.begin(), items.end()};
  }

  const std::vector<InteractionRecord>& records(std::size_t domain) const {
    if (auto it = source_records.find(domain); it != source_records.end()) return it->second;
    if (auto it = target_records.find(domain); it != target_records.end()) return it->second;
    throw ValidationError("unknown domain " + std::to_string(domain));
  }

  /// Copy without the planted truth; this is what training code receives.
  DatasetBundle without_truth() const {
    DatasetBundle b = *this;
    b.truth.reset();
    return b;
  }

  friend bool operator==(const DatasetBundle&, const DatasetBundle&) = default;

 private:
  std::vector<std::size_t> keys_with(DomainRole role) const {
    std::vector<std::size_t> out;
    for (const auto& [d, r] : domains)
      if (r == role) out.push_back(d);
    return out;
  }
};

/// One entity-level record per (record, associated entity); input order, then
/// entity order within the item.
inline std::vector<EntityRecord> expand_to_entity_records(const std::vector<InteractionRecord>& records,
                                                          const ItemEntityMap& map) {
  std::vector<EntityRecord> out;
  out.reserve(records.size() * 2);
  for (const auto& r : records) {
    for (std::size_t e : map.at(r.item)) out.push_back({r.domain, r.user, e, r.label});
  }
  return out;
}

}  // namespace peace
