#pragma once

#include <cmath>
#include <map>
#include <vector>

#include "peace/model/graph_encoder.hpp"
#include "peace/model/prototype.hpp"

namespace peace {

enum class TowerMode { plain, prototype_enhanced };

/// Each user's behavior list per source domain, taken from the user's most
/// recent record in that domain (latest timestamp, later file line on ties).
struct UserHistories {
  std::vector<std::size_t> domains;
  std::map<std::size_t, std::vector<std::vector<std::size_t>>> by_user;

  static UserHistories from(const DatasetBundle& b) {
    UserHistories h;
    h.domains = b.source_domains();
    for (std::size_t k = 0; k < h.domains.size(); ++k) {
      auto it = b.source_records.find(h.domains[k]);
      if (it == b.source_records.end()) continue;
      std::map<std::size_t, const InteractionRecord*> latest;
      for (const auto& r : it->second) {
        auto& slot = latest[r.user];
        if (!slot || r.timestamp >= slot->timestamp) slot = &r;
      }
      for (const auto& [u, r] : latest) {
        auto& per_domain = h.by_user[u];
        per_domain.resize(h.domains.size());
        per_domain[k] = r->behaviors;
      }
    }
    return h;
  }
};

/// Concatenated per-domain entity blocks of length `cap`; -1 marks padding.
struct UserSequence {
  std::size_t cap = 0;
  std::vector<std::ptrdiff_t> entity;

  std::size_t length() const { return entity.size(); }
  bool valid(std::size_t pos) const { return entity[pos] >= 0; }

  std::vector<std::size_t> valid_entities() const {
    std::vector<std::size_t> out;
    for (auto e : entity)
      if (e >= 0) out.push_back(static_cast<std::size_t>(e));
    return out;
  }
  bool empty() const { return valid_entities().empty(); }
};

/// User -> item list -> entity list, per source domain in ascending domain
/// id; item order and entity order within an item are preserved, the most
/// recent `cap` entities are kept and each block is right-padded.
inline UserSequence deconstruct(std::size_t user, const UserHistories& histories, const ItemEntityMap& map,
                                std::size_t cap) {
  UserSequence seq;
  seq.cap = cap;
  seq.entity.assign(cap * histories.domains.size(), -1);
  auto it = histories.by_user.find(user);
  if (it == histories.by_user.end()) return seq;
  for (std::size_t k = 0; k < histories.domains.size(); ++k) {
    std::vector<std::size_t> ents;
    for (auto item : it->second[k]) {
      const auto& e = map.at(item);
      ents.insert(ents.end(), e.begin(), e.end());
    }
    const std::size_t keep = std::min(cap, ents.size());
    for (std::size_t p = 0; p < keep; ++p)
      seq.entity[k * cap + p] = static_cast<std::ptrdiff_t>(ents[ents.size() - keep + p]);
  }
  return seq;
}

inline UserSequence deconstruct(std::size_t user, const DatasetBundle& b, std::size_t cap) {
  return deconstruct(user, UserHistories::from(b), b.item_entities, cap);
}

/// M interest vectors [M x d]: for kernel w_i, attention
/// softmax(w_i^T tanh(W^A H_u^T)) over the valid positions of H_u. Padded
/// positions are dropped before the softmax, which is the same as giving
/// them -inf logits.
inline Var extract_interests(Graph& g, Var entity_embeddings, const UserSequence& seq, ModelParams& model) {
  auto ids = seq.valid_entities();
  if (ids.empty()) throw ValidationError("extract_interests: empty history");
  Var hu = ad::gather_rows(g, entity_embeddings, std::move(ids));
  Var t = ad::tanh(g, ad::matmul_nt(g, hu, g.param(model["tower.attn"])));
  Var logits = ad::matmul_nt(g, g.param(model["tower.kernels"]), t);
  return ad::matmul(g, ad::softmax_rows(g, logits), hu);
}

/// Interest rows of a user, or M copies of the learned cold-start vector when
/// the history is empty.
inline Var interests_or_cold(Graph& g, Var entity_embeddings, const UserSequence& seq, ModelParams& model) {
  if (!seq.empty()) return extract_interests(g, entity_embeddings, seq, model);
  return ad::gather_rows(g, g.param(model["tower.cold"]), std::vector<std::size_t>(model.config.interests, 0));
}

/// Prototype-enhanced attention for R interest rows z [R x d] with one mask
/// row per interest [R x n]:
/// MLP(x) with x = P^T softmax((P z + m) / sqrt(d)) + z. The MLP carries a
/// skip connection, x + f(x), so its output stays in entity space where the
/// inner-product ranker works.
inline Var pe_attention(Graph& g, Var z, const Tensor& mask, Var prototypes, ModelParams& model) {
  const double d = static_cast<double>(g.value(z).cols());
  Var logits = ad::scale(g, ad::matmul_nt(g, z, prototypes), 1.0 / std::sqrt(d));
  // (Pz + m)/sqrt(d) == Pz/sqrt(d) + m for m in {0, -inf}.
  Var attn = ad::softmax_rows(g, logits, &mask);
  Var context = ad::matmul(g, attn, prototypes);
  Var x = ad::add(g, context, z);
  return ad::add(g, x, mlp_forward(g, model.store, "pea", x));
}

/// Adaptive fusion of groups of M consecutive interest rows:
/// z_u = sum_A softmax_A(v^T tanh(W z^A)) z^A. Returns [groups x d]; the
/// fusion weights [groups x M] are written to `weights` when given.
inline Var fuse(Graph& g, Var interests, std::size_t groups, ModelParams& model, Var* weights = nullptr) {
  const std::size_t rows = g.value(interests).rows();
  if (groups == 0 || rows % groups != 0) throw ValidationError("fuse: rows not divisible into groups");
  Var hidden = ad::tanh(g, ad::matmul_nt(g, interests, g.param(model["tower.fuse_w"])));
  Var scores = ad::matmul_nt(g, hidden, g.param(model["tower.fuse_v"]));
  Var w = ad::softmax_rows(g, ad::reshape(g, scores, {groups, rows / groups}));
  if (weights) *weights = w;
  return ad::segment_combine(g, w, interests);
}

/// Mask from the averaged similarity vectors of a set of entities; all zeros
/// (every prototype allowed) when the set is empty.
inline std::vector<double> aggregate_mask(const std::vector<std::size_t>& entities, const Tensor& entity_embeddings,
                                          const Tensor& prototypes, std::size_t k) {
  const std::size_t n = prototypes.rows();
  if (entities.empty()) return std::vector<double>(n, 0.0);
  std::vector<double> avg(n, 0.0);
  for (auto e : entities) {
    auto s = similarity(entity_embeddings.row(e), prototypes);
    for (std::size_t i = 0; i < n; ++i) avg[i] += s[i];
  }
  for (auto& v : avg) v /= static_cast<double>(entities.size());
  return topk_mask(avg, k);
}

/// One user-encoding request: which interest block to use and the context
/// mask (length n) for prototype-enhanced mode.
struct EncodeRequest {
  std::size_t block = 0;
  std::vector<double> mask;
};

/// Universal encodings [B x d] for B requests against stacked interest
/// blocks [(U*M) x d].
inline Var encode_from_interests(Graph& g, Var interest_blocks, const std::vector<EncodeRequest>& requests,
                                 Var prototypes, ModelParams& model, TowerMode mode) {
  const std::size_t m = model.config.interests;
  std::vector<std::size_t> rows;
  rows.reserve(requests.size() * m);
  for (const auto& r : requests)
    for (std::size_t i = 0; i < m; ++i) rows.push_back(r.block * m + i);
  Var z = ad::gather_rows(g, interest_blocks, std::move(rows));
  if (mode == TowerMode::prototype_enhanced) {
    const std::size_t n = g.value(prototypes).rows();
    Tensor mask = Tensor::matrix(requests.size() * m, n);
    for (std::size_t b = 0; b < requests.size(); ++b) {
      if (requests[b].mask.size() != n) throw ValidationError("encode: context mask length must equal n");
      for (std::size_t i = 0; i < m; ++i) std::copy(requests[b].mask.begin(), requests[b].mask.end(), mask.row(b * m + i).begin());
    }
    z = pe_attention(g, z, mask, prototypes, model);
  }
  return fuse(g, z, requests.size(), model);
}

struct UserEncoding {
  Tensor interests;  // M x d, after prototype enhancement in that mode
  std::vector<double> universal;
};

/// Value-level encoding of a single user with a given context mask.
inline UserEncoding encode_user(const UserSequence& seq, const Tensor& entity_embeddings, ModelParams& model,
                                const std::vector<double>& mask, TowerMode mode) {
  Graph g;
  Var h = g.constant(entity_embeddings);
  Var p = g.constant(model["prototypes"].value);
  Var blocks = interests_or_cold(g, h, seq, model);
  const std::size_t m = model.config.interests;
  std::vector<std::size_t> rows(m);
  std::iota(rows.begin(), rows.end(), 0);
  Var z = ad::gather_rows(g, blocks, rows);
  if (mode == TowerMode::prototype_enhanced) {
    const std::size_t n = g.value(p).rows();
    if (mask.size() != n) throw ValidationError("encode_user: context mask length must equal n");
    Tensor mm = Tensor::matrix(m, n);
    for (std::size_t i = 0; i < m; ++i) std::copy(mask.begin(), mask.end(), mm.row(i).begin());
    z = pe_attention(g, z, mm, p, model);
  }
  Var u = fuse(g, z, 1, model);
  return {g.value(z), g.value(u).values()};
}

}  // namespace peace
