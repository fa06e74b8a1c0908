#pragma once

#include <algorithm>
#include <cstdio>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "peace/model/user_tower.hpp"
#include "peace/training/embedding_store.hpp"

namespace peace {

struct PretrainConfig {
  double gamma = 1.0;  // weight of the contrastive prototype loss
  std::size_t batch_size = 512;
  std::size_t epochs = 5;
  double learning_rate = 1e-4;
  std::uint64_t seed = 1;
  NegativeSampling negatives = NegativeSampling::in_batch;

  void validate() const {
    if (!(gamma >= 0.0)) throw ValidationError("gamma must be >= 0");
    if (batch_size == 0) throw ValidationError("batch_size must be >= 1");
    if (gamma > 0.0 && batch_size < 2) throw ValidationError("batch_size must be >= 2 when gamma > 0");
    if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
  }
};

struct PretrainLosses {
  double total = 0.0;        // L_PT
  double entity = 0.0;       // L_ET
  double contrastive = 0.0;  // L_CP
};

struct EpochLog {
  std::size_t epoch = 0;
  PretrainLosses mean;
};

/// `epoch<TAB>L_PT<TAB>L_ET<TAB>L_CP`, six decimals.
inline std::string format_log_line(const EpochLog& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\t%.6f", e.epoch, e.mean.total, e.mean.entity, e.mean.contrastive);
  return buf;
}

/// sigma(MLP(z_u || h_e)) for a single pair.
inline double pretrain_score(std::span<const double> user, std::span<const double> entity, ModelParams& model) {
  if (user.size() != model.config.dim || entity.size() != model.config.dim) {
    throw ValidationError("pretrain_score: vectors must have dim " + std::to_string(model.config.dim));
  }
  Graph g;
  std::vector<double> joined(user.begin(), user.end());
  joined.insert(joined.end(), entity.begin(), entity.end());
  Var x = g.constant(Tensor::matrix(1, joined.size(), std::move(joined)));
  return ad::sigmoid_value(g.value(mlp_forward(g, model.store, "decoder", x))[0]);
}

/// Read-only data shared by every pre-training batch.
struct PretrainContext {
  const DatasetBundle* bundle = nullptr;
  std::size_t seq_cap = 0;
  std::shared_ptr<const Adjacency> adjacency;
  UserHistories histories;
  std::map<std::size_t, UserSequence> sequences;

  PretrainContext(const DatasetBundle& b, std::size_t cap)
      : bundle(&b),
        seq_cap(cap),
        adjacency(std::make_shared<const Adjacency>(b.graph.adjacency())),
        histories(UserHistories::from(b)) {}

  const UserSequence& sequence(std::size_t user) {
    auto it = sequences.find(user);
    if (it != sequences.end()) return it->second;
    return sequences[user] = deconstruct(user, histories, bundle->item_entities, seq_cap);
  }
};

/// Graph nodes of one batch objective.
struct BatchObjective {
  Var total;
  Var entity;
  Var contrastive;
  bool has_contrastive = false;
};

/// Builds L_PT = L_ET + gamma * L_CP for a batch of entity-level records.
/// L_ET is the mean binary cross-entropy of the decoder; L_CP runs over the
/// batch's distinct entities. With gamma = 0, L_CP is still evaluated for
/// logging when at least two entities are present but does not enter L_PT.
inline BatchObjective pretrain_objective(Graph& g, ModelParams& model, PretrainContext& ctx,
                                         std::span<const EntityRecord> batch, double gamma,
                                         NegativeSampling negatives = NegativeSampling::in_batch) {
  if (batch.empty()) throw ValidationError("pretrain_loss: empty batch");
  const auto& cfg = model.config;
  Var h = encode_entities(g, ctx.bundle->graph, model, ctx.adjacency);
  Var p = g.param(model["prototypes"]);
  // Copies: the tape grows below and would invalidate references.
  const Tensor hv = g.value(h);
  const Tensor pv = g.value(p);

  std::map<std::size_t, std::size_t> block_of;
  for (const auto& r : batch) block_of.emplace(r.user, 0);
  std::vector<Var> blocks;
  for (auto& [u, idx] : block_of) {
    idx = blocks.size();
    blocks.push_back(interests_or_cold(g, h, ctx.sequence(u), model));
  }
  Var interest_blocks = ad::concat_rows(g, blocks);

  const TowerMode mode = cfg.use_pea ? TowerMode::prototype_enhanced : TowerMode::plain;
  std::vector<EncodeRequest> requests;
  requests.reserve(batch.size());
  std::map<std::size_t, std::vector<double>> mask_cache;
  for (const auto& r : batch) {
    EncodeRequest req{block_of[r.user], {}};
    if (mode == TowerMode::prototype_enhanced) {
      auto it = mask_cache.find(r.entity);
      if (it == mask_cache.end()) it = mask_cache.emplace(r.entity, topk_mask(similarity(hv.row(r.entity), pv), cfg.mask_k)).first;
      req.mask = it->second;
    }
    requests.push_back(std::move(req));
  }
  Var zu = encode_from_interests(g, interest_blocks, requests, p, model, mode);

  std::vector<std::size_t> targets;
  std::vector<double> labels;
  for (const auto& r : batch) {
    targets.push_back(r.entity);
    labels.push_back(static_cast<double>(r.label));
  }
  Var he = ad::gather_rows(g, h, targets);
  Var logits = mlp_forward(g, model.store, "decoder", ad::concat_cols(g, {zu, he}));
  BatchObjective obj;
  obj.entity = ad::bce_with_logits(g, logits, std::move(labels));
  obj.total = obj.entity;

  std::set<std::size_t> unique(targets.begin(), targets.end());
  if (unique.size() >= 2) {
    Var hb = ad::gather_rows(g, h, std::vector<std::size_t>(unique.begin(), unique.end()));
    Var views = prototype_view(g, similarity(g, hb, p), p);
    NegativePolicy policy = NegativePolicy::in_batch();
    if (negatives == NegativeSampling::cross_prototype) {
      std::vector<std::size_t> owner;
      for (auto e : unique) owner.push_back(nearest_prototype(hv.row(e), pv));
      policy = NegativePolicy::cross_prototype(std::move(owner));
    }
    obj.contrastive = contrastive_loss(g, hb, views, cfg.temperature, policy);
    obj.has_contrastive = true;
    if (gamma > 0.0) obj.total = ad::add(g, obj.entity, ad::scale(g, obj.contrastive, gamma));
  } else if (gamma > 0.0) {
    throw ValidationError("pretrain_loss: gamma > 0 needs at least 2 distinct entities in a batch");
  }
  return obj;
}

inline PretrainLosses pretrain_loss(ModelParams& model, PretrainContext& ctx, std::span<const EntityRecord> batch,
                                    double gamma, NegativeSampling negatives = NegativeSampling::in_batch) {
  Graph g;
  auto obj = pretrain_objective(g, model, ctx, batch, gamma, negatives);
  return {g.value(obj.total)[0], g.value(obj.entity)[0], obj.has_contrastive ? g.value(obj.contrastive)[0] : 0.0};
}

/// All source-domain records expanded to entity level, domains ascending.
inline std::vector<EntityRecord> source_entity_records(const DatasetBundle& b) {
  std::vector<EntityRecord> out;
  for (const auto& [d, recs] : b.source_records) {
    auto e = expand_to_entity_records(recs, b.item_entities);
    out.insert(out.end(), e.begin(), e.end());
  }
  return out;
}

inline std::size_t distinct_entities(const std::vector<EntityRecord>& records, std::size_t begin, std::size_t end) {
  std::set<std::size_t> seen;
  for (std::size_t i = begin; i < end && seen.size() < 2; ++i) seen.insert(records[i].entity);
  return seen.size();
}

struct PretrainResult {
  ModelParams model;
  std::vector<EpochLog> log;
};

/// Shuffled minibatch Adam on L_PT over every source domain. Deterministic
/// for a fixed seed. The bundle must not carry planted truth.
inline PretrainResult pretrain(const DatasetBundle& bundle, const ModelConfig& model_cfg, const PretrainConfig& cfg,
                               const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (bundle.truth) throw ValidationError("pretrain: strip planted truth before training");
  auto records = source_entity_records(bundle);
  if (records.empty()) throw ValidationError("pretrain: empty source data");
  Rng rng(cfg.seed);
  PretrainResult out{init_model(model_cfg, bundle.graph.features, rng), {}};
  ModelParams& model = out.model;
  PretrainContext ctx(bundle, model_cfg.seq_cap);
  if (model_cfg.kmeans_init) {
    Tensor h0 = encode_entities(bundle.graph, model);
    model["prototypes"].value = kmeans_plus_plus(h0, model_cfg.prototypes, rng);
  }
  AdamOptimizer opt(AdamConfig{cfg.learning_rate});
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(records.begin(), records.end(), rng);
    PretrainLosses sum;
    std::size_t batches = 0;
    for (std::size_t start = 0, end = 0; start < records.size(); start = end) {
      end = std::min(records.size(), start + cfg.batch_size);
      // A tail with fewer than two distinct entities has no negatives; it
      // rides along with the batch before it.
      if (end < records.size() && distinct_entities(records, end, records.size()) < 2) end = records.size();
      std::span<const EntityRecord> batch(records.data() + start, end - start);
      model.store.zero_grad();
      Graph g;
      auto obj = pretrain_objective(g, model, ctx, batch, cfg.gamma, cfg.negatives);
      g.backward(obj.total);
      opt.step(model.store);
      sum.total += g.value(obj.total)[0];
      sum.entity += g.value(obj.entity)[0];
      sum.contrastive += obj.has_contrastive ? g.value(obj.contrastive)[0] : 0.0;
      ++batches;
    }
    const double n = static_cast<double>(batches);
    EpochLog e{epoch, {sum.total / n, sum.entity / n, sum.contrastive / n}};
    out.log.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  return out;
}

/// Entity rows plus z_u for the given users. In prototype-enhanced mode
/// each user's context mask comes from the averaged similarity of the
/// entities in their history.
inline EmbeddingStore infer_embeddings(ModelParams& model, PretrainContext& ctx, const std::set<std::size_t>& users) {
  const auto& cfg = model.config;
  const DatasetBundle& bundle = *ctx.bundle;
  Graph g;
  Var h = encode_entities(g, bundle.graph, model, ctx.adjacency);
  Var p = g.constant(model["prototypes"].value);
  const Tensor hv = g.value(h);

  const TowerMode mode = cfg.use_pea ? TowerMode::prototype_enhanced : TowerMode::plain;
  std::vector<Var> blocks;
  std::vector<EncodeRequest> requests;
  for (auto u : users) {
    const UserSequence& seq = ctx.sequence(u);
    blocks.push_back(interests_or_cold(g, h, seq, model));
    EncodeRequest req{requests.size(), {}};
    if (mode == TowerMode::prototype_enhanced)
      req.mask = aggregate_mask(seq.valid_entities(), hv, model["prototypes"].value, cfg.mask_k);
    requests.push_back(std::move(req));
  }
  EmbeddingStore store;
  store.dim = cfg.dim;
  for (std::size_t e = 0; e < hv.rows(); ++e) store.entities[e] = {hv.row(e).begin(), hv.row(e).end()};
  if (!users.empty()) {
    Var zu = encode_from_interests(g, ad::concat_rows(g, blocks), requests, p, model, mode);
    const Tensor& zv = g.value(zu);
    std::size_t row = 0;
    for (auto u : users) {
      store.users[u] = {zv.row(row).begin(), zv.row(row).end()};
      ++row;
    }
  }
  return store;
}

/// Offline inference: h_e for every entity and z_u for every user seen in
/// any domain.
inline EmbeddingStore infer_embeddings(ModelParams& model, const DatasetBundle& bundle) {
  PretrainContext ctx(bundle, model.config.seq_cap);
  std::set<std::size_t> users;
  for (const auto* recs : {&bundle.source_records, &bundle.target_records})
    for (const auto& [d, rs] : *recs)
      for (const auto& r : rs) users.insert(r.user);
  return infer_embeddings(model, ctx, users);
}

}  // namespace peace
