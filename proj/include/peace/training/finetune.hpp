#pragma once

#include <algorithm>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "peace/training/checkpoint.hpp"
#include "peace/training/pretrain.hpp"

namespace peace {

/// Target-domain scoring heads: the DeepFM branch over profile fields and the
/// outer MLP over z_u || z_i || DeepFM(x_u || x_i).
struct HeadConfig {
  std::size_t dim = 64;
  std::size_t hidden = 64;
  std::size_t fm_dim = 8;
  std::vector<std::size_t> deep_widths{64, 32, 8};
  bool use_deepfm = true;
  ProfileSchema schema;

  /// deep top || FM second order || first order
  std::size_t branch_width() const { return use_deepfm ? deep_widths.back() + 2 : 0; }
};

struct FinetuneHeads {
  HeadConfig config;
  ParamStore store;
};

inline std::string field_name(std::size_t field) { return "f" + std::to_string(field); }

/// Fresh heads. The outer MLP output layer starts at zero so every initial
/// prediction is exactly 0.5.
inline FinetuneHeads init_heads(const HeadConfig& cfg, Rng& rng) {
  if (cfg.use_deepfm && cfg.schema.fields.empty()) throw ValidationError("DeepFM branch needs a profile schema");
  FinetuneHeads h{cfg, {}};
  auto& s = h.store;
  if (cfg.use_deepfm) {
    for (const auto& f : cfg.schema.fields) {
      Tensor emb = Tensor::matrix(f.cardinality, cfg.fm_dim);
      gaussian_fill(emb, 0.1, rng);
      s.add("deepfm.embed." + field_name(f.field), std::move(emb));
      s.add("deepfm.linear." + field_name(f.field), Tensor::matrix(f.cardinality, 1));
    }
    s.add("deepfm.bias", Tensor({1}));
    std::size_t in = cfg.schema.fields.size() * cfg.fm_dim;
    for (std::size_t l = 0; l < cfg.deep_widths.size(); ++l) {
      s.add("deepfm.deep" + std::to_string(l + 1) + ".weight", model_detail::glorot(in, cfg.deep_widths[l], rng));
      s.add("deepfm.deep" + std::to_string(l + 1) + ".bias", Tensor({cfg.deep_widths[l]}));
      in = cfg.deep_widths[l];
    }
  }
  add_mlp(s, "head", 2 * cfg.dim + cfg.branch_width(), cfg.hidden, 1, rng, /*zero_output=*/true);
  return h;
}

/// Field values of a (user, item) pair in schema order.
inline std::vector<std::size_t> profile_row(std::size_t user, std::size_t item, const ProfileFeatures& profiles,
                                            const ProfileSchema& schema) {
  auto lookup = [](const std::map<std::size_t, FieldValues>& m, std::size_t id, std::size_t field) -> const std::size_t* {
    auto it = m.find(id);
    if (it == m.end()) return nullptr;
    for (const auto& [f, v] : it->second)
      if (f == field) return &v;
    return nullptr;
  };
  std::vector<std::size_t> row;
  row.reserve(schema.fields.size());
  for (const auto& f : schema.fields) {
    const std::size_t* v = f.side == Side::user ? lookup(profiles.users, user, f.field) : lookup(profiles.items, item, f.field);
    if (!v) {
      throw ValidationError("missing profile schema field " + std::to_string(f.field) + " for " +
                            (f.side == Side::user ? "user " + std::to_string(user) : "item " + std::to_string(item)));
    }
    row.push_back(*v);
  }
  return row;
}

/// DeepFM branch output [B x 10] for B rows of field values.
inline Var deepfm_branch(Graph& g, FinetuneHeads& heads, const std::vector<std::vector<std::size_t>>& rows) {
  const auto& cfg = heads.config;
  const std::size_t b = rows.size();
  std::vector<Var> embeds;
  Var first_order;
  for (std::size_t k = 0; k < cfg.schema.fields.size(); ++k) {
    const auto name = field_name(cfg.schema.fields[k].field);
    std::vector<std::size_t> idx(b);
    for (std::size_t i = 0; i < b; ++i) idx[i] = rows[i].at(k);
    embeds.push_back(ad::gather_rows(g, g.param(heads.store["deepfm.embed." + name]), idx));
    Var w = ad::gather_rows(g, g.param(heads.store["deepfm.linear." + name]), idx);
    first_order = k == 0 ? w : ad::add(g, first_order, w);
  }
  first_order = ad::add_row(g, first_order, g.param(heads.store["deepfm.bias"]));

  Var sum_v = embeds[0];
  Var sum_sq = ad::mul(g, embeds[0], embeds[0]);
  for (std::size_t k = 1; k < embeds.size(); ++k) {
    sum_v = ad::add(g, sum_v, embeds[k]);
    sum_sq = ad::add(g, sum_sq, ad::mul(g, embeds[k], embeds[k]));
  }
  Var second_order = ad::scale(g, ad::row_sum(g, ad::sub(g, ad::mul(g, sum_v, sum_v), sum_sq)), 0.5);

  Var deep = ad::concat_cols(g, embeds);
  for (std::size_t l = 0; l < cfg.deep_widths.size(); ++l) {
    const std::string p = "deepfm.deep" + std::to_string(l + 1);
    deep = ad::relu(g, ad::linear(g, deep, g.param(heads.store[p + ".weight"]), g.param(heads.store[p + ".bias"])));
  }
  return ad::concat_cols(g, {deep, second_order, first_order});
}

/// Logits [B x 1] of sigma(MLP(z_u || z_i || DeepFM(x_u || x_i))).
inline Var finetune_logits(Graph& g, FinetuneHeads& heads, Var users, Var items,
                           const std::vector<std::vector<std::size_t>>& fields) {
  std::vector<Var> parts{users, items};
  if (heads.config.use_deepfm) parts.push_back(deepfm_branch(g, heads, fields));
  return mlp_forward(g, heads.store, "head", ad::concat_cols(g, parts));
}

inline double finetune_score(std::span<const double> user, std::span<const double> item,
                             const std::vector<std::size_t>& fields, FinetuneHeads& heads) {
  const std::size_t d = heads.config.dim;
  if (user.size() != d || item.size() != d) throw ValidationError("finetune_score: vectors must have dim " + std::to_string(d));
  Graph g;
  Var u = g.constant(Tensor::matrix(1, d, {user.begin(), user.end()}));
  Var i = g.constant(Tensor::matrix(1, d, {item.begin(), item.end()}));
  return ad::sigmoid_value(g.value(finetune_logits(g, heads, u, i, {fields}))[0]);
}

struct FinetuneConfig {
  std::size_t target_domain = 0;
  std::size_t epochs = 3;
  double learning_rate = 1e-4;
  std::size_t batch_size = 512;
  std::uint64_t seed = 1;
  /// Only the heads are trained; embeddings come from the store.
  bool frozen_backbone = true;
  bool use_deepfm = true;
  std::size_t hidden = 64;
};

/// Embedding rows and profile rows of a record batch, read from a store.
struct ScoringBatch {
  Tensor users;
  Tensor items;
  std::vector<std::vector<std::size_t>> fields;
  std::vector<double> labels;
};

inline ScoringBatch make_scoring_batch(std::span<const InteractionRecord> records, const EmbeddingStore& store,
                                       const DatasetBundle& bundle, const HeadConfig& cfg) {
  ScoringBatch b;
  const std::size_t d = store.dim;
  b.users = Tensor::matrix(records.size(), d);
  b.items = Tensor::matrix(records.size(), d);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const auto& zu = store.user(r.user);
    auto zi = item_embedding(r.item, bundle.item_entities, store);
    std::copy(zu.begin(), zu.end(), b.users.row(i).begin());
    std::copy(zi.begin(), zi.end(), b.items.row(i).begin());
    b.fields.push_back(cfg.use_deepfm ? profile_row(r.user, r.item, bundle.profiles, cfg.schema) : std::vector<std::size_t>{});
    b.labels.push_back(static_cast<double>(r.label));
  }
  return b;
}

struct FinetuneResult {
  FinetuneHeads heads;
  std::vector<double> epoch_loss;
};

using BatchSource = std::function<ScoringBatch(std::span<const InteractionRecord>, const HeadConfig&)>;

namespace finetune_detail {

/// Adam on the mean cross-entropy of fresh heads; embedding rows of every
/// batch come from `source`.
inline FinetuneResult train_heads(const std::vector<InteractionRecord>& train, std::size_t dim,
                                  const DatasetBundle& bundle, const FinetuneConfig& cfg, const BatchSource& source) {
  if (train.empty()) throw ValidationError("finetune: empty target train set");
  Rng rng(cfg.seed);
  HeadConfig hc;
  hc.dim = dim;
  hc.hidden = cfg.hidden;
  hc.use_deepfm = cfg.use_deepfm;
  hc.schema = bundle.schema;
  FinetuneResult out{init_heads(hc, rng), {}};
  AdamOptimizer opt(AdamConfig{cfg.learning_rate});
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<InteractionRecord> recs;
      for (std::size_t k = start; k < end; ++k) recs.push_back(train[order[k]]);
      auto batch = source(recs, hc);
      out.heads.store.zero_grad();
      Graph g;
      Var logits = finetune_logits(g, out.heads, g.constant(batch.users), g.constant(batch.items), batch.fields);
      Var loss = ad::bce_with_logits(g, logits, batch.labels);
      g.backward(loss);
      opt.step(out.heads.store);
      total += g.value(loss)[0];
      ++batches;
    }
    out.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  return out;
}

}  // namespace finetune_detail

/// Heads trained on target records with user/entity embeddings read from
/// `store` (backbone frozen).
inline FinetuneResult finetune(const std::vector<InteractionRecord>& train, const EmbeddingStore& store,
                               const DatasetBundle& bundle, const FinetuneConfig& cfg) {
  if (!cfg.frozen_backbone) throw ValidationError("finetune: use finetune_live for an unfrozen backbone");
  return finetune_detail::train_heads(train, store.dim, bundle, cfg, [&](auto recs, const HeadConfig& hc) {
    return make_scoring_batch(recs, store, bundle, hc);
  });
}

/// Probabilities for one user against many items of a store-backed scorer.
inline std::vector<double> score_items(FinetuneHeads& heads, const EmbeddingStore& store, const DatasetBundle& bundle,
                                       std::size_t user, const std::vector<std::size_t>& items) {
  std::vector<InteractionRecord> recs;
  recs.reserve(items.size());
  for (auto i : items) recs.push_back({0, user, i, {}, 0, 0});
  auto batch = make_scoring_batch(recs, store, bundle, heads.config);
  Graph g;
  Var logits = finetune_logits(g, heads, g.constant(batch.users), g.constant(batch.items), batch.fields);
  std::vector<double> out(items.size());
  for (std::size_t k = 0; k < items.size(); ++k) out[k] = ad::sigmoid_value(g.value(logits)[k]);
  return out;
}

/// Item context mask for live scoring: averaged similarity vectors of the
/// item's entities, then the top-K mask.
inline std::vector<double> item_context_mask(std::size_t item, const ItemEntityMap& map, const Tensor& entity_embeddings,
                                             const Tensor& prototypes, std::size_t k) {
  return aggregate_mask(map.at(item), entity_embeddings, prototypes, k);
}

/// Logits [B x 1] with embeddings computed live from the backbone. Item
/// encodings are mean-pooled entity rows; in prototype-enhanced mode each
/// user is encoded with the candidate item's context mask.
inline Var live_logits(Graph& g, ModelParams& model, FinetuneHeads& heads, PretrainContext& ctx,
                       std::span<const InteractionRecord> records) {
  const auto& cfg = model.config;
  const auto& bundle = *ctx.bundle;
  Var h = encode_entities(g, bundle.graph, model, ctx.adjacency);
  Var p = g.param(model["prototypes"]);
  const Tensor hv = g.value(h);
  const Tensor pv = g.value(p);
  std::map<std::size_t, std::size_t> block_of;
  for (const auto& r : records) block_of.emplace(r.user, 0);
  std::vector<Var> blocks;
  for (auto& [u, idx] : block_of) {
    idx = blocks.size();
    blocks.push_back(interests_or_cold(g, h, ctx.sequence(u), model));
  }
  const TowerMode mode = cfg.use_pea ? TowerMode::prototype_enhanced : TowerMode::plain;
  std::vector<EncodeRequest> requests;
  Tensor pool = Tensor::matrix(records.size(), hv.rows());
  std::vector<std::vector<std::size_t>> fields;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    EncodeRequest req{block_of[r.user], {}};
    if (mode == TowerMode::prototype_enhanced) req.mask = item_context_mask(r.item, bundle.item_entities, hv, pv, cfg.mask_k);
    requests.push_back(std::move(req));
    const auto& ents = bundle.item_entities.at(r.item);
    for (auto e : ents) pool.at(i, e) += 1.0 / static_cast<double>(ents.size());
    fields.push_back(heads.config.use_deepfm ? profile_row(r.user, r.item, bundle.profiles, heads.config.schema)
                                             : std::vector<std::size_t>{});
  }
  Var zu = encode_from_interests(g, ad::concat_rows(g, blocks), requests, p, model, mode);
  Var zi = ad::matmul(g, g.constant(std::move(pool)), h);
  return finetune_logits(g, heads, zu, zi, fields);
}

/// Fine-tuning with embeddings recomputed from the backbone. With a frozen
/// backbone each batch is encoded live the same way offline inference
/// encodes it; otherwise backbone and heads are trained jointly and users
/// are encoded with the candidate item's context mask.
inline FinetuneResult finetune_live(ModelParams& model, const DatasetBundle& bundle,
                                    const std::vector<InteractionRecord>& train, const FinetuneConfig& cfg) {
  if (train.empty()) throw ValidationError("finetune: empty target train set");
  PretrainContext ctx(bundle, model.config.seq_cap);
  if (cfg.frozen_backbone) {
    // Every batch re-runs the encoder and the user tower for its own users.
    return finetune_detail::train_heads(train, model.config.dim, bundle, cfg, [&](auto recs, const HeadConfig& hc) {
      std::set<std::size_t> users;
      for (const auto& r : recs) users.insert(r.user);
      return make_scoring_batch(recs, infer_embeddings(model, ctx, users), bundle, hc);
    });
  }
  Rng rng(cfg.seed);
  HeadConfig hc;
  hc.dim = model.config.dim;
  hc.hidden = cfg.hidden;
  hc.use_deepfm = cfg.use_deepfm;
  hc.schema = bundle.schema;
  FinetuneResult out{init_heads(hc, rng), {}};
  AdamOptimizer head_opt(AdamConfig{cfg.learning_rate});
  AdamOptimizer backbone_opt(AdamConfig{cfg.learning_rate});
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<InteractionRecord> recs;
      std::vector<double> labels;
      for (std::size_t k = start; k < end; ++k) {
        recs.push_back(train[order[k]]);
        labels.push_back(static_cast<double>(recs.back().label));
      }
      out.heads.store.zero_grad();
      model.store.zero_grad();
      Graph g;
      Var loss = ad::bce_with_logits(g, live_logits(g, model, out.heads, ctx, recs), std::move(labels));
      g.backward(loss);
      head_opt.step(out.heads.store);
      backbone_opt.step(model.store);
      total += g.value(loss)[0];
      ++batches;
    }
    out.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  return out;
}

inline Metadata heads_metadata(const FinetuneHeads& h) {
  std::string fields;
  for (const auto& f : h.config.schema.fields) {
    if (!fields.empty()) fields += ',';
    fields += std::to_string(f.field) + ":" + (f.side == Side::user ? "user" : "item") + ":" + std::to_string(f.cardinality);
  }
  std::string widths;
  for (auto w : h.config.deep_widths) widths += (widths.empty() ? "" : ",") + std::to_string(w);
  return {{"kind", "heads"},
          {"dim", std::to_string(h.config.dim)},
          {"hidden", std::to_string(h.config.hidden)},
          {"fm_dim", std::to_string(h.config.fm_dim)},
          {"deep_widths", widths},
          {"use_deepfm", h.config.use_deepfm ? "1" : "0"},
          {"schema", fields.empty() ? "-" : fields}};
}

inline std::uint64_t save_heads(const std::filesystem::path& prefix, const FinetuneHeads& h) {
  return save_checkpoint(prefix, h.store, heads_metadata(h));
}

inline FinetuneHeads load_heads(const std::filesystem::path& prefix) {
  using namespace ckpt_detail;
  auto ck = load_checkpoint(prefix);
  if (need(ck.meta, "kind") != "heads") throw ValidationError(prefix.string() + " is not a heads checkpoint");
  FinetuneHeads h;
  h.config.dim = need_size(ck.meta, "dim");
  h.config.hidden = need_size(ck.meta, "hidden");
  h.config.fm_dim = need_size(ck.meta, "fm_dim");
  h.config.use_deepfm = need(ck.meta, "use_deepfm") == "1";
  h.config.deep_widths.clear();
  for (auto w : io_detail::split(need(ck.meta, "deep_widths"), ',')) h.config.deep_widths.push_back(std::stoull(std::string(w)));
  const std::string& schema = need(ck.meta, "schema");
  if (schema != "-") {
    for (auto part : io_detail::split(schema, ',')) {
      auto kv = io_detail::split(part, ':');
      if (kv.size() != 3) throw ValidationError("bad schema entry in heads checkpoint");
      h.config.schema.fields.push_back({std::stoull(std::string(kv[0])), kv[1] == "user" ? Side::user : Side::item,
                                        std::stoull(std::string(kv[2]))});
    }
  }
  h.store = std::move(ck.store);
  return h;
}

}  // namespace peace
