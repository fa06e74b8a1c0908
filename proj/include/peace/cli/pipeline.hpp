#pragma once

#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>

#include "peace/cli/config.hpp"

namespace peace {

namespace pipeline_detail {

inline std::ofstream open_text(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw RuntimeError("cannot write " + p.string());
  return out;
}

inline std::size_t target_domain(const ExperimentConfig& c, const DatasetBundle& b) {
  auto targets = b.target_domains();
  if (targets.empty()) throw ValidationError("bundle has no target domain");
  if (!c.has_target_domain) return targets.front();
  if (std::find(targets.begin(), targets.end(), c.target_domain) == targets.end()) {
    throw ValidationError("domain " + std::to_string(c.target_domain) + " is not a target domain");
  }
  return c.target_domain;
}

inline DatasetBundle training_bundle(const ExperimentConfig& c) {
  return load_bundle(c.data_dir).without_truth();
}

}  // namespace pipeline_detail

inline Scorer zeroshot_scorer(const EmbeddingStore& store, const DatasetBundle& bundle) {
  return [&store, &bundle](std::size_t user, const std::vector<std::size_t>& items) {
    const auto& zu = store.user(user);
    std::vector<double> out;
    out.reserve(items.size());
    for (auto i : items) out.push_back(zeroshot_score(zu, item_embedding(i, bundle.item_entities, store)));
    return out;
  };
}

inline Scorer finetune_scorer(FinetuneHeads& heads, const EmbeddingStore& store, const DatasetBundle& bundle) {
  return [&heads, &store, &bundle](std::size_t user, const std::vector<std::size_t>& items) {
    return score_items(heads, store, bundle, user, items);
  };
}

inline void cmd_gen_data(const ExperimentConfig& c, std::ostream& out) {
  c.validate();
  auto bundle = generate_synthetic(c.gen, c.seed);
  save_bundle(bundle, c.data_dir);
  out << "wrote bundle to " << c.data_dir.string() << " (" << bundle.graph.entity_count << " entities, "
      << bundle.user_count() << " users)\n";
}

/// Pre-trains the backbone, writes the checkpoint, the epoch log and the
/// entity-to-prototype assignment table (`entity<TAB>prototype<TAB>similarity`).
inline void cmd_pretrain(const ExperimentConfig& c, std::ostream& out) {
  c.validate();
  auto bundle = pipeline_detail::training_bundle(c);
  PretrainConfig pc = c.pretrain;
  pc.seed = c.seed;
  auto log = pipeline_detail::open_text(c.log);
  auto result = pretrain(bundle, c.model, pc, [&](const EpochLog& e) {
    log << format_log_line(e) << '\n';
    out << format_log_line(e) << '\n';
  });
  save_model(c.checkpoint, result.model);
  auto table = pipeline_detail::open_text(c.assignments);
  for (const auto& a :
       prototype_assignments(encode_entities(bundle.graph, result.model), result.model["prototypes"].value)) {
    table << a.entity << '\t' << a.prototype << '\t' << io_detail::format_double(a.similarity) << '\n';
  }
}

inline void cmd_infer(const ExperimentConfig& c, std::ostream& out) {
  c.validate();
  auto bundle = pipeline_detail::training_bundle(c);
  std::uint64_t hash = 0;
  auto model = load_model(c.checkpoint, &hash);
  auto store = infer_embeddings(model, bundle);
  store.model_hash = hash;
  auto path = publish_snapshot(store, c.store_dir);
  out << "published " << path.string() << " (" << store.users.size() << " users, " << store.entities.size()
      << " entities)\n";
}

/// Top-`ranking_depth` target items per target-domain user by inner product.
/// Reads no labels. Output lines: `user<TAB>rank<TAB>item<TAB>score`.
inline void cmd_zeroshot(const ExperimentConfig& c, std::ostream& out) {
  c.validate();
  auto bundle = pipeline_detail::training_bundle(c);
  const std::size_t domain = pipeline_detail::target_domain(c, bundle);
  auto store = read_store(latest_snapshot(c.store_dir));
  auto catalog = bundle.catalog(domain);
  std::set<std::size_t> users;
  for (const auto& r : bundle.records(domain)) users.insert(r.user);
  auto scorer = zeroshot_scorer(store, bundle);
  auto file = pipeline_detail::open_text(c.rankings);
  for (auto u : users) {
    auto scores = scorer(u, catalog);
    std::vector<std::size_t> order(catalog.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    for (std::size_t r = 0; r < std::min(c.ranking_depth, order.size()); ++r) {
      file << u << '\t' << r + 1 << '\t' << catalog[order[r]] << '\t' << io_detail::format_double(scores[order[r]])
           << '\n';
    }
  }
  out << "ranked " << catalog.size() << " items for " << users.size() << " users of domain " << domain << '\n';
}

/// Trains the scoring heads on the chronological train split of the target
/// domain, with embeddings from the latest snapshot.
inline void cmd_finetune(const ExperimentConfig& c, std::ostream& out) {
  c.validate();
  auto bundle = pipeline_detail::training_bundle(c);
  const std::size_t domain = pipeline_detail::target_domain(c, bundle);
  auto store = read_store(latest_snapshot(c.store_dir));
  FinetuneConfig fc = c.finetune;
  fc.target_domain = domain;
  fc.seed = c.seed;
  auto split = chronological_split(bundle.records(domain));
  auto result = finetune(split.train, store, bundle, fc);
  save_heads(c.heads, result.heads);
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
    out << "finetune epoch " << e + 1 << '\t' << io_detail::format_double(result.epoch_loss[e]) << '\n';
  }
}

/// Metric lines for the selected protocols; also written to `metrics`.
inline std::vector<MetricRow> cmd_eval(const ExperimentConfig& c, std::ostream& out) {
  c.validate();
  auto bundle = pipeline_detail::training_bundle(c);
  const std::size_t domain = pipeline_detail::target_domain(c, bundle);
  auto store = read_store(latest_snapshot(c.store_dir));
  std::vector<MetricRow> rows;
  if (c.protocol != "zeroshot") {
    auto heads = load_heads(c.heads);
    if (heads.config.dim != store.dim) throw ValidationError("heads and snapshot disagree on dim");
    rows.push_back(evaluate(bundle, domain, Protocol::normal, finetune_scorer(heads, store, bundle)));
  }
  if (c.protocol != "normal") rows.push_back(evaluate(bundle, domain, Protocol::zero_shot, zeroshot_scorer(store, bundle)));
  auto file = pipeline_detail::open_text(c.metrics);
  for (const auto& r : rows) {
    file << format_metric_line(r) << '\n';
    out << format_metric_line(r) << '\n';
  }
  return rows;
}

}  // namespace peace
