#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <random>
#include <vector>

#include "peace/data/dataset.hpp"

namespace peace {

/// Knobs of the planted-topic generator. Entities belong to topics, edges
/// are denser within topics, users prefer a mixture of topics shared across
/// domains, and clicks are more likely on items of preferred topics.
struct SyntheticConfig {
  std::size_t entities = 500;
  std::size_t topics = 10;
  std::size_t relations = 4;
  double p_in = 0.1;
  double p_out = 0.004;
  double feature_noise = 0.3;
  std::size_t source_domains = 2;
  std::size_t target_domains = 1;
  std::size_t users_per_topic = 20;
  std::size_t items_per_domain = 200;
  std::size_t records_per_source = 8000;
  std::size_t records_per_target = 4000;
  /// Probability that a given entity is usable by a given domain's items.
  double domain_entity_fraction = 0.6;
  std::size_t max_behaviors = 50;
  /// Preference mass on the primary and secondary topic; the rest is spread
  /// uniformly.
  double primary_weight = 0.6;
  double secondary_weight = 0.3;
  /// Probability an exposure is drawn from the user's preference rather than
  /// uniformly over topics.
  double targeted_exposure = 0.5;
  double base_click = 0.05;
  double max_click = 0.9;
  /// Probability a topical profile field reports the true topic.
  double profile_fidelity = 0.5;
};

inline DatasetBundle generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  if (!(cfg.p_in > cfg.p_out)) throw ValidationError("no planted structure: p_in must exceed p_out");
  if (cfg.topics == 0 || cfg.entities < cfg.topics) throw ValidationError("need at least one entity per topic");
  if (cfg.source_domains == 0) throw ValidationError("need at least one source domain");
  if (cfg.users_per_topic == 0 || cfg.items_per_domain < cfg.topics) {
    throw ValidationError("need users and at least one item per topic");
  }
  if (cfg.relations == 0) throw ValidationError("need at least one relation type");

  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t T = cfg.topics;
  DatasetBundle b;

  // Balanced topic assignment over a shuffled entity order.
  std::vector<std::size_t> order(cfg.entities);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> topic(cfg.entities);
  for (std::size_t k = 0; k < cfg.entities; ++k) topic[order[k]] = k % T;
  std::vector<std::vector<std::size_t>> members(T);
  for (std::size_t e = 0; e < cfg.entities; ++e) members[topic[e]].push_back(e);

  // Features: unit topic centroid plus isotropic noise.
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<double>> centroid(T, std::vector<double>(kFeatureDim));
  for (auto& c : centroid) {
    double n = 0.0;
    for (auto& v : c) {
      v = gauss(rng);
      n += v * v;
    }
    for (auto& v : c) v /= std::sqrt(n);
  }
  b.graph.entity_count = cfg.entities;
  b.graph.relation_count = cfg.relations;
  b.graph.features = Tensor::matrix(cfg.entities, kFeatureDim);
  for (std::size_t e = 0; e < cfg.entities; ++e)
    for (std::size_t k = 0; k < kFeatureDim; ++k)
      b.graph.features.at(e, k) = centroid[topic[e]][k] + cfg.feature_noise * gauss(rng);

  std::uniform_int_distribution<std::size_t> rel(0, cfg.relations - 1);
  for (std::size_t i = 0; i < cfg.entities; ++i)
    for (std::size_t j = i + 1; j < cfg.entities; ++j) {
      const double p = topic[i] == topic[j] ? cfg.p_in : cfg.p_out;
      if (unit(rng) < p) b.graph.triplets.push_back({i, rel(rng), j});
    }

  // Domains: sources first, then targets. Each domain sees a random subset
  // of every topic's entities.
  const std::size_t D = cfg.source_domains + cfg.target_domains;
  for (std::size_t d = 0; d < D; ++d) b.domains[d] = d < cfg.source_domains ? DomainRole::source : DomainRole::target;

  std::vector<std::vector<std::vector<std::size_t>>> items_by_topic(D, std::vector<std::vector<std::size_t>>(T));
  std::vector<std::size_t> item_topic;
  std::size_t next_item = 0;
  for (std::size_t d = 0; d < D; ++d) {
    std::vector<std::vector<std::size_t>> usable(T);
    for (std::size_t t = 0; t < T; ++t) {
      for (auto e : members[t])
        if (unit(rng) < cfg.domain_entity_fraction) usable[t].push_back(e);
      if (usable[t].empty()) usable[t].push_back(members[t][rng() % members[t].size()]);
    }
    for (std::size_t k = 0; k < cfg.items_per_domain; ++k) {
      const std::size_t t = k % T;
      auto pool = usable[t];
      std::shuffle(pool.begin(), pool.end(), rng);
      std::size_t count = 1 + rng() % kMaxEntitiesPerItem;
      count = std::min(count, pool.size());
      std::vector<std::size_t> ents(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count));
      b.item_entities.entities_of[next_item] = std::move(ents);
      items_by_topic[d][t].push_back(next_item);
      item_topic.push_back(t);
      ++next_item;
    }
  }

  // Users: primary topic by block, secondary topic at random.
  const std::size_t U = cfg.users_per_topic * T;
  std::vector<std::vector<double>> pref(U, std::vector<double>(T));
  std::vector<std::size_t> primary(U);
  const double rest = (1.0 - cfg.primary_weight - cfg.secondary_weight) / static_cast<double>(T);
  for (std::size_t u = 0; u < U; ++u) {
    primary[u] = u / cfg.users_per_topic;
    std::size_t secondary = primary[u];
    if (T > 1)
      while (secondary == primary[u]) secondary = rng() % T;
    for (auto& p : pref[u]) p = rest;
    pref[u][primary[u]] += cfg.primary_weight;
    pref[u][secondary] += cfg.secondary_weight;
  }

  for (std::size_t d = 0; d < D; ++d) {
    const bool source = d < cfg.source_domains;
    const std::size_t n = source ? cfg.records_per_source : cfg.records_per_target;
    std::vector<std::deque<std::size_t>> clicked(U);
    auto& sink = source ? b.source_records[d] : b.target_records[d];
    sink.reserve(n);
    for (std::size_t t = 0; t < n; ++t) {
      InteractionRecord r;
      r.domain = d;
      r.user = rng() % U;
      std::size_t tp;
      if (unit(rng) < cfg.targeted_exposure) {
        std::discrete_distribution<std::size_t> pick(pref[r.user].begin(), pref[r.user].end());
        tp = pick(rng);
      } else {
        tp = rng() % T;
      }
      const auto& pool = items_by_topic[d][tp];
      r.item = pool[rng() % pool.size()];
      const double pmax = *std::max_element(pref[r.user].begin(), pref[r.user].end());
      const double p_click = cfg.base_click + (cfg.max_click - cfg.base_click) * pref[r.user][tp] / pmax;
      r.label = unit(rng) < p_click ? 1 : 0;
      r.behaviors.assign(clicked[r.user].begin(), clicked[r.user].end());
      r.timestamp = static_cast<std::int64_t>(t);
      if (r.label == 1) {
        clicked[r.user].push_back(r.item);
        if (clicked[r.user].size() > cfg.max_behaviors) clicked[r.user].pop_front();
      }
      sink.push_back(std::move(r));
    }
  }

  // Profiles for target domains: one noisy topical field and one noise field
  // per side.
  if (cfg.target_domains > 0) {
    b.schema.fields = {{0, Side::user, 6}, {1, Side::user, T}, {2, Side::item, T}, {3, Side::item, 5}};
    auto noisy_topic = [&](std::size_t truth) {
      return unit(rng) < cfg.profile_fidelity ? truth : static_cast<std::size_t>(rng() % T);
    };
    for (const auto& [d, recs] : b.target_records)
      for (const auto& r : recs) {
        if (!b.profiles.users.count(r.user))
          b.profiles.users[r.user] = {{0, rng() % 6}, {1, noisy_topic(primary[r.user])}};
      }
    for (std::size_t d = cfg.source_domains; d < D; ++d)
      for (std::size_t t = 0; t < T; ++t)
        for (auto item : items_by_topic[d][t]) b.profiles.items[item] = {{2, noisy_topic(t)}, {3, rng() % 5}};
  }

  b.truth = topic;
  return b;
}

}  // namespace peace
