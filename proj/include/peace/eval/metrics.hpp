#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "peace/data/dataset.hpp"

namespace peace {

struct SplitSpec {
  double train = 0.70;
  double valid = 0.15;
  double test = 0.15;

  void validate() const {
    if (train < 0 || valid < 0 || test < 0) throw ValidationError("split fractions must be non-negative");
    if (std::abs(train + valid + test - 1.0) > 1e-9) throw ValidationError("split fractions must sum to 1");
  }
};

struct Split {
  std::vector<InteractionRecord> train;
  std::vector<InteractionRecord> valid;
  std::vector<InteractionRecord> test;
};

/// Stable sort by timestamp, then floor(train*n) / floor(valid*n) / rest.
inline Split chronological_split(std::vector<InteractionRecord> records, const SplitSpec& spec = {}) {
  spec.validate();
  if (records.empty()) throw ValidationError("chronological_split: empty input");
  std::stable_sort(records.begin(), records.end(),
                   [](const InteractionRecord& a, const InteractionRecord& b) { return a.timestamp < b.timestamp; });
  const double n = static_cast<double>(records.size());
  // small epsilon so 0.7 * 100 lands on 70 and not 69
  const auto n_train = static_cast<std::size_t>(std::floor(spec.train * n + 1e-9));
  const auto n_valid = static_cast<std::size_t>(std::floor(spec.valid * n + 1e-9));
  Split s;
  auto it = records.begin();
  s.train.assign(it, it + static_cast<std::ptrdiff_t>(n_train));
  it += static_cast<std::ptrdiff_t>(n_train);
  s.valid.assign(it, it + static_cast<std::ptrdiff_t>(n_valid));
  it += static_cast<std::ptrdiff_t>(n_valid);
  s.test.assign(it, records.end());
  return s;
}

/// One positive against a candidate list; scores[i] belongs to candidates[i].
struct RankingCase {
  std::size_t user = 0;
  std::size_t positive = 0;
  std::vector<std::size_t> candidates;
  std::vector<double> scores;
};

/// 1-based rank of the positive under descending score; equal scores put the
/// lower item id first.
inline std::size_t positive_rank(const RankingCase& c) {
  if (c.candidates.size() != c.scores.size()) throw ValidationError("ranking case: scores and candidates differ in size");
  auto pos = std::find(c.candidates.begin(), c.candidates.end(), c.positive);
  if (pos == c.candidates.end()) throw ValidationError("ranking case: positive not among candidates");
  const double s = c.scores[static_cast<std::size_t>(pos - c.candidates.begin())];
  std::size_t rank = 1;
  for (std::size_t i = 0; i < c.candidates.size(); ++i) {
    if (c.candidates[i] == c.positive) continue;
    if (c.scores[i] > s || (c.scores[i] == s && c.candidates[i] < c.positive)) ++rank;
  }
  return rank;
}

inline double hit_at_k(const RankingCase& c, std::size_t k) { return positive_rank(c) <= k ? 1.0 : 0.0; }

inline double ndcg_at_k(const RankingCase& c, std::size_t k) {
  const std::size_t r = positive_rank(c);
  return r <= k ? 1.0 / std::log2(static_cast<double>(r) + 1.0) : 0.0;
}

struct MetricRow {
  std::size_t domain = 0;
  std::string protocol;
  double hit5 = 0, hit10 = 0, ndcg5 = 0, ndcg10 = 0;
  std::size_t cases = 0;
};

/// `domain<TAB>protocol<TAB>Hit@5<TAB>Hit@10<TAB>NDCG@5<TAB>NDCG@10`
inline std::string format_metric_line(const MetricRow& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%s\t%.4f\t%.4f\t%.4f\t%.4f", m.domain, m.protocol.c_str(), m.hit5, m.hit10,
                m.ndcg5, m.ndcg10);
  return buf;
}

enum class Protocol { normal, zero_shot };

inline std::string protocol_name(Protocol p) { return p == Protocol::normal ? "normal" : "zeroshot"; }

/// Scores for one user over a list of items.
using Scorer = std::function<std::vector<double>(std::size_t user, const std::vector<std::size_t>& items)>;

/// Ranking cases of a target domain. Normal: positives of the chronological
/// test split. Zero-shot: every positive in the domain. Candidates are the
/// domain catalog minus the user's other positives.
inline std::vector<RankingCase> ranking_cases(const DatasetBundle& bundle, std::size_t domain, Protocol protocol,
                                              const SplitSpec& spec = {}) {
  const auto& all = bundle.records(domain);
  std::map<std::size_t, std::set<std::size_t>> positives;
  for (const auto& r : all)
    if (r.label == 1) positives[r.user].insert(r.item);
  const std::vector<InteractionRecord> test = protocol == Protocol::normal ? chronological_split(all, spec).test : all;
  const auto catalog = bundle.catalog(domain);
  std::vector<RankingCase> cases;
  for (const auto& r : test) {
    if (r.label != 1) continue;
    RankingCase c;
    c.user = r.user;
    c.positive = r.item;
    const auto& known = positives[r.user];
    for (auto i : catalog)
      if (i == r.item || !known.count(i)) c.candidates.push_back(i);
    cases.push_back(std::move(c));
  }
  if (cases.empty()) throw ValidationError("evaluate: empty test set for domain " + std::to_string(domain));
  return cases;
}

/// Scores every case and averages Hit/NDCG at 5 and 10.
inline MetricRow evaluate(std::vector<RankingCase> cases, const Scorer& scorer, std::size_t domain, Protocol protocol) {
  if (cases.empty()) throw ValidationError("evaluate: empty test set");
  MetricRow m;
  m.domain = domain;
  m.protocol = protocol_name(protocol);
  for (auto& c : cases) {
    c.scores = scorer(c.user, c.candidates);
    m.hit5 += hit_at_k(c, 5);
    m.hit10 += hit_at_k(c, 10);
    m.ndcg5 += ndcg_at_k(c, 5);
    m.ndcg10 += ndcg_at_k(c, 10);
  }
  m.cases = cases.size();
  const double n = static_cast<double>(m.cases);
  m.hit5 /= n;
  m.hit10 /= n;
  m.ndcg5 /= n;
  m.ndcg10 /= n;
  return m;
}

inline MetricRow evaluate(const DatasetBundle& bundle, std::size_t domain, Protocol protocol, const Scorer& scorer,
                          const SplitSpec& spec = {}) {
  return evaluate(ranking_cases(bundle, domain, protocol, spec), scorer, domain, protocol);
}

}  // namespace peace
