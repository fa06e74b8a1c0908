#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "peace/model/model.hpp"

namespace peace {

/// Normalized similarity of one embedding to every prototype row:
/// softmax(P h).
inline std::vector<double> similarity(std::span<const double> h, const Tensor& prototypes) {
  if (h.size() != prototypes.cols()) {
    throw ValidationError("similarity: embedding dim " + std::to_string(h.size()) + " != prototype dim " +
                          std::to_string(prototypes.cols()));
  }
  std::vector<double> logits(prototypes.rows());
  for (std::size_t i = 0; i < prototypes.rows(); ++i) logits[i] = dot(prototypes.row(i), h);
  return softmax(logits);
}

/// Prototype-level view P^T s.
inline std::vector<double> prototype_view(std::span<const double> s, const Tensor& prototypes) {
  if (s.size() != prototypes.rows()) throw ValidationError("prototype_view: similarity length mismatch");
  std::vector<double> out(prototypes.cols(), 0.0);
  for (std::size_t i = 0; i < prototypes.rows(); ++i)
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += s[i] * prototypes.at(i, k);
  return out;
}

/// Batched similarity S = softmax_rows(H P^T), H [B x d], P [n x d].
inline Var similarity(Graph& g, Var h, Var prototypes) {
  return ad::softmax_rows(g, ad::matmul_nt(g, h, prototypes));
}

/// Batched prototype-level views S P.
inline Var prototype_view(Graph& g, Var s, Var prototypes) { return ad::matmul(g, s, prototypes); }

/// Keeps the prototypes whose similarity reaches the K-th largest value;
/// everything else is -inf. Ties at the threshold are all kept.
inline std::vector<double> topk_mask(std::span<const double> s, std::size_t k) {
  if (k == 0 || k > s.size()) {
    throw ValidationError("topk_mask: K=" + std::to_string(k) + " outside [1, " + std::to_string(s.size()) + "]");
  }
  std::vector<double> sorted(s.begin(), s.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end(),
                   std::greater<>());
  const double threshold = sorted[k - 1];
  std::vector<double> mask(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) mask[i] = s[i] >= threshold ? 0.0 : kNegInf;
  return mask;
}

/// Chooses which in-batch entities serve as negatives for an anchor.
/// Returning false for `candidate` excludes it; the positive pair is always
/// kept in the denominator.
struct NegativePolicy {
  std::function<bool(std::size_t anchor, std::size_t candidate)> include;

  static NegativePolicy in_batch() { return {}; }

  /// Negatives are only the in-batch entities whose nearest prototype
  /// differs from the anchor's; `owner[i]` is that prototype for row i.
  static NegativePolicy cross_prototype(std::vector<std::size_t> owner) {
    return {[owner = std::move(owner)](std::size_t a, std::size_t c) { return owner.at(a) != owner.at(c); }};
  }
};

enum class NegativeSampling { in_batch, cross_prototype };

/// argmax_i s_i for the similarity vector of `h`.
inline std::size_t nearest_prototype(std::span<const double> h, const Tensor& prototypes) {
  auto s = similarity(h, prototypes);
  return static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
}

/// Symmetric InfoNCE between entity embeddings H [B x d] and their
/// prototype-level views Hv [B x d], cosine similarity over temperature.
/// Mean over the batch of the two directional -log terms per entity.
inline Var contrastive_loss(Graph& g, Var h, Var views, double temperature,
                            const NegativePolicy& policy = NegativePolicy::in_batch()) {
  const std::size_t b = g.value(h).rows();
  if (b < 2) throw ValidationError("contrastive_loss: no negatives available (batch of " + std::to_string(b) + ")");
  if (g.value(views).rows() != b) throw ValidationError("contrastive_loss: view count mismatch");
  if (!(temperature > 0.0)) throw ValidationError("contrastive_loss: temperature must be positive");
  Var hn = ad::normalize_rows(g, h);
  Var vn = ad::normalize_rows(g, views);
  Var logits = ad::scale(g, ad::matmul_nt(g, hn, vn), 1.0 / temperature);  // [e, e'] = delta(h_e, v_e')
  Var logits_t = ad::transpose(g, logits);                                     // [e, e'] = delta(v_e, h_e')
  std::vector<std::size_t> diag(b);
  std::iota(diag.begin(), diag.end(), 0);
  Tensor mask = Tensor::matrix(b, b);
  if (policy.include) {
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j)
        if (i != j && !policy.include(i, j)) mask.at(i, j) = kNegInf;
  }
  Var forward = ad::nll_rows(g, logits, &mask, diag);
  Var backward = ad::nll_rows(g, logits_t, &mask, diag);
  return ad::scale(g, ad::add(g, ad::sum(g, forward), ad::sum(g, backward)), 1.0 / static_cast<double>(b));
}

struct PrototypeAssignment {
  std::size_t entity = 0;
  std::size_t prototype = 0;
  double similarity = 0.0;
};

/// Argmax prototype of every embedding row.
inline std::vector<PrototypeAssignment> prototype_assignments(const Tensor& embeddings, const Tensor& prototypes) {
  std::vector<PrototypeAssignment> out;
  out.reserve(embeddings.rows());
  for (std::size_t e = 0; e < embeddings.rows(); ++e) {
    auto s = similarity(embeddings.row(e), prototypes);
    auto best = std::max_element(s.begin(), s.end());
    out.push_back({e, static_cast<std::size_t>(best - s.begin()), *best});
  }
  return out;
}

/// Majority-vote accuracy of a clustering against reference labels.
inline double assignment_purity(const std::vector<PrototypeAssignment>& assignment,
                                const std::vector<std::size_t>& truth) {
  if (assignment.empty()) return 0.0;
  std::map<std::size_t, std::map<std::size_t, std::size_t>> counts;
  for (const auto& a : assignment) ++counts[a.prototype][truth.at(a.entity)];
  std::size_t majority = 0;
  for (const auto& [p, by_topic] : counts) {
    std::size_t best = 0;
    for (const auto& [t, c] : by_topic) best = std::max(best, c);
    majority += best;
  }
  return static_cast<double>(majority) / static_cast<double>(assignment.size());
}

/// k-means++ seeding followed by Lloyd iterations over `points` rows; used
/// as an optional prototype warm start.
inline Tensor kmeans_plus_plus(const Tensor& points, std::size_t k, Rng& rng, std::size_t iterations = 10) {
  const std::size_t n = points.rows(), d = points.cols();
  if (k == 0 || n == 0) throw ValidationError("kmeans: need points and k >= 1");
  auto dist2 = [&](std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
  };
  Tensor centers = Tensor::matrix(k, d);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::size_t first = rng() % n;
  std::copy(points.row(first).begin(), points.row(first).end(), centers.row(0).begin());
  for (std::size_t c = 1; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) best[i] = std::min(best[i], dist2(points.row(i), centers.row(c - 1)));
    double total = std::accumulate(best.begin(), best.end(), 0.0);
    std::size_t pick = rng() % n;
    if (total > 0.0) {
      std::discrete_distribution<std::size_t> dd(best.begin(), best.end());
      pick = dd(rng);
    }
    std::copy(points.row(pick).begin(), points.row(pick).end(), centers.row(c).begin());
  }
  std::vector<std::size_t> label(n);
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        double v = dist2(points.row(i), centers.row(c));
        if (v < bd) {
          bd = v;
          label[i] = c;
        }
      }
    }
    Tensor sums = Tensor::matrix(k, d);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[label[i]];
      for (std::size_t j = 0; j < d; ++j) sums.at(label[i], j) += points.at(i, j);
    }
    for (std::size_t c = 0; c < k; ++c)
      if (count[c] > 0)
        for (std::size_t j = 0; j < d; ++j) centers.at(c, j) = sums.at(c, j) / static_cast<double>(count[c]);
  }
  return centers;
}

}  // namespace peace
