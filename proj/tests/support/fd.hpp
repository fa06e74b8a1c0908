#pragma once

// Central finite-difference oracle for parameter gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "peace/numerics/autograd.hpp"

namespace peace::testing {

/// Builds a scalar loss on a fresh graph from the current parameter values.
using LossBuilder = std::function<Var(Graph&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t probes = 0;
};

inline double eval_loss(const LossBuilder& build) {
  Graph g;
  return g.value(build(g))[0];
}

/// Compares analytic gradients with central differences at `probes` random
/// scalar coordinates drawn across `params`. Relative error is
/// |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradients(const std::vector<Parameter*>& params, const LossBuilder& build, std::uint64_t seed,
                                 std::size_t probes = 100, double h = 1e-5, double floor = 1e-6) {
  for (auto* p : params) p->zero_grad();
  {
    Graph g;
    Var loss = build(g);
    g.backward(loss);
  }
  std::size_t total = 0;
  for (auto* p : params) total += p->value.size();
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  GradCheck out;
  for (std::size_t k = 0; k < probes; ++k) {
    std::size_t flat = pick(rng);
    Parameter* p = nullptr;
    for (auto* q : params) {
      if (flat < q->value.size()) {
        p = q;
        break;
      }
      flat -= q->value.size();
    }
    const double saved = p->value[flat];
    p->value[flat] = saved + h;
    const double up = eval_loss(build);
    p->value[flat] = saved - h;
    const double down = eval_loss(build);
    p->value[flat] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = p->grad[flat];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic - numeric) / denom);
    ++out.probes;
  }
  return out;
}

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

inline Parameter make_param(const std::string& name, Tensor value) {
  Parameter p;
  p.name = name;
  p.value = std::move(value);
  p.zero_grad();
  return p;
}

/// Fixed random weights turning any tensor into a scalar: sum(w .* x), so
/// every output coordinate carries a distinct gradient.
inline Var weighted_sum(Graph& g, Var x, std::uint64_t seed) {
  Rng rng(seed);
  const Tensor& v = g.value(x);
  Tensor w = random_tensor(v.shape(), rng);
  return ad::sum(g, ad::mul(g, x, g.constant(std::move(w))));
}

}  // namespace peace::testing
