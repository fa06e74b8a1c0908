#pragma once

#include <cmath>
#include <string>

#include "peace/data/dataset.hpp"
#include "peace/numerics/adam.hpp"

namespace peace {

/// Architecture hyperparameters and ablation switches.
struct ModelConfig {
  std::size_t dim = 64;          // d
  std::size_t interests = 10;    // M
  std::size_t prototypes = 900;  // n
  std::size_t mask_k = 160;      // K
  double temperature = 0.2;      // tau
  std::size_t seq_cap = 200;     // H, entities kept per source domain
  std::size_t hidden = 64;       // width of every MLP hidden layer
  double leaky_slope = 0.2;
  bool use_graph = true;         // false: "w/o GL", learned lookup table
  bool use_pea = true;           // false: "w/o PEA", plain tower
  bool kmeans_init = false;      // k-means++ warm start for prototypes

  void validate() const {
    if (dim < kFeatureDim) throw ValidationError("dim must be at least 32");
    if (interests == 0) throw ValidationError("interests (M) must be >= 1");
    if (prototypes == 0) throw ValidationError("prototypes (n) must be >= 1");
    if (mask_k == 0 || mask_k > prototypes) throw ValidationError("mask_k (K) must be in [1, n]");
    if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
    if (seq_cap == 0) throw ValidationError("seq_cap (H) must be >= 1");
    if (hidden == 0) throw ValidationError("hidden width must be >= 1");
  }
};

/// Every trainable tensor of the pre-trained backbone, addressed by name.
struct ModelParams {
  ModelConfig config;
  std::size_t entity_count = 0;
  ParamStore store;

  Parameter& operator[](const std::string& name) { return store[name]; }
  const Parameter& operator[](const std::string& name) const { return store[name]; }
};

namespace model_detail {

inline Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t = Tensor::matrix(rows, cols);
  glorot_uniform(t, rows, cols, rng);
  return t;
}

inline Tensor zeros_vec(std::size_t n) { return Tensor({n}); }

}  // namespace model_detail

/// Adds `<prefix>.l1`, `<prefix>.l2` (ReLU hidden) and `<prefix>.out`
/// (linear) layers.
inline void add_mlp(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t hidden,
                    std::size_t out, Rng& rng, bool zero_output = false) {
  using namespace model_detail;
  store.add(prefix + ".l1.weight", glorot(in, hidden, rng));
  store.add(prefix + ".l1.bias", zeros_vec(hidden));
  store.add(prefix + ".l2.weight", glorot(hidden, hidden, rng));
  store.add(prefix + ".l2.bias", zeros_vec(hidden));
  store.add(prefix + ".out.weight", zero_output ? Tensor::matrix(hidden, out) : glorot(hidden, out, rng));
  store.add(prefix + ".out.bias", zeros_vec(out));
}

inline Var mlp_forward(Graph& g, ParamStore& store, const std::string& prefix, Var x) {
  Var h = ad::relu(g, ad::linear(g, x, g.param(store[prefix + ".l1.weight"]), g.param(store[prefix + ".l1.bias"])));
  h = ad::relu(g, ad::linear(g, h, g.param(store[prefix + ".l2.weight"]), g.param(store[prefix + ".l2.bias"])));
  return ad::linear(g, h, g.param(store[prefix + ".out.weight"]), g.param(store[prefix + ".out.bias"]));
}

/// Fresh backbone parameters for a graph of `entity_count` entities.
/// `features` seeds the lookup table of the "w/o GL" ablation.
inline ModelParams init_model(const ModelConfig& cfg, const Tensor& features, Rng& rng) {
  using namespace model_detail;
  cfg.validate();
  ModelParams m;
  m.config = cfg;
  m.entity_count = features.rows();
  const std::size_t d = cfg.dim;
  auto& s = m.store;
  if (cfg.use_graph) {
    s.add("gat1.weight", glorot(kFeatureDim, d, rng));
    s.add("gat1.att_dst", glorot(d, 1, rng));
    s.add("gat1.att_src", glorot(d, 1, rng));
    s.add("gat2.weight", glorot(d, d, rng));
    s.add("gat2.att_dst", glorot(d, 1, rng));
    s.add("gat2.att_src", glorot(d, 1, rng));
  } else {
    Tensor table = Tensor::matrix(features.rows(), d);
    for (std::size_t e = 0; e < features.rows(); ++e)
      for (std::size_t k = 0; k < kFeatureDim; ++k) table.at(e, k) = features.at(e, k);
    s.add("entity_table", std::move(table));
  }
  s.add("tower.kernels", glorot(cfg.interests, d, rng));
  s.add("tower.attn", glorot(d, d, rng));
  s.add("tower.fuse_w", glorot(d, d, rng));
  s.add("tower.fuse_v", glorot(1, d, rng));
  Tensor cold = Tensor::matrix(1, d);
  gaussian_fill(cold, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  s.add("tower.cold", std::move(cold));
  add_mlp(s, "pea", d, cfg.hidden, d, rng, /*zero_output=*/true);
  Tensor protos = Tensor::matrix(cfg.prototypes, d);
  gaussian_fill(protos, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  s.add("prototypes", std::move(protos));
  add_mlp(s, "decoder", 2 * d, cfg.hidden, 1, rng);
  return m;
}

}  // namespace peace
