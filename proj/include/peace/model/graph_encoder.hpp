#pragma once

#include <memory>
#include <string>

#include "peace/model/model.hpp"

namespace peace {

enum class Activation { identity, elu };

/// Projection [d_in x d_out] and the two halves of the attention vector,
/// each [d_out x 1]: `att_dst` scores the aggregating node, `att_src` the
/// neighbor.
struct GatLayerParams {
  Parameter* weight = nullptr;
  Parameter* att_dst = nullptr;
  Parameter* att_src = nullptr;
  double leaky_slope = 0.2;

  static GatLayerParams from(ParamStore& s, const std::string& prefix, double slope) {
    return {&s[prefix + ".weight"], &s[prefix + ".att_dst"], &s[prefix + ".att_src"], slope};
  }
};

/// One single-head graph-attention layer. `adj` must contain a self-loop
/// on every node.
inline Var gat_layer(Graph& g, Var x, const GatLayerParams& p, std::shared_ptr<const Adjacency> adj,
                     Activation act) {
  Var z = ad::matmul(g, x, g.param(*p.weight));
  Var dst = ad::matmul(g, z, g.param(*p.att_dst));
  Var src = ad::matmul(g, z, g.param(*p.att_src));
  Var out = ad::neighborhood_attention(g, z, dst, src, std::move(adj), p.leaky_slope);
  return act == Activation::elu ? ad::elu(g, out) : out;
}

/// Attention weights of a layer for inspection, aligned with adj.neighbors.
inline std::vector<double> gat_attention_weights(const Tensor& x, const GatLayerParams& p, const Adjacency& adj) {
  Graph g;
  Var z = ad::matmul(g, g.constant(x), g.constant(p.weight->value));
  Var dst = ad::matmul(g, z, g.constant(p.att_dst->value));
  Var src = ad::matmul(g, z, g.constant(p.att_src->value));
  return ad::neighborhood_attention_weights(g.value(dst), g.value(src), adj, p.leaky_slope);
}

/// Entity embeddings H^G [|E| x d]: two stacked attention layers with ELU in
/// between, or the learned lookup table when the graph is ablated.
inline Var encode_entities(Graph& g, const EntityGraph& graph, ModelParams& model,
                           std::shared_ptr<const Adjacency> adj) {
  if (graph.features.cols() != kFeatureDim) {
    throw ValidationError("encode_entities: feature dimension must be 32, got " +
                          std::to_string(graph.features.cols()));
  }
  if (!model.config.use_graph) return g.param(model["entity_table"]);
  const double slope = model.config.leaky_slope;
  Var x = g.constant(graph.features);
  Var h = gat_layer(g, x, GatLayerParams::from(model.store, "gat1", slope), adj, Activation::elu);
  return gat_layer(g, h, GatLayerParams::from(model.store, "gat2", slope), std::move(adj), Activation::identity);
}

inline Tensor encode_entities(const EntityGraph& graph, ModelParams& model) {
  Graph g;
  auto adj = std::make_shared<const Adjacency>(graph.adjacency());
  return g.value(encode_entities(g, graph, model, adj));
}

}  // namespace peace
