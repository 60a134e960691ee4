#pragma once

#include <cstddef>
#include <string>

#include "mnmef/autodiff.hpp"
#include "mnmef/nn.hpp"

namespace mnmef {

struct SetTransformerConfig {
  std::size_t input_dim = 0;
  std::size_t width = 64;      // latent width of every block
  std::size_t heads = 8;
  std::size_t seed_len = 16;   // rows of the pooling seed
  std::size_t output_dim = 64;
  Activation activation = Activation::kRelu;
  double ln_eps = 1e-5;
};

/// Query/key/value projections (no bias) and the output projection W^O.
struct AttentionParams {
  std::size_t wq = 0, wk = 0, wv = 0, wo = 0;
  std::size_t heads = 8;
};

/// Cross-attention block: u1 = LN2(u + A(u, w)), out = LN1(u1 + FFN(u1)).
struct CabParams {
  AttentionParams attention;
  LinearLayer ffn1, ffn2;
  LayerNormParams ln1, ln2;
};

struct SetTransformer {
  SetTransformerConfig cfg;
  Mlp f_in;
  CabParams sab1, sab2;
  CabParams pma;
  std::size_t seed = 0;
  CabParams sab3, sab4;
  Mlp f_out;
};

inline AttentionParams make_attention(ParamStore& ps, const std::string& name, std::size_t width,
                                      std::size_t heads, RngStream& rng) {
  require(width % heads == 0, ErrorKind::kPrecondition, "latent width must split evenly over heads");
  const Partition p = Partition::kSetTransformer;
  AttentionParams a;
  a.heads = heads;
  a.wq = ps.add(name + ".wq", p, kaiming_uniform(width, width, rng));
  a.wk = ps.add(name + ".wk", p, kaiming_uniform(width, width, rng));
  a.wv = ps.add(name + ".wv", p, kaiming_uniform(width, width, rng));
  a.wo = ps.add(name + ".wo", p, kaiming_uniform(width, width, rng));
  return a;
}

inline CabParams make_cab(ParamStore& ps, const std::string& name, std::size_t width, std::size_t heads,
                          RngStream& rng) {
  const Partition p = Partition::kSetTransformer;
  CabParams c;
  c.attention = make_attention(ps, name + ".att", width, heads, rng);
  c.ffn1 = make_linear(ps, name + ".ffn1", p, width, width, rng);
  c.ffn2 = make_linear(ps, name + ".ffn2", p, width, width, rng);
  c.ln1 = make_layer_norm(ps, name + ".ln1", p, width);
  c.ln2 = make_layer_norm(ps, name + ".ln2", p, width);
  return c;
}

inline SetTransformer make_set_transformer(ParamStore& ps, const SetTransformerConfig& cfg, RngStream& rng) {
  require(cfg.input_dim > 0, ErrorKind::kPrecondition, "set transformer input dimension");
  const Partition p = Partition::kSetTransformer;
  SetTransformer st;
  st.cfg = cfg;
  st.f_in = make_mlp(ps, "st.in", p, {cfg.input_dim, cfg.width, cfg.width}, cfg.activation, rng);
  st.sab1 = make_cab(ps, "st.sab1", cfg.width, cfg.heads, rng);
  st.sab2 = make_cab(ps, "st.sab2", cfg.width, cfg.heads, rng);
  st.pma = make_cab(ps, "st.pma", cfg.width, cfg.heads, rng);
  Matrix seed(cfg.seed_len, cfg.width);
  for (double& v : seed.data()) v = 0.1 * rng.normal();
  st.seed = ps.add("st.pma.seed", p, std::move(seed));
  st.sab3 = make_cab(ps, "st.sab3", cfg.width, cfg.heads, rng);
  st.sab4 = make_cab(ps, "st.sab4", cfg.width, cfg.heads, rng);
  st.f_out = make_mlp(ps, "st.out", p, {cfg.seed_len * cfg.width, cfg.width, cfg.output_dim}, cfg.activation, rng);
  return st;
}

/// Multihead attention of queries u (n x d) over keys/values w (m x d).
inline ad::Tensor attention(ParamBinder& pb, const AttentionParams& a, ad::Tensor u, ad::Tensor w) {
  const ad::Tensor q = ad::matmul(u, pb(a.wq));
  const ad::Tensor k = ad::matmul(w, pb(a.wk));
  const ad::Tensor v = ad::matmul(w, pb(a.wv));
  return ad::matmul(ad::multihead_attention(q, k, v, a.heads), pb(a.wo));
}

inline ad::Tensor cab(ParamBinder& pb, const CabParams& c, ad::Tensor u, ad::Tensor w, Activation act,
                      double eps) {
  require(u.cols() == w.cols(), ErrorKind::kShapeMismatch, "cab: u and w widths differ");
  const ad::Tensor u1 = apply(pb, c.ln2, ad::add(u, attention(pb, c.attention, u, w)), eps);
  const ad::Tensor ffn = apply(pb, c.ffn2, activate(apply(pb, c.ffn1, u1), act));
  return apply(pb, c.ln1, ad::add(u1, ffn), eps);
}

inline ad::Tensor sab(ParamBinder& pb, const CabParams& c, ad::Tensor u, Activation act, double eps) {
  return cab(pb, c, u, u, act, eps);
}

/// Encodes a set of N rows (N x input_dim) into a 1 x output_dim vector that
/// does not depend on row order.
inline ad::Tensor encode_ensemble(ParamBinder& pb, const SetTransformer& st, ad::Tensor pairs) {
  const auto& c = st.cfg;
  require(pairs.rows() >= 1, ErrorKind::kShapeMismatch, "encode_ensemble needs at least one member");
  require(pairs.cols() == c.input_dim, ErrorKind::kShapeMismatch,
          "encode_ensemble expects " + std::to_string(c.input_dim) + " features, got " +
              std::to_string(pairs.cols()));
  ad::Tensor x = apply(pb, st.f_in, pairs);
  x = sab(pb, st.sab1, x, c.activation, c.ln_eps);
  x = sab(pb, st.sab2, x, c.activation, c.ln_eps);
  x = cab(pb, st.pma, pb(st.seed), x, c.activation, c.ln_eps);
  x = sab(pb, st.sab3, x, c.activation, c.ln_eps);
  x = sab(pb, st.sab4, x, c.activation, c.ln_eps);
  x = ad::reshape(x, 1, c.seed_len * c.width);
  return apply(pb, st.f_out, x);
}

}  // namespace mnmef
