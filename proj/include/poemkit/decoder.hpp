#pragma once

// Point-embedded transformer decoder: learnable query embeddings on a fixed
// template, then L layers of self-attention, query/basis cross-attention,
// kNN vector attention and a coordinate-update FFN. Pre-norm residuals; the
// FFN's last layer starts at zero, so an untrained model returns the template
// placed at the root.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poemkit/convert.hpp"
#include "poemkit/errors.hpp"
#include "poemkit/fitting.hpp"
#include "poemkit/geometry.hpp"
#include "poemkit/hand.hpp"
#include "poemkit/mutation.hpp"
#include "poemkit/nn.hpp"
#include "poemkit/tensor.hpp"

namespace poemkit {

struct ModelConfig {
  int d = 32;
  int layers = 2;
  int k = 8;
  int heads = 4;
  int basis_points = 256;
  int n_vertices = 77;
  double diameter = 0.2;
  std::uint64_t seed = 0;
  int stride = 8;
  double pe_temperature = 10000.0;
  bool mano_head = false;
  bool deep_supervision = false;

  int queries() const { return n_vertices + kNumKeypoints; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (d <= 0 || d % 4 != 0) fail("d must be a positive multiple of 4");
    if (heads <= 0 || d % heads != 0) fail("d must be divisible by heads");
    if (layers < 0) fail("layers must be >= 0");
    if (basis_points < 1) fail("basis_points must be >= 1");
    if (k < 1 || k > basis_points) fail("k must be in [1, basis_points]");
    if (n_vertices < 1) fail("n_vertices must be >= 1");
    if (!(diameter > 0)) fail("diameter must be positive");
    if (stride < 1) fail("stride must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"d", c.d},
       {"L", c.layers},
       {"k", c.k},
       {"n_heads", c.heads},
       {"M_pts", c.basis_points},
       {"Q", c.queries()},
       {"n_vertices", c.n_vertices},
       {"diameter", c.diameter},
       {"seed", c.seed},
       {"stride", c.stride},
       {"pe_temperature", c.pe_temperature},
       {"mano_head", c.mano_head},
       {"deep_supervision", c.deep_supervision}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  c.d = j.value("d", c.d);
  c.layers = j.value("L", c.layers);
  c.k = j.value("k", c.k);
  c.heads = j.value("n_heads", c.heads);
  c.basis_points = j.value("M_pts", c.basis_points);
  c.n_vertices = j.value("n_vertices", c.n_vertices);
  if (j.contains("Q")) {
    const int q = j.at("Q").get<int>();
    if (!j.contains("n_vertices")) c.n_vertices = q - kNumKeypoints;
    if (c.queries() != q) throw ConfigError("model config: Q must equal n_vertices + 21");
  }
  c.diameter = j.value("diameter", c.diameter);
  c.seed = j.value("seed", c.seed);
  c.stride = j.value("stride", c.stride);
  c.pe_temperature = j.value("pe_temperature", c.pe_temperature);
  c.mano_head = j.value("mano_head", c.mano_head);
  c.deep_supervision = j.value("deep_supervision", c.deep_supervision);
  c.validate();
}

// ---------------------------------------------------------------------------
// Parameters

inline std::string layer_prefix(int l) { return "layer" + std::to_string(l) + "."; }

template <typename T>
void add_attention_params(BasicParamStore<T>& s, const std::string& p, std::size_t d) {
  for (const char* n : {"q", "k", "v", "o"}) s.add(p + n, {d, d}, Init::XavierUniform);
}

/// Registers every decoder parameter (query embeddings and all layers).
template <typename T>
void add_decoder_params(BasicParamStore<T>& s, const ModelConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d);
  s.add("query_emb", {static_cast<std::size_t>(cfg.queries()), d}, Init::Normal);
  for (int l = 0; l < cfg.layers; ++l) {
    const auto p = layer_prefix(l);
    add_attention_params(s, p + "self.", d);
    add_attention_params(s, p + "cross.", d);
    for (const char* n : {"alpha", "beta", "gamma", "psi"}) s.add(p + "vec." + n, {d, d}, Init::XavierUniform);
    s.add(p + "vec.xi1", {3, d}, Init::FanInUniform);
    s.add(p + "vec.xi1_b", {d}, Init::FanInUniform, 3);
    s.add(p + "vec.xi2", {d, d}, Init::FanInUniform);
    s.add(p + "vec.xi2_b", {d}, Init::FanInUniform, d);
    s.add(p + "ffn.w1", {d, d}, Init::FanInUniform);
    s.add(p + "ffn.b1", {d}, Init::FanInUniform, d);
    s.add(p + "ffn.w2", {d, 3}, Init::Zeros);
    s.add(p + "ffn.b2", {3}, Init::Zeros);
  }
  if (cfg.mano_head) {
    s.add("mano.w", {d, kNumJoints * 3 + kNumShape}, Init::Zeros);
    s.add("mano.b", {kNumJoints * 3 + kNumShape}, Init::Zeros);
  }
}

// ---------------------------------------------------------------------------
// Blocks

/// Multi-head scaled dot-product attention of queries x [Q,d] over
/// memory m [M,d]; returns the output projection [Q,d] (no residual).
template <typename T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& x, const BasicTensor<T>& m, const BasicParamStore<T>& s,
                                    const std::string& p, int heads, BasicTensor<T>* weights_out = nullptr) {
  const std::size_t Q = x.dim(0), M = m.dim(0), d = x.dim(1);
  if (m.dim(1) != d) throw ShapeError("attention: query dim " + std::to_string(d) + " vs memory " + shape_str(m.shape()));
  const auto H = static_cast<std::size_t>(heads), dh = d / H;
  auto split = [&](const BasicTensor<T>& t, std::size_t n) { return permute(reshape(t, {n, H, dh}), {1, 0, 2}); };
  const auto q = split(linear(x, s.get(p + "q")), Q);
  const auto k = split(linear(m, s.get(p + "k")), M);
  const auto v = split(linear(m, s.get(p + "v")), M);
  const auto scores = scale(matmul(q, transpose(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  const auto w = softmax(scores, -1);  // [H,Q,M]
  if (weights_out) *weights_out = w;
  const auto out = reshape(permute(matmul(w, v), {1, 0, 2}), {Q, d});
  return linear(out, s.get(p + "o"));
}

/// E' = E + MHA(LN(E), LN(E)).
template <typename T>
BasicTensor<T> self_attention(const BasicTensor<T>& e, const BasicParamStore<T>& s, const std::string& p, int heads,
                              BasicTensor<T>* weights_out = nullptr) {
  const auto n = layer_norm(e);
  return e + multi_head_attention(n, n, s, p, heads, weights_out);
}

/// E' = E + MHA(LN(E), F_P).
template <typename T>
BasicTensor<T> cross_attention(const BasicTensor<T>& e, const BasicTensor<T>& f, const BasicParamStore<T>& s,
                               const std::string& p, int heads, BasicTensor<T>* weights_out = nullptr) {
  return e + multi_head_attention(layer_norm(e), f, s, p, heads, weights_out);
}

/// k nearest basis points of each query, nearest first, ties to the lower index.
inline std::vector<std::size_t> knn(const Points3& x, const Points3& p, int k) {
  if (k < 1 || k > p.rows()) throw ConfigError("knn: k must be in [1, " + std::to_string(p.rows()) + "]");
  const auto Q = static_cast<std::size_t>(x.rows()), M = static_cast<std::size_t>(p.rows()), K = static_cast<std::size_t>(k);
  std::vector<std::size_t> out(Q * K);
  std::vector<std::pair<double, std::size_t>> dist(M);
  for (std::size_t i = 0; i < Q; ++i) {
    for (std::size_t j = 0; j < M; ++j)
      dist[j] = {(x.row(static_cast<Eigen::Index>(i)) - p.row(static_cast<Eigen::Index>(j))).squaredNorm(), j};
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(K), dist.end());
    for (std::size_t r = 0; r < K; ++r) out[i * K + r] = dist[r].second;
  }
  return out;
}

/// Per query i over its neighbours S_i: w = softmax_j(gamma(alpha(E_i) -
/// beta(F_j) + delta_ij)) per channel, out_i = sum_j w (psi(F_j) + delta_ij),
/// delta_ij = xi(X_i - P_j). Returns E + out with E normalized on the way in.
/// Coordinates are root-relative; `idx` is the [Q,k] neighbour table.
template <typename T>
BasicTensor<T> vector_attention(const BasicTensor<T>& e, const BasicTensor<T>& x_rel, const BasicTensor<T>& p_rel,
                                const BasicTensor<T>& f, std::span<const std::size_t> idx, int k,
                                const BasicParamStore<T>& s, const std::string& p,
                                BasicTensor<T>* weights_out = nullptr) {
  const std::size_t Q = e.dim(0), d = e.dim(1), K = static_cast<std::size_t>(k);
  if (idx.size() != Q * K) throw ShapeError("vector_attention: neighbour table does not match [Q,k]");
  if (f.dim(1) != d) throw ShapeError("vector_attention: basis features " + shape_str(f.shape()) + " vs d=" + std::to_string(d));
  const auto fj = gather(f, idx, {Q, K});                                        // [Q,K,d]
  const auto rel = reshape(x_rel, {Q, 1, 3}) - gather(p_rel, idx, {Q, K});       // [Q,K,3]
  const auto delta = linear(relu(linear(rel, s.get(p + "xi1"), &s.get(p + "xi1_b"))), s.get(p + "xi2"),
                            &s.get(p + "xi2_b"));                                 // [Q,K,d]
  const auto a = reshape(linear(layer_norm(e), s.get(p + "alpha")), {Q, 1, d});
  const auto logits = linear(a - linear(fj, s.get(p + "beta")) + delta, s.get(p + "gamma"));
  const auto w = softmax(logits, mutations().vector_softmax_wrong_axis ? 2 : 1);
  if (weights_out) *weights_out = w;
  return e + sum(mul(w, linear(fj, s.get(p + "psi")) + delta), 1);
}

/// X_rel' = X_rel + W2 relu(W1 LN(E) + b1) + b2; E passes through unchanged.
template <typename T>
BasicTensor<T> ffn_update(const BasicTensor<T>& e, const BasicTensor<T>& x_rel, const BasicParamStore<T>& s,
                          const std::string& p) {
  if (x_rel.shape() != Shape{e.dim(0), 3}) throw ShapeError("ffn_update: points " + shape_str(x_rel.shape()) + " vs embeddings " + shape_str(e.shape()));
  const auto h = relu(linear(layer_norm(e), s.get(p + "w1"), &s.get(p + "b1")));
  return x_rel + linear(h, s.get(p + "w2"), &s.get(p + "b2"));
}

// ---------------------------------------------------------------------------
// Forward

template <typename T>
struct BasicDecoderOutput {
  BasicTensor<T> points;                    // [Q,3] world (final layer)
  std::vector<BasicTensor<T>> layer_points;  // [Q,3] world after each layer
  BasicTensor<T> embeddings;                // final E_X
};
using DecoderOutput = BasicDecoderOutput<double>;

/// Runs the decoder from the template. `features` are the aggregated basis
/// features [M,d]; `basis_rel` the root-relative basis points; `root` R.
template <typename T>
BasicDecoderOutput<T> decoder_forward(const BasicTensor<T>& features, const Points3& basis_rel, const Vec3& root,
                                      const HandTemplate& tmpl, const ModelConfig& cfg, const BasicParamStore<T>& s) {
  const std::size_t Q = static_cast<std::size_t>(cfg.queries()), M = static_cast<std::size_t>(basis_rel.rows());
  if (tmpl.n_points() != cfg.queries()) {
    throw ShapeError("decoder: template has " + std::to_string(tmpl.n_points()) + " points, config expects Q=" + std::to_string(Q));
  }
  if (features.shape() != Shape{M, static_cast<std::size_t>(cfg.d)}) {
    throw ShapeError("decoder: basis features " + shape_str(features.shape()) + " do not match [" + std::to_string(M) +
                     "," + std::to_string(cfg.d) + "]");
  }
  if (cfg.k > static_cast<int>(M)) throw ConfigError("decoder: k exceeds the number of basis points");
  const auto memory = layer_norm(features);
  const auto p_rel = to_tensor<T>(basis_rel);
  const auto root_t = reshape(to_tensor<T>(Eigen::RowVector3d(root.transpose())), {3});
  auto x_rel = to_tensor<T>(tmpl.points());
  auto e = s.get("query_emb");
  BasicDecoderOutput<T> out;
  for (int l = 0; l < cfg.layers; ++l) {
    const auto p = layer_prefix(l);
    e = self_attention(e, s, p + "self.", cfg.heads);
    e = cross_attention(e, memory, s, p + "cross.", cfg.heads);
    const auto idx = knn(to_matrix(x_rel), basis_rel, cfg.k);
    e = vector_attention(e, x_rel, p_rel, memory, idx, cfg.k, s, p + "vec.");
    x_rel = ffn_update(e, x_rel, s, p + "ffn.");
    out.layer_points.push_back(x_rel + root_t);
  }
  out.embeddings = e;
  out.points = cfg.layers > 0 ? out.layer_points.back() : x_rel + root_t;
  return out;
}

/// Optional parametric head: mean-pooled embeddings -> (theta [16,3], beta [10]).
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> mano_head(const BasicTensor<T>& embeddings, const BasicParamStore<T>& s) {
  const auto pooled = mean(embeddings, 0, true);
  const auto params = reshape(linear(pooled, s.get("mano.w"), &s.get("mano.b")), {kNumJoints * 3 + kNumShape});
  return {reshape(slice(params, 0, 0, kNumJoints * 3), {kNumJoints, 3}), slice(params, 0, kNumJoints * 3, kNumJoints * 3 + kNumShape)};
}

}  // namespace poemkit
