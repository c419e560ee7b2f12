#pragma once

// Built-in oracle suite behind `poemkit verify`: gradient checks, geometric
// round trips, aggregation and vector-attention contracts, decoder identity,
// mirror and rotation consistency. Every check is deterministic.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "poemkit/basis.hpp"
#include "poemkit/decoder.hpp"
#include "poemkit/fitting.hpp"
#include "poemkit/model.hpp"
#include "poemkit/root_stage.hpp"
#include "poemkit/synth.hpp"

namespace poemkit::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

inline Tensor randn(Rng& rng, Shape shape, double scale = 1.0) {
  std::vector<double> d(shape_numel(shape));
  for (auto& v : d) v = scale * rng.normal();
  return Tensor(std::move(shape), std::move(d));
}

inline Tensor weights(Rng& rng, const Shape& shape) { return randn(rng, shape); }

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline CheckResult bound(std::string name, double value, double limit, const std::string& what) {
  return {std::move(name), value <= limit, what + " " + num(value) + " (limit " + num(limit) + ")"};
}

inline CheckResult grad(std::string name, const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                        std::vector<Tensor> inputs, double limit = 1e-4) {
  return bound(std::move(name), gradcheck<double>(fn, inputs, 1e-6), limit, "gradient error");
}

inline ModelConfig tiny_model() {
  ModelConfig c;
  c.d = 16;
  c.layers = 1;
  c.k = 4;
  c.basis_points = 64;
  c.n_vertices = 5;
  c.seed = 17;
  return c;
}

inline const ToyHandModel& tiny_hand() {
  static const ToyHandModel m = make_toy_hand_model(5);
  return m;
}

inline FrameBundle tiny_frame(std::uint64_t seed) {
  RigOptions o;
  BackboneConfig b;
  b.channels = 16;
  b.seed = 1;
  return render_frame(make_scene(seed, rig_center(o)), make_rig(o, seed + 1), tiny_hand(), b);
}

/// A model whose zero-initialized tensors were given random values, so every
/// block is active.
inline Model frozen_model() {
  auto m = make_model(tiny_model());
  Rng rng(23);
  for (auto& e : m.params.entries())
    for (auto& v : e.value.mutable_data()) v += 0.05 * rng.normal();
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Gradient checks

inline std::vector<CheckResult> gradient_checks() {
  using detail::grad;
  using detail::randn;
  Rng rng(1);
  std::vector<CheckResult> out;

  out.push_back(grad("gradcheck.tensor_ops", [](const std::vector<Tensor>& x) {
    const auto h = layer_norm(matmul(x[0], x[1]));
    const auto s = softmax(h, -1);
    return sum(mul(s, relu(x[2]))) + mean(exp(scale(x[0], 0.1))) + sum(sqrt(shift(square(x[2]), 1.0)));
  }, {randn(rng, {3, 4}), randn(rng, {4, 5}), randn(rng, {3, 5})}));

  out.push_back(grad("gradcheck.soft_argmax", [](const std::vector<Tensor>& x) {
    const auto uv = soft_argmax(exp(x[0]), 8);
    return sum(mul(uv, Tensor({2}, {0.7, -0.3})));
  }, {randn(rng, {6, 5}, 0.5)}));

  {
    std::vector<double> c = {0.3, 0.7, 2.2, 1.4, 3.6, 0.1, 1.5, 2.9};
    out.push_back(grad("gradcheck.bilinear_sample", [](const std::vector<Tensor>& x) {
      return sum(square(bilinear_sample(x[0], x[1]).values));
    }, {randn(rng, {4, 5, 3}), Tensor({4, 2}, std::move(c))}));
  }

  {
    ViewFeatures views;
    for (int v = 0; v < 3; ++v) {
      views.features.push_back(randn(rng, {6, 8}));
      views.masks.emplace_back(6, 0);
    }
    views.masks[2][1] = 1;
    out.push_back(grad("gradcheck.aggregation", [views](const std::vector<Tensor>& x) {
      ViewFeatures v = views;
      v.features[0] = x[0];
      v.features[1] = x[1];
      return sum(square(projective_aggregation(v, x[2], x[3])));
    }, {views.features[0], views.features[1], randn(rng, {8, 4}, 0.5), randn(rng, {4, 8}, 0.5)}));
  }

  ParamStore s(3);
  add_decoder_params(s, detail::tiny_model());
  for (auto& e : s.entries())
    for (auto& v : e.value.mutable_data()) v += 0.1 * rng.normal();
  const auto e = randn(rng, {5, 16});
  const auto f = randn(rng, {12, 16});
  const auto xr = randn(rng, {5, 3}, 0.05);
  const auto pr = randn(rng, {12, 3}, 0.05);
  const auto idx = knn(to_matrix(xr), to_matrix(pr), 4);

  out.push_back(grad("gradcheck.self_attention", [&s](const std::vector<Tensor>& x) {
    return sum(square(self_attention(x[0], s, "layer0.self.", 4)));
  }, {e, s.get("layer0.self.q"), s.get("layer0.self.v")}));
  out.push_back(grad("gradcheck.cross_attention", [&s](const std::vector<Tensor>& x) {
    return sum(square(cross_attention(x[0], x[1], s, "layer0.cross.", 4)));
  }, {e, f, s.get("layer0.cross.k")}));
  out.push_back(grad("gradcheck.vector_attention", [&s, idx](const std::vector<Tensor>& x) {
    return sum(square(vector_attention(x[0], x[1], x[2], x[3], idx, 4, s, "layer0.vec.")));
  }, {e, xr, pr, f, s.get("layer0.vec.gamma"), s.get("layer0.vec.xi1")}));
  out.push_back(grad("gradcheck.ffn", [&s](const std::vector<Tensor>& x) {
    return sum(square(ffn_update(x[0], x[1], s, "layer0.ffn.")));
  }, {e, xr, s.get("layer0.ffn.w1"), s.get("layer0.ffn.w2")}));

  const auto& hand = detail::tiny_hand();
  out.push_back(grad("gradcheck.lbs", [&hand](const std::vector<Tensor>& x) {
    const auto o = lbs_forward(hand, x[0], x[1], x[2]);
    return sum(square(o.keypoints)) + sum(square(o.vertices));
  }, {randn(rng, {16, 3}, 0.3), randn(rng, {10}, 0.5), Tensor({3}, {0.01, -0.02, 0.6})}));

  {
    RigOptions o;
    const auto rig = make_rig(o, 2);
    const auto mesh = pose_hand(hand, sample_pose(rng, rig_center(o)));
    std::vector<KeypointView> views;
    for (const auto& c : rig.cameras) {
      Points2 px = project(mesh.keypoints, c).pixels;
      for (Eigen::Index i = 0; i < px.rows(); ++i) px.row(i) += Eigen::RowVector2d(rng.normal(), rng.normal());
      views.push_back({c, px, {}});
    }
    const auto limits = hand.limits;
    out.push_back(grad("gradcheck.losses", [views, limits](const std::vector<Tensor>& x) {
      return loss_2d(x[0], views) + loss_kin(x[1], limits);
    }, {to_tensor(mesh.keypoints), randn(rng, {16, 3}, 1.0)}));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contracts

inline CheckResult triangulation_round_trip(int trials = 100) {
  Rng rng(2);
  double worst = 0;
  for (int t = 0; t < trials; ++t) {
    RigOptions o;
    o.views = 2 + static_cast<int>(rng.below(7));
    const auto rig = make_rig(o, rng.next_u64());
    const Vec3 x = rig_center(o) + Vec3(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1));
    std::vector<Observation> obs;
    for (const auto& c : rig.cameras) obs.push_back({project_point(x, c), c});
    worst = std::max(worst, (triangulate_dlt(obs).point - x).norm());
  }
  return detail::bound("triangulation.round_trip", worst, 1e-8, "max error (m)");
}

inline std::vector<CheckResult> aggregation_checks() {
  Rng rng(3);
  std::vector<CheckResult> out;
  const auto theta = detail::randn(rng, {8, 4}, 0.5), phi = detail::randn(rng, {4, 8}, 0.5);
  ViewFeatures one;
  one.features.push_back(detail::randn(rng, {10, 8}));
  one.masks.emplace_back(10, 0);
  {
    const auto r = projective_aggregation(one, theta, phi);
    bool same = r.shape() == one.features[0].shape();
    for (std::size_t i = 0; same && i < r.numel(); ++i) same = r.data()[i] == one.features[0].data()[i];
    out.push_back({"aggregation.single_view_shortcut", same, same ? "bit-identical" : "output differs from the only view"});
  }
  {
    ViewFeatures many = one;
    for (int v = 0; v < 4; ++v) {
      many.features.push_back(detail::randn(rng, {10, 8}));
      many.masks.emplace_back(10, 0);
    }
    const auto a = projective_aggregation(many, theta, phi);
    ViewFeatures perm = many;
    std::swap(perm.features[1], perm.features[4]);
    std::swap(perm.features[2], perm.features[3]);
    const auto b = projective_aggregation(perm, theta, phi);
    double worst = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    out.push_back(detail::bound("aggregation.source_permutation", worst, 1e-12, "max difference"));
  }
  {
    ViewFeatures zeros = one;
    for (int v = 0; v < 3; ++v) {
      zeros.features.push_back(Tensor::zeros({10, 8}));
      zeros.masks.emplace_back(10, 0);
    }
    const auto r = projective_aggregation(zeros, theta, phi);
    double worst = 0;
    for (std::size_t i = 0; i < r.numel(); ++i) worst = std::max(worst, std::abs(r.data()[i] - one.features[0].data()[i]));
    out.push_back(detail::bound("aggregation.zero_source_identity", worst, 0.0, "max difference"));
  }
  return out;
}

inline std::vector<CheckResult> vector_attention_checks() {
  Rng rng(4);
  std::vector<CheckResult> out;
  ParamStore s(5);
  auto cfg = detail::tiny_model();
  add_decoder_params(s, cfg);
  const auto e = detail::randn(rng, {5, 16});
  const auto xr = detail::randn(rng, {5, 3}, 0.05);
  auto pr = detail::randn(rng, {20, 3}, 0.05);
  auto f = detail::randn(rng, {20, 16});
  const auto idx = knn(to_matrix(xr), to_matrix(pr), 4);
  Tensor w;
  const auto base = vector_attention(e, xr, pr, f, idx, 4, s, "layer0.vec.", &w);
  {
    double worst = 0;
    for (double v : sum(w, 1).data()) worst = std::max(worst, std::abs(v - 1.0));
    out.push_back(detail::bound("vector_attention.weight_sum", worst, 1e-12, "max |sum - 1|"));
  }
  {
    std::vector<bool> used(20, false);
    for (auto j : idx) used[j] = true;
    auto fd = f.mutable_data();
    auto pd = pr.mutable_data();
    for (std::size_t j = 0; j < 20; ++j) {
      if (used[j]) continue;
      for (std::size_t c = 0; c < 16; ++c) fd[j * 16 + c] += 50.0;
      for (std::size_t a = 0; a < 3; ++a) pd[j * 3 + a] -= 1.0;
    }
    const auto moved = vector_attention(e, xr, pr, f, idx, 4, s, "layer0.vec.");
    double worst = 0;
    for (std::size_t i = 0; i < base.numel(); ++i) worst = std::max(worst, std::abs(base.data()[i] - moved.data()[i]));
    out.push_back(detail::bound("vector_attention.locality", worst, 0.0, "output change"));
  }
  {
    const auto idx1 = knn(to_matrix(xr), to_matrix(pr), 1);
    const auto r = vector_attention(e, xr, pr, f, idx1, 1, s, "layer0.vec.");
    const auto nn = gather(f, idx1, {5});
    const auto rel = xr - gather(pr, idx1, {5});
    const auto delta = linear(relu(linear(rel, s.get("layer0.vec.xi1"), &s.get("layer0.vec.xi1_b"))), s.get("layer0.vec.xi2"),
                              &s.get("layer0.vec.xi2_b"));
    const auto expect = e + linear(nn, s.get("layer0.vec.psi")) + delta;
    double worst = 0;
    for (std::size_t i = 0; i < r.numel(); ++i) worst = std::max(worst, std::abs(r.data()[i] - expect.data()[i]));
    out.push_back(detail::bound("vector_attention.k1_closed_form", worst, 1e-12, "max difference"));
  }
  return out;
}

inline CheckResult decoder_identity() {
  const auto m = make_model(detail::tiny_model());
  double worst = 0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto f = detail::tiny_frame(s);
    const auto p = reconstruct(m, f);
    const Points3 expect = m.tmpl.points().rowwise() + p.root.transpose();
    worst = std::max(worst, (p.points - expect).cwiseAbs().maxCoeff());
  }
  return detail::bound("decoder.identity_at_init", worst, 0.0, "max deviation from template + root");
}

inline CheckResult mirror_consistency(int frames = 5) {
  const auto m = detail::frozen_model();
  double worst = 0;
  for (int i = 0; i < frames; ++i) {
    const auto f = detail::tiny_frame(100 + static_cast<std::uint64_t>(i));
    const auto direct = reconstruct(m, f);
    const auto via = reconstruct_mirrored(m, mirror_frame(f));
    worst = std::max(worst, (mirror_points(via.points) - direct.points).cwiseAbs().maxCoeff());
  }
  return detail::bound("mirror.consistency", worst, 1e-9, "max difference (m)");
}

inline CheckResult rotation_commutation(int frames = 5) {
  double worst = 0;
  BackboneConfig b;
  b.channels = 16;
  b.seed = 1;
  for (int i = 0; i < frames; ++i) {
    const auto f = detail::tiny_frame(200 + static_cast<std::uint64_t>(i));
    const Vec3 r0 = estimate_root(f.heatmaps, f.rig).root;
    for (int k = 1; k < 4; ++k) {
      const auto v = static_cast<std::size_t>((i + k) % static_cast<int>(f.views()));
      const auto g = rotate_view_quarter(f, v, k);
      const auto direct = synth_backbone(f.gt_points, f.gt_root, g.rig.cameras[v], b);
      const auto a = direct.features.grid.data(), c = g.features[v].grid.data();
      for (std::size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::abs(a[j] - c[j]));
      worst = std::max(worst, (estimate_root(g.heatmaps, g.rig).root - r0).norm());
    }
  }
  return detail::bound("rotation.commutation", worst, 1e-9, "max difference");
}

/// Everything, in a fixed order.
inline std::vector<CheckResult> run_all() {
  std::vector<CheckResult> out = gradient_checks();
  out.push_back(triangulation_round_trip());
  for (auto& c : aggregation_checks()) out.push_back(std::move(c));
  for (auto& c : vector_attention_checks()) out.push_back(std::move(c));
  out.push_back(decoder_identity());
  out.push_back(mirror_consistency());
  out.push_back(rotation_commutation());
  return out;
}

}  // namespace poemkit::verify
