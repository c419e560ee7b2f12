#pragma once

// Basis point set: generation, placement at the root, per-view projected
// feature sampling with a sine positional encoding, and projective
// aggregation of the views into one feature per basis point.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "poemkit/errors.hpp"
#include "poemkit/geometry.hpp"
#include "poemkit/mutation.hpp"
#include "poemkit/nn.hpp"
#include "poemkit/rng.hpp"
#include "poemkit/root_stage.hpp"
#include "poemkit/tensor.hpp"

namespace poemkit {

struct BasisPointSet {
  Points3 points;  // root-relative, metres
  std::uint64_t seed = 0;
  double diameter = 0.2;

  int size() const { return static_cast<int>(points.rows()); }
};

/// Isotropic Gaussian samples (sigma = diameter / 6) kept only when strictly
/// inside the ball of the given diameter.
inline BasisPointSet generate_bps(int count, double diameter, std::uint64_t seed) {
  if (count < 1) throw ConfigError("generate_bps: count must be >= 1");
  if (!(diameter > 0)) throw ConfigError("generate_bps: diameter must be positive");
  BasisPointSet b{Points3(count, 3), seed, diameter};
  Rng rng(seed);
  const double sigma = diameter / 6.0, r2 = 0.25 * diameter * diameter;
  for (int i = 0; i < count;) {
    const Vec3 p(rng.normal(0, sigma), rng.normal(0, sigma), rng.normal(0, sigma));
    if (p.squaredNorm() < r2) b.points.row(i++) = p.transpose();
  }
  return b;
}

/// Basis points placed at a root. `relative` is kept alongside the world
/// positions so the root-relative coordinates are exact, not P - R.
struct PlacedBasis {
  Points3 world;
  Points3 relative;
  Vec3 root = Vec3::Zero();
};

inline PlacedBasis place_basis(const BasisPointSet& bps, const Vec3& root) {
  PlacedBasis p;
  p.relative = bps.points;
  p.world = bps.points.rowwise() + root.transpose();
  p.root = root;
  return p;
}

/// DETR-style 2D encoding: u first, then v; per axis d/4 frequencies of
/// interleaved (sin, cos) of (2 pi coordinate / extent) / temperature^(2k / (d/2)).
inline std::vector<double> sine_pe(const Vec2& p, int d, double width, double height, double temperature = 10000.0) {
  if (d <= 0 || d % 4 != 0) throw ConfigError("sine_pe: dimension " + std::to_string(d) + " is not divisible by 4");
  std::vector<double> out(static_cast<std::size_t>(d));
  const int half = d / 2;
  const double a[2] = {2.0 * std::numbers::pi * p.x() / width, 2.0 * std::numbers::pi * p.y() / height};
  for (int axis = 0; axis < 2; ++axis) {
    for (int k = 0; k < half / 2; ++k) {
      const double phase = a[axis] / std::pow(temperature, 2.0 * k / half);
      out[static_cast<std::size_t>(axis * half + 2 * k)] = std::sin(phase);
      out[static_cast<std::size_t>(axis * half + 2 * k + 1)] = std::cos(phase);
    }
  }
  return out;
}

template <typename T>
struct BasicViewFeatures {
  std::vector<BasicTensor<T>> features;           // per view [M, d]
  std::vector<std::vector<std::uint8_t>> masks;   // per view, 1 = out of view
};
using ViewFeatures = BasicViewFeatures<double>;

/// Projects the basis into each view, bilinearly samples the grid and adds the
/// positional encoding. Points behind the camera or outside the image get a
/// zero feature and a mask bit.
template <typename T>
BasicViewFeatures<T> sample_projected_features(const PlacedBasis& basis, const Rig& rig,
                                               const std::vector<BasicTensor<T>>& grids, int stride,
                                               double temperature = 10000.0) {
  if (grids.size() != rig.cameras.size()) {
    throw ShapeError("sample_projected_features: " + std::to_string(grids.size()) + " grids for " +
                     std::to_string(rig.cameras.size()) + " cameras");
  }
  const std::size_t M = static_cast<std::size_t>(basis.world.rows());
  BasicViewFeatures<T> out;
  for (std::size_t v = 0; v < grids.size(); ++v) {
    const auto& cam = rig.cameras[v];
    const auto& grid = grids[v];
    if (grid.rank() != 3) throw ShapeError("feature grid must be [h,w,C], got " + shape_str(grid.shape()));
    const int d = static_cast<int>(grid.dim(2));
    const auto proj = project(basis.world, cam);
    std::vector<T> coords(M * 2);
    for (std::size_t m = 0; m < M; ++m) {
      const auto r = static_cast<Eigen::Index>(m);
      coords[2 * m] = static_cast<T>(pixel_to_grid(proj.pixels(r, 0), stride));
      coords[2 * m + 1] = static_cast<T>(pixel_to_grid(proj.pixels(r, 1), stride));
      if (!proj.in_front[m] || !std::isfinite(static_cast<double>(coords[2 * m])) ||
          !std::isfinite(static_cast<double>(coords[2 * m + 1]))) {
        coords[2 * m] = coords[2 * m + 1] = T(-1e6);  // forced outside
      }
    }
    auto sampled = bilinear_sample(grid, BasicTensor<T>({M, 2}, std::move(coords)));
    std::vector<T> pe(M * static_cast<std::size_t>(d), T(0));
    for (std::size_t m = 0; m < M; ++m) {
      if (sampled.outside[m]) continue;
      const auto r = static_cast<Eigen::Index>(m);
      const auto e = sine_pe(Vec2(proj.pixels(r, 0), proj.pixels(r, 1)), d, cam.width, cam.height, temperature);
      for (int c = 0; c < d; ++c) pe[m * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)] = static_cast<T>(e[static_cast<std::size_t>(c)]);
    }
    out.features.push_back(sampled.values + BasicTensor<T>({M, static_cast<std::size_t>(d)}, std::move(pe)));
    out.masks.push_back(std::move(sampled.outside));
  }
  return out;
}

/// Registers the projection (d -> d/2) and inverse projection (d/2 -> d).
template <typename T>
void add_aggregation_params(BasicParamStore<T>& store, std::size_t d, const std::string& prefix = "agg") {
  if (d % 2 != 0) throw ConfigError("aggregation: feature dimension must be even");
  store.add(prefix + ".theta", {d, d / 2}, Init::XavierUniform);
  store.add(prefix + ".phi", {d / 2, d}, Init::XavierUniform);
}

/// F = f_1 + (1/N) phi( sum_{j>1} (theta f_1 . theta f_j) theta f_j ), with
/// out-of-view sources excluded; a single view returns f_1 itself.
template <typename T>
BasicTensor<T> projective_aggregation(const BasicViewFeatures<T>& views, const BasicTensor<T>& theta,
                                      const BasicTensor<T>& phi) {
  const std::size_t N = views.features.size();
  if (N == 0) throw ShapeError("projective_aggregation: no views");
  const auto& f1 = views.features[0];
  const BasicTensor<T> target = mutations().aggregation_sign_flip ? neg(f1) : f1;
  if (N == 1) return target;
  const std::size_t M = f1.dim(0), d = f1.dim(1);
  if (theta.shape() != Shape{d, d / 2} || phi.shape() != Shape{d / 2, d}) {
    throw ShapeError("projective_aggregation: features " + shape_str(f1.shape()) + " do not match theta " +
                     shape_str(theta.shape()) + " / phi " + shape_str(phi.shape()));
  }
  const auto t1 = linear(f1, theta);
  BasicTensor<T> acc;
  for (std::size_t j = 1; j < N; ++j) {
    if (views.features[j].shape() != f1.shape()) throw ShapeError("projective_aggregation: view feature shapes differ");
    const auto tj = linear(views.features[j], theta);
    auto w = sum(mul(t1, tj), 1, true);  // [M, 1]
    if (j < views.masks.size() && !views.masks[j].empty()) {
      std::vector<T> keep(M);
      for (std::size_t m = 0; m < M; ++m) keep[m] = views.masks[j][m] ? T(0) : T(1);
      w = mul(w, BasicTensor<T>({M, 1}, std::move(keep)));
    }
    const auto term = mul(w, tj);
    acc = acc.defined() ? acc + term : term;
  }
  return target + scale(linear(acc, phi), T(1.0 / static_cast<double>(N)));
}

}  // namespace poemkit
