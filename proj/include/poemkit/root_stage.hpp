#pragma once

// Stage 1: per-view root heatmaps -> soft-argmax -> DLT, plus the synthetic
// backbone that renders feature grids and heatmaps from a posed hand.
//
// Grid cell (i, j) of a stride-s grid is centred on full-image pixel
// ((j + 0.5) s - 0.5, (i + 0.5) s - 0.5).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "poemkit/errors.hpp"
#include "poemkit/geometry.hpp"
#include "poemkit/io.hpp"
#include "poemkit/rng.hpp"
#include "poemkit/tensor.hpp"

namespace poemkit {

/// Non-negative [h, w] likelihood over grid cells.
struct Heatmap {
  Tensor grid;
  int stride = 8;
};

/// [h, w, C] per-view features.
struct FeatureGrid {
  Tensor grid;
  int stride = 8;
};

inline double grid_to_pixel(double g, int stride) { return (g + 0.5) * stride - 0.5; }
inline double pixel_to_grid(double p, int stride) { return (p + 0.5) / stride - 0.5; }

template <typename T>
BasicTensor<T> normalize_heatmap(const BasicTensor<T>& h) {
  if (h.rank() != 2) throw ShapeError("heatmap must be [h,w], got " + shape_str(h.shape()));
  const auto d = h.data();
  double total = 0;
  for (T v : d) {
    if (!(v >= 0)) throw DegenerateError("heatmap has a negative or non-finite entry");
    total += static_cast<double>(v);
  }
  if (!(total > 0)) throw DegenerateError("all-zero heatmap");
  return div(h, sum(h));
}

inline Heatmap normalize_heatmap(const Heatmap& h) { return {normalize_heatmap(h.grid), h.stride}; }

/// Expected (u, v) in full-image pixels, differentiable w.r.t. the heatmap.
template <typename T>
BasicTensor<T> soft_argmax(const BasicTensor<T>& h, int stride) {
  const auto p = normalize_heatmap(h);
  const std::size_t rows = h.dim(0), cols = h.dim(1);
  std::vector<T> xs(cols), ys(rows);
  for (std::size_t j = 0; j < cols; ++j) xs[j] = static_cast<T>(grid_to_pixel(static_cast<double>(j), stride));
  for (std::size_t i = 0; i < rows; ++i) ys[i] = static_cast<T>(grid_to_pixel(static_cast<double>(i), stride));
  const auto u = sum(mul(p, BasicTensor<T>({1, cols}, std::move(xs))));
  const auto v = sum(mul(p, BasicTensor<T>({rows, 1}, std::move(ys))));
  return concat<T>({reshape(u, {1}), reshape(v, {1})}, 0);
}

inline Vec2 soft_argmax(const Heatmap& h) {
  NoGradGuard guard;
  const auto uv = soft_argmax(h.grid, h.stride);
  return {uv.data()[0], uv.data()[1]};
}

struct RootEstimate {
  Vec3 root;
  std::vector<Vec2> pixels;  // per-view soft-argmax
  bool near_singular = false;
};

/// Soft-argmax in each view, then DLT.
inline RootEstimate estimate_root(const std::vector<Heatmap>& heatmaps, const Rig& rig) {
  if (heatmaps.size() != rig.cameras.size()) {
    throw ShapeError("estimate_root: " + std::to_string(heatmaps.size()) + " heatmaps for " +
                     std::to_string(rig.cameras.size()) + " cameras");
  }
  RootEstimate est;
  std::vector<Observation> obs;
  for (std::size_t i = 0; i < heatmaps.size(); ++i) {
    est.pixels.push_back(soft_argmax(heatmaps[i]));
    obs.push_back({est.pixels.back(), rig.cameras[i]});
  }
  const auto tri = triangulate_dlt(obs);
  est.root = tri.point;
  est.near_singular = tri.near_singular;
  return est;
}

// ---------------------------------------------------------------------------
// Synthetic backbone

struct BackboneConfig {
  int stride = 8;
  int channels = 32;
  double heatmap_sigma = 1.5;  // grid cells
  double feature_sigma = 1.0;  // grid cells
  std::uint64_t seed = 0;      // keys the per-point feature directions
};

/// Unit feature direction of point `id`.
inline std::vector<double> point_signature(std::uint64_t seed, std::size_t id, int channels) {
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(id) + 0x9e3779b97f4a7c15ULL));
  std::vector<double> e(static_cast<std::size_t>(channels));
  double n = 0;
  for (auto& v : e) {
    v = rng.normal();
    n += v * v;
  }
  n = std::sqrt(n);
  for (auto& v : e) v /= n;
  return e;
}

inline void check_grid_size(const Camera& cam, int stride) {
  if (stride < 1 || cam.width % stride != 0 || cam.height % stride != 0) {
    throw ConfigError("image " + std::to_string(cam.width) + "x" + std::to_string(cam.height) +
                      " is not divisible by stride " + std::to_string(stride));
  }
}

/// Gaussian blob at the projection of `root`; all zero when the root is
/// behind the camera or projects outside the image.
inline Heatmap render_heatmap(const Vec3& root, const Camera& cam, const BackboneConfig& cfg) {
  check_grid_size(cam, cfg.stride);
  const std::size_t h = static_cast<std::size_t>(cam.height / cfg.stride), w = static_cast<std::size_t>(cam.width / cfg.stride);
  std::vector<double> data(h * w, 0.0);
  const Vec3 pc = cam.pose.rotation() * root + cam.pose.translation();
  if (pc.z() > 0) {
    const Vec2 px = project_point(root, cam);
    if (px.x() >= -0.5 && px.x() <= cam.width - 0.5 && px.y() >= -0.5 && px.y() <= cam.height - 0.5) {
      const double gx = pixel_to_grid(px.x(), cfg.stride), gy = pixel_to_grid(px.y(), cfg.stride);
      const double inv = 1.0 / (2.0 * cfg.heatmap_sigma * cfg.heatmap_sigma);
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const double dx = static_cast<double>(j) - gx, dy = static_cast<double>(i) - gy;
          data[i * w + j] = std::exp(-(dx * dx + dy * dy) * inv);
        }
    }
  }
  return {Tensor({h, w}, std::move(data)), cfg.stride};
}

/// Splats each point's signature with a Gaussian kernel at its projection.
/// Points behind the camera contribute nothing; there is no occlusion.
inline FeatureGrid render_features(const Points3& points, const Camera& cam, const BackboneConfig& cfg) {
  check_grid_size(cam, cfg.stride);
  const std::size_t h = static_cast<std::size_t>(cam.height / cfg.stride), w = static_cast<std::size_t>(cam.width / cfg.stride);
  const std::size_t C = static_cast<std::size_t>(cfg.channels);
  std::vector<double> data(h * w * C, 0.0);
  const auto proj = project(points, cam);
  const double inv = 1.0 / (2.0 * cfg.feature_sigma * cfg.feature_sigma);
  const int reach = static_cast<int>(std::ceil(3.0 * cfg.feature_sigma));
  for (Eigen::Index q = 0; q < points.rows(); ++q) {
    if (!proj.in_front[static_cast<std::size_t>(q)]) continue;
    const double gx = pixel_to_grid(proj.pixels(q, 0), cfg.stride), gy = pixel_to_grid(proj.pixels(q, 1), cfg.stride);
    const auto e = point_signature(cfg.seed, static_cast<std::size_t>(q), cfg.channels);
    const int ci = static_cast<int>(std::lround(gy)), cj = static_cast<int>(std::lround(gx));
    for (int i = std::max(0, ci - reach); i <= std::min(static_cast<int>(h) - 1, ci + reach); ++i)
      for (int j = std::max(0, cj - reach); j <= std::min(static_cast<int>(w) - 1, cj + reach); ++j) {
        const double dx = j - gx, dy = i - gy;
        const double k = std::exp(-(dx * dx + dy * dy) * inv);
        double* cell = data.data() + (static_cast<std::size_t>(i) * w + static_cast<std::size_t>(j)) * C;
        for (std::size_t c = 0; c < C; ++c) cell[c] += k * e[c];
      }
  }
  return {Tensor({h, w, C}, std::move(data)), cfg.stride};
}

struct BackboneOutput {
  FeatureGrid features;
  Heatmap heatmap;
};

/// Stand-in for the image backbone: features from the hand points, root
/// heatmap from the root.
inline BackboneOutput synth_backbone(const Points3& hand_points, const Vec3& root, const Camera& cam,
                                     const BackboneConfig& cfg) {
  return {render_features(hand_points, cam, cfg), render_heatmap(root, cam, cfg)};
}

/// 8-bit PGM of a heatmap, scaled by its maximum (debug output).
inline void write_heatmap_pgm(const Heatmap& hm, const std::filesystem::path& path) {
  if (hm.grid.rank() != 2) throw ShapeError("write_heatmap_pgm: heatmap must be [h,w]");
  const auto d = hm.grid.data();
  double mx = 0;
  for (double v : d) mx = std::max(mx, v);
  std::string out = "P5\n" + std::to_string(hm.grid.dim(1)) + " " + std::to_string(hm.grid.dim(0)) + "\n255\n";
  for (double v : d) out.push_back(static_cast<char>(mx > 0 ? std::lround(255.0 * v / mx) : 0));
  io::write_file_atomic(path, std::vector<char>(out.begin(), out.end()));
}

}  // namespace poemkit
