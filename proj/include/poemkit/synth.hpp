#pragma once

// Synthetic multi-view frames: spherical rigs, random hands, rendered
// feature grids and root heatmaps, view dropping/shuffling with re-anchoring,
// mirroring, and the on-disk bundle format.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poemkit/errors.hpp"
#include "poemkit/fitting.hpp"
#include "poemkit/geometry.hpp"
#include "poemkit/hand.hpp"
#include "poemkit/io.hpp"
#include "poemkit/rng.hpp"
#include "poemkit/root_stage.hpp"

namespace poemkit {

enum class Handedness { Right, Left };

inline std::string to_string(Handedness h) { return h == Handedness::Left ? "left" : "right"; }
inline Handedness parse_handedness(const std::string& s) {
  if (s == "right") return Handedness::Right;
  if (s == "left") return Handedness::Left;
  throw ConfigError("handedness must be 'left' or 'right', got '" + s + "'");
}

// ---------------------------------------------------------------------------
// Rigs

struct RigOptions {
  int views = 4;
  double radius = 0.6;
  int width = 256;
  int height = 256;
  double focal = 300.0;
  double azimuth_jitter = 0.25;   // rad
  double elevation_range = 0.5;   // rad, symmetric
};

inline void to_json(nlohmann::json& j, const RigOptions& o) {
  j = {{"views", o.views}, {"radius", o.radius}, {"width", o.width}, {"height", o.height},
       {"focal", o.focal}, {"azimuth_jitter", o.azimuth_jitter}, {"elevation_range", o.elevation_range}};
}

inline void from_json(const nlohmann::json& j, RigOptions& o) {
  o = RigOptions{};
  o.views = j.value("views", o.views);
  o.radius = j.value("radius", o.radius);
  o.width = j.value("width", o.width);
  o.height = j.value("height", o.height);
  o.focal = j.value("focal", o.focal);
  o.azimuth_jitter = j.value("azimuth_jitter", o.azimuth_jitter);
  o.elevation_range = j.value("elevation_range", o.elevation_range);
}

/// Re-expresses every camera in the frame of camera `anchor`.
inline Rig anchor_rig(const Rig& rig, std::size_t anchor = 0) {
  Rig out = rig;
  const CameraPose a = rig.cameras.at(anchor).pose;
  for (auto& c : out.cameras) c.pose = reanchor(c.pose, a);
  out.cameras[anchor].pose.T = Mat4::Identity();  // exact
  return out;
}

/// Cameras spread in azimuth around a sphere centred on the origin, each
/// looking at it, then re-anchored so camera 0 is the world frame. The sphere
/// centre ends up at (0, 0, radius).
inline Rig make_rig(const RigOptions& o, std::uint64_t seed) {
  if (o.views < 1) throw ConfigError("make_rig: need at least one view");
  if (!(o.radius > 0) || !(o.focal > 0) || o.width < 1 || o.height < 1) throw ConfigError("make_rig: invalid camera options");
  Rng rng(seed);
  Rig rig;
  const double tau = 2.0 * std::numbers::pi;
  for (int i = 0; i < o.views; ++i) {
    const double az = tau * i / o.views + rng.uniform(-o.azimuth_jitter, o.azimuth_jitter);
    const double el = rng.uniform(-o.elevation_range, o.elevation_range);
    const Vec3 eye = o.radius * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
    Camera c;
    c.intrinsics = CameraIntrinsics::from(o.focal, o.focal, (o.width - 1) / 2.0, (o.height - 1) / 2.0);
    c.width = o.width;
    c.height = o.height;
    c.pose = look_at(eye, Vec3::Zero(), Vec3::UnitZ());
    rig.cameras.push_back(c);
  }
  return anchor_rig(rig);
}

/// Point every camera of a canonical `make_rig` rig looks at.
inline Vec3 rig_center(const RigOptions& o) { return {0, 0, o.radius}; }

// ---------------------------------------------------------------------------
// Scenes and frames

struct Scene {
  HandPose pose;  // pose.root is the world root
  Handedness handedness = Handedness::Right;
  std::uint64_t seed = 0;
};

/// Random hand near `center` (root within +-jitter per axis).
inline Scene make_scene(std::uint64_t seed, const Vec3& center, Handedness hand = Handedness::Right,
                        double jitter = 0.02) {
  Rng rng(seed);
  const Vec3 root = center + Vec3(rng.uniform(-jitter, jitter), rng.uniform(-jitter, jitter), rng.uniform(-jitter, jitter));
  return {sample_pose(rng, root), hand, seed};
}

/// Posed points [V + 21, 3]. A left hand is the mirror image of the right
/// hand with the same parameters posed at the mirrored root.
inline Points3 scene_points(const ToyHandModel& model, const Scene& s) {
  HandPose p = s.pose;
  const bool left = s.handedness == Handedness::Left;
  if (left) p.root.x() = -p.root.x();
  const auto mesh = pose_hand(model, p);
  Points3 all(mesh.vertices.rows() + mesh.keypoints.rows(), 3);
  all << mesh.vertices, mesh.keypoints;
  return left ? mirror_points(all) : all;
}

struct FrameBundle {
  Rig rig;
  std::vector<FeatureGrid> features;
  std::vector<Heatmap> heatmaps;
  Points3 gt_points;  // [V + 21, 3]
  Vec3 gt_root = Vec3::Zero();
  Handedness handedness = Handedness::Right;
  std::uint64_t seed = 0;

  std::size_t views() const { return rig.size(); }
  Points3 gt_keypoints() const { return gt_points.bottomRows(kNumKeypoints); }
  Points3 gt_vertices() const { return gt_points.topRows(gt_points.rows() - kNumKeypoints); }
};

inline FrameBundle render_frame(const Scene& scene, const Rig& rig, const ToyHandModel& model, const BackboneConfig& cfg) {
  if (rig.size() == 0) throw ConfigError("render_frame: empty rig");
  FrameBundle b;
  b.rig = rig;
  b.gt_points = scene_points(model, scene);
  b.gt_root = scene.pose.root;
  b.handedness = scene.handedness;
  b.seed = scene.seed;
  for (const auto& cam : rig.cameras) {
    auto out = synth_backbone(b.gt_points, b.gt_root, cam, cfg);
    b.features.push_back(std::move(out.features));
    b.heatmaps.push_back(std::move(out.heatmap));
  }
  return b;
}

/// Keeps the views listed in `order` (in that order) and re-anchors the world
/// on the first of them; ground truth moves with it.
inline FrameBundle select_views(const FrameBundle& f, const std::vector<std::size_t>& order) {
  if (order.empty()) throw ConfigError("select_views: no views kept");
  FrameBundle out;
  out.handedness = f.handedness;
  out.seed = f.seed;
  for (auto i : order) {
    if (i >= f.views()) throw ConfigError("select_views: view index " + std::to_string(i) + " out of range");
    out.rig.cameras.push_back(f.rig.cameras[i]);
    out.features.push_back(f.features[i]);
    out.heatmaps.push_back(f.heatmaps[i]);
  }
  const CameraPose anchor = out.rig.cameras.front().pose;
  out.rig = anchor_rig(out.rig);
  if (order.front() == 0 && f.rig.canonical(0.0)) {
    out.gt_points = f.gt_points;
    out.gt_root = f.gt_root;
  } else {
    const Mat3 R = anchor.rotation();
    const Vec3 t = anchor.translation();
    out.gt_points = (f.gt_points * R.transpose()).rowwise() + t.transpose();
    out.gt_root = R * f.gt_root + t;
  }
  return out;
}

/// Uniform view count in [1, N], random order, re-anchored.
inline FrameBundle randomize_views(const FrameBundle& f, std::uint64_t seed) {
  if (f.views() == 0) throw ConfigError("randomize_views: empty frame");
  Rng rng(seed);
  const auto n = f.views();
  const auto keep = static_cast<std::size_t>(1 + rng.below(n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  order.resize(keep);
  return select_views(f, order);
}

/// All views in a random order (no dropping), re-anchored.
inline FrameBundle shuffle_views(const FrameBundle& f, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> order(f.views());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  return select_views(f, order);
}

/// Reverses the column order of a [h, w, ...] grid.
inline Tensor flip_columns(const Tensor& g) {
  if (g.rank() < 2) throw ShapeError("flip_columns: need rank >= 2");
  const std::size_t h = g.dim(0), w = g.dim(1), c = g.numel() / (h * w);
  const auto d = g.data();
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      std::copy_n(d.data() + (i * w + j) * c, c, out.data() + (i * w + (w - 1 - j)) * c);
  return Tensor(g.shape(), std::move(out));
}

/// Mirror across camera 0's Y-Z plane: rig conjugated, images flipped,
/// ground truth reflected, handedness swapped.
inline FrameBundle mirror_frame(const FrameBundle& f) {
  FrameBundle out;
  out.rig = mirror_rig(f.rig);
  for (const auto& g : f.features) out.features.push_back({flip_columns(g.grid), g.stride});
  for (const auto& h : f.heatmaps) out.heatmaps.push_back({flip_columns(h.grid), h.stride});
  out.gt_points = mirror_points(f.gt_points);
  out.gt_root = Vec3(-f.gt_root.x(), f.gt_root.y(), f.gt_root.z());
  out.handedness = f.handedness == Handedness::Left ? Handedness::Right : Handedness::Left;
  out.seed = f.seed;
  return out;
}

/// In-plane rotation of one view by quarter turns: the camera gets
/// `rotate_augment`, the grids are rotated on the lattice. Exact for square
/// images with a centred principal point and fx == fy.
inline FrameBundle rotate_view_quarter(const FrameBundle& f, std::size_t view, int quarter_turns) {
  if (view >= f.views()) throw ConfigError("rotate_view_quarter: view out of range");
  const Camera& cam = f.rig.cameras[view];
  if (cam.width != cam.height || cam.intrinsics.fx() != cam.intrinsics.fy() ||
      cam.intrinsics.cx() != (cam.width - 1) / 2.0 || cam.intrinsics.cy() != (cam.height - 1) / 2.0) {
    throw ConfigError("rotate_view_quarter: needs a square image, centred principal point and fx == fy");
  }
  const int k = ((quarter_turns % 4) + 4) % 4;
  FrameBundle out = f;
  out.rig.cameras[view] = rotate_augment(cam, k * std::numbers::pi / 2).camera;
  // Snap the rotation block to exact quarter-turn values.
  Mat3 rot = Mat3::Identity();
  const int c[4] = {1, 0, -1, 0}, s[4] = {0, 1, 0, -1};
  rot << c[k], -s[k], 0, s[k], c[k], 0, 0, 0, 1;
  out.rig.cameras[view].pose.T.topRows<3>() = rot * cam.pose.T.topRows<3>();
  auto rotate = [k](const Tensor& g) {
    const std::size_t n = g.dim(0), ch = g.numel() / (n * n);
    if (g.dim(1) != n) throw ShapeError("rotate_view_quarter: grid is not square");
    const auto d = g.data();
    std::vector<double> cur(d.begin(), d.end()), next(d.size());
    for (int t = 0; t < k; ++t) {
      // new[x][n-1-y] = old[y][x]
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
          std::copy_n(cur.data() + (y * n + x) * ch, ch, next.data() + (x * n + (n - 1 - y)) * ch);
      std::swap(cur, next);
    }
    return Tensor(g.shape(), std::move(cur));
  };
  out.features[view].grid = rotate(f.features[view].grid);
  out.heatmaps[view].grid = rotate(f.heatmaps[view].grid);
  return out;
}

// ---------------------------------------------------------------------------
// On-disk format: rig.json, gt.json, grid_<i>.bin, heatmap_<i>.bin

inline constexpr char kGridMagic[8] = {'P', 'K', 'G', 'R', 'I', 'D', '0', '1'};

/// Header: magic, u32 stride, u32 rank, u64 dims; then little-endian float64.
inline std::vector<char> encode_grid(const Tensor& t, int stride) {
  io::ByteWriter w;
  w.put_bytes(std::string_view(kGridMagic, 8));
  w.put(static_cast<std::uint32_t>(stride));
  w.put(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.put(static_cast<std::uint64_t>(d));
  for (double v : t.data()) w.put_f64(v);
  return w.bytes();
}

inline std::pair<Tensor, int> decode_grid(std::vector<char> bytes, const std::string& source) {
  io::ByteReader r(std::move(bytes), source);
  if (r.get_bytes(8) != std::string_view(kGridMagic, 8)) throw IoError(source + ": not a grid file");
  const int stride = static_cast<int>(r.get<std::uint32_t>());
  const auto rank = r.get<std::uint32_t>();
  if (rank > 8) throw IoError(source + ": implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
  const std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = r.get_f64();
  if (!r.at_end()) throw IoError(source + ": trailing bytes");
  return {Tensor(std::move(shape), std::move(data)), stride};
}

inline nlohmann::json rig_to_json(const Rig& rig) {
  nlohmann::json cams = nlohmann::json::array();
  for (const auto& c : rig.cameras) {
    std::vector<double> K(9), T(16);
    for (int i = 0; i < 9; ++i) K[static_cast<std::size_t>(i)] = c.intrinsics.K(i / 3, i % 3);
    for (int i = 0; i < 16; ++i) T[static_cast<std::size_t>(i)] = c.pose.T(i / 4, i % 4);
    cams.push_back({{"K", K}, {"T", T}, {"width", c.width}, {"height", c.height}});
  }
  return {{"cameras", cams}};
}

inline Rig rig_from_json(const nlohmann::json& j) {
  Rig rig;
  try {
    for (const auto& c : j.at("cameras")) {
      const auto K = c.at("K").get<std::vector<double>>();
      const auto T = c.at("T").get<std::vector<double>>();
      if (K.size() != 9 || T.size() != 16) throw ConfigError("rig: K needs 9 and T 16 entries");
      Camera cam;
      for (int i = 0; i < 9; ++i) cam.intrinsics.K(i / 3, i % 3) = K[static_cast<std::size_t>(i)];
      for (int i = 0; i < 16; ++i) cam.pose.T(i / 4, i % 4) = T[static_cast<std::size_t>(i)];
      cam.width = c.at("width").get<int>();
      cam.height = c.at("height").get<int>();
      cam.intrinsics.validate();
      cam.pose.validate(1e-6);
      rig.cameras.push_back(cam);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("rig json: ") + e.what());
  }
  if (rig.cameras.empty()) throw ConfigError("rig json: no cameras");
  return rig;
}

inline nlohmann::json points_to_json(const Points3& p) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < p.rows(); ++i) a.push_back({p(i, 0), p(i, 1), p(i, 2)});
  return a;
}

inline Points3 points_from_json(const nlohmann::json& a) {
  Points3 p(static_cast<Eigen::Index>(a.size()), 3);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (int c = 0; c < 3; ++c) p(static_cast<Eigen::Index>(i), c) = a.at(i).at(static_cast<std::size_t>(c)).get<double>();
  return p;
}

inline std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline void write_bundle(const FrameBundle& f, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  io::write_text_atomic(dir / "rig.json", dump_json(rig_to_json(f.rig)));
  const nlohmann::json gt = {{"points", points_to_json(f.gt_points)},
                             {"root", {f.gt_root.x(), f.gt_root.y(), f.gt_root.z()}},
                             {"n_vertices", f.gt_points.rows() - kNumKeypoints},
                             {"handedness", to_string(f.handedness)},
                             {"seed", f.seed}};
  io::write_text_atomic(dir / "gt.json", dump_json(gt));
  for (std::size_t i = 0; i < f.views(); ++i) {
    io::write_file_atomic(dir / ("grid_" + std::to_string(i) + ".bin"), encode_grid(f.features[i].grid, f.features[i].stride));
    io::write_file_atomic(dir / ("heatmap_" + std::to_string(i) + ".bin"), encode_grid(f.heatmaps[i].grid, f.heatmaps[i].stride));
  }
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline FrameBundle read_bundle(const std::filesystem::path& dir) {
  FrameBundle f;
  f.rig = rig_from_json(read_json(dir / "rig.json"));
  const auto gt = read_json(dir / "gt.json");
  try {
    f.gt_points = points_from_json(gt.at("points"));
    const auto r = gt.at("root").get<std::vector<double>>();
    if (r.size() != 3) throw ConfigError("gt.json: root needs 3 values");
    f.gt_root = Vec3(r[0], r[1], r[2]);
    f.handedness = parse_handedness(gt.value("handedness", std::string("right")));
    f.seed = gt.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError((dir / "gt.json").string() + ": " + e.what());
  }
  for (std::size_t i = 0; i < f.rig.size(); ++i) {
    const auto gp = dir / ("grid_" + std::to_string(i) + ".bin");
    const auto hp = dir / ("heatmap_" + std::to_string(i) + ".bin");
    auto [g, gs] = decode_grid(io::read_file(gp), gp.string());
    auto [h, hs] = decode_grid(io::read_file(hp), hp.string());
    if (g.rank() != 3 || h.rank() != 2) throw IoError(dir.string() + ": grid/heatmap ranks must be 3/2");
    f.features.push_back({std::move(g), gs});
    f.heatmaps.push_back({std::move(h), hs});
  }
  return f;
}

}  // namespace poemkit
