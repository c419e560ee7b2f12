#pragma once

// A license-free stand-in for the MANO hand: an icosphere palm plus five
// three-segment finger chains, articulated by 16 joints and described by 21
// keypoints in the usual order (wrist, then thumb/index/middle/ring/little,
// four keypoints each from base to tip). Keypoint 9, the middle-finger MCP,
// is the root and sits at the origin of the rest template.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <vector>

#include "poemkit/errors.hpp"
#include "poemkit/geometry.hpp"

namespace poemkit {

inline constexpr int kNumJoints = 16;
inline constexpr int kNumKeypoints = 21;
inline constexpr int kNumShape = 10;
inline constexpr int kRootKeypoint = 9;

/// Articulated joint driving keypoint `k`, or -1 for fingertips.
constexpr int joint_of_keypoint(int k) {
  if (k == 0) return 0;
  const int f = (k - 1) / 4, s = (k - 1) % 4;
  return s == 3 ? -1 : 1 + 3 * f + s;
}

/// Keypoint located at articulated joint `j`.
constexpr int keypoint_of_joint(int j) {
  if (j == 0) return 0;
  const int f = (j - 1) / 3, s = (j - 1) % 3;
  return 1 + 4 * f + s;
}

constexpr int joint_parent(int j) {
  if (j == 0) return -1;
  return (j - 1) % 3 == 0 ? 0 : j - 1;
}

struct HandTemplate {
  Points3 vertices;                      // n_vertices x 3
  Points3 joints;                        // 21 x 3 keypoints
  std::vector<std::array<int, 3>> faces;
  std::array<int, kNumJoints> parents{};
  int root_index = kRootKeypoint;

  int n_vertices() const { return static_cast<int>(vertices.rows()); }
  int n_points() const { return n_vertices() + kNumKeypoints; }

  /// Query-point layout [V; J].
  Points3 points() const {
    Points3 all(n_points(), 3);
    all.topRows(n_vertices()) = vertices;
    all.bottomRows(kNumKeypoints) = joints;
    return all;
  }
};

struct JointLimits {
  std::array<Vec3, kNumJoints> lower;
  std::array<Vec3, kNumJoints> upper;
};

/// Axis-angle components are (x: flexion, y: twist, z: abduction) in the rest
/// frame, fingers pointing along +y with the palm facing +z.
struct ToyHandModel {
  HandTemplate hand;
  /// kNumShape x (n_points * 3), displacement per unit coefficient over [V; J].
  Eigen::MatrixXd shape_basis;
  /// n_vertices x 16, rows sum to one.
  Eigen::MatrixXd skinning_weights;
  JointLimits limits;
};

namespace detail {

struct HandCandidate {
  Vec3 position;
  int joint;        // dominant joint
  int blend_joint;  // -1 for none
  double blend;     // weight given to blend_joint
};

struct FingerSpec {
  Vec3 base;
  Vec3 dir;
  std::array<double, 3> length;
  double radius;
};

inline std::array<FingerSpec, 5> finger_specs() {
  return {{
      {Vec3(0.030, -0.058, 0.008), Vec3(0.6, 0.8, 0.0).normalized(), {0.034, 0.030, 0.026}, 0.0095},
      {Vec3(0.024, -0.004, 0.0), Vec3(0.08, 1.0, 0.0).normalized(), {0.040, 0.025, 0.020}, 0.0085},
      {Vec3(0.0, 0.0, 0.0), Vec3(0.0, 1.0, 0.0), {0.044, 0.027, 0.021}, 0.0088},
      {Vec3(-0.022, -0.006, 0.0), Vec3(-0.08, 1.0, 0.0).normalized(), {0.042, 0.026, 0.020}, 0.0082},
      {Vec3(-0.042, -0.018, 0.0), Vec3(-0.18, 1.0, 0.0).normalized(), {0.033, 0.020, 0.018}, 0.0072},
  }};
}

inline void icosphere(int levels, std::vector<Vec3>& verts, std::vector<std::array<int, 3>>& faces) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  verts = {Vec3(-1, t, 0), Vec3(1, t, 0), Vec3(-1, -t, 0), Vec3(1, -t, 0), Vec3(0, -1, t), Vec3(0, 1, t),
           Vec3(0, -1, -t), Vec3(0, 1, -t), Vec3(t, 0, -1), Vec3(t, 0, 1), Vec3(-t, 0, -1), Vec3(-t, 0, 1)};
  for (auto& v : verts) v.normalize();
  faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
           {11, 10, 2}, {10, 7, 6}, {7, 1, 8},   {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
           {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int l = 0; l < levels; ++l) {
    std::map<std::pair<int, int>, int> mid;
    auto midpoint = [&](int a, int b) {
      auto key = std::minmax(a, b);
      auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      verts.push_back((verts[static_cast<std::size_t>(a)] + verts[static_cast<std::size_t>(b)]).normalized());
      const int id = static_cast<int>(verts.size()) - 1;
      mid.emplace(key, id);
      return id;
    };
    std::vector<std::array<int, 3>> next;
    for (const auto& f : faces) {
      const int a = midpoint(f[0], f[1]), b = midpoint(f[1], f[2]), c = midpoint(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    faces = std::move(next);
  }
}

inline std::vector<HandCandidate> hand_candidates() {
  std::vector<HandCandidate> out;
  std::vector<Vec3> sphere;
  std::vector<std::array<int, 3>> sphere_faces;
  icosphere(3, sphere, sphere_faces);
  const Vec3 palm_center(-0.004, -0.045, 0.0);
  const Vec3 palm_axes(0.040, 0.043, 0.013);
  const auto fingers = finger_specs();
  for (const auto& s : sphere) {
    const Vec3 p = palm_center + s.cwiseProduct(palm_axes);
    HandCandidate c{p, 0, -1, 0.0};
    if (p.y() > -0.022) {
      // blend the distal palm toward the closest MCP
      int best = 1;
      double best_d = std::numeric_limits<double>::infinity();
      for (int f = 1; f < 5; ++f) {
        const double d = (p - fingers[static_cast<std::size_t>(f)].base).norm();
        if (d < best_d) {
          best_d = d;
          best = f;
        }
      }
      c.blend_joint = 1 + 3 * best;
      c.blend = std::clamp((p.y() + 0.022) / 0.022, 0.0, 1.0) * 0.4;
    }
    out.push_back(c);
  }
  constexpr int kRings = 4;
  constexpr int kPerRing = 8;
  for (int f = 0; f < 5; ++f) {
    const auto& spec = fingers[static_cast<std::size_t>(f)];
    Vec3 side = spec.dir.cross(Vec3(0, 0, 1)).normalized();
    const Vec3 normal = side.cross(spec.dir).normalized();
    Vec3 start = spec.base;
    for (int s = 0; s < 3; ++s) {
      const double len = spec.length[static_cast<std::size_t>(s)];
      const double radius = spec.radius * (1.0 - 0.12 * s);
      const int joint = 1 + 3 * f + s;
      for (int r = 0; r < kRings; ++r) {
        const double frac = (r + 0.5) / kRings;
        const Vec3 center = start + frac * len * spec.dir;
        for (int k = 0; k < kPerRing; ++k) {
          const double a = 2.0 * M_PI * (k + 0.5 * (r % 2)) / kPerRing;
          const Vec3 p = center + radius * (std::cos(a) * side + std::sin(a) * normal);
          const double blend = 0.5 * std::max(0.0, 1.0 - frac / 0.3);
          out.push_back({p, joint, joint_parent(joint), blend});
        }
      }
      start += len * spec.dir;
    }
    // fingertip cap
    out.push_back({start + 0.6 * spec.radius * spec.dir, 1 + 3 * f + 2, -1, 0.0});
  }
  return out;
}

/// Farthest-point subset of `count` candidates, seeded at the first candidate.
inline std::vector<int> farthest_point_subset(const std::vector<HandCandidate>& cand, int count) {
  std::vector<int> picked;
  std::vector<double> dist(cand.size(), std::numeric_limits<double>::infinity());
  int current = 0;
  for (int i = 0; i < count; ++i) {
    picked.push_back(current);
    int next = 0;
    double far = -1.0;
    for (std::size_t j = 0; j < cand.size(); ++j) {
      dist[j] = std::min(dist[j], (cand[j].position - cand[static_cast<std::size_t>(current)].position).squaredNorm());
      if (dist[j] > far) {
        far = dist[j];
        next = static_cast<int>(j);
      }
    }
    current = next;
  }
  return picked;
}

/// Triangles joining each vertex to its two nearest neighbours; a
/// visualization mesh for arbitrary vertex counts.
inline std::vector<std::array<int, 3>> neighbour_faces(const Points3& v) {
  std::set<std::array<int, 3>> faces;
  const int n = static_cast<int>(v.rows());
  if (n < 3) return {};
  for (int i = 0; i < n; ++i) {
    int a = -1, b = -1;
    double da = std::numeric_limits<double>::infinity(), db = da;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = (v.row(i) - v.row(j)).squaredNorm();
      if (d < da) {
        b = a;
        db = da;
        a = j;
        da = d;
      } else if (d < db) {
        b = j;
        db = d;
      }
    }
    std::array<int, 3> f{i, a, b};
    std::sort(f.begin(), f.end());
    faces.insert(f);
  }
  return {faces.begin(), faces.end()};
}

}  // namespace detail

/// Rest keypoints of the toy hand (21 x 3, root keypoint at the origin).
inline Points3 toy_hand_keypoints() {
  Points3 kp(kNumKeypoints, 3);
  kp.row(0) = Vec3(-0.004, -0.088, 0.0).transpose();
  const auto fingers = detail::finger_specs();
  for (int f = 0; f < 5; ++f) {
    const auto& spec = fingers[static_cast<std::size_t>(f)];
    Vec3 p = spec.base;
    for (int s = 0; s < 4; ++s) {
      kp.row(1 + 4 * f + s) = p.transpose();
      if (s < 3) p += spec.length[static_cast<std::size_t>(s)] * spec.dir;
    }
  }
  return kp;
}

/// Toy hand template with `n_vertices` surface points (1 <= n <= 1000).
inline HandTemplate make_hand_template(int n_vertices) {
  const auto cand = detail::hand_candidates();
  if (n_vertices < 1 || n_vertices > static_cast<int>(cand.size())) {
    throw ConfigError("hand template: n_vertices must be in [1, " + std::to_string(cand.size()) + "]");
  }
  const auto subset = detail::farthest_point_subset(cand, n_vertices);
  HandTemplate t;
  t.vertices.resize(n_vertices, 3);
  for (int i = 0; i < n_vertices; ++i) t.vertices.row(i) = cand[static_cast<std::size_t>(subset[static_cast<std::size_t>(i)])].position.transpose();
  t.joints = toy_hand_keypoints();
  t.faces = detail::neighbour_faces(t.vertices);
  for (int j = 0; j < kNumJoints; ++j) t.parents[static_cast<std::size_t>(j)] = joint_parent(j);
  return t;
}

inline JointLimits default_joint_limits() {
  JointLimits lim;
  const double inf = std::numeric_limits<double>::infinity();
  lim.lower[0] = Vec3::Constant(-inf);
  lim.upper[0] = Vec3::Constant(inf);
  for (int j = 1; j < kNumJoints; ++j) {
    lim.lower[static_cast<std::size_t>(j)] = Vec3(-0.2, -0.4, -0.4);
    lim.upper[static_cast<std::size_t>(j)] = Vec3(1.8, 0.4, 0.4);
  }
  return lim;
}

namespace detail {

/// Displacement of rest point `p` (owned by joint `joint`) along shape
/// direction `k`, before mean removal.
inline Vec3 shape_direction(int k, const Vec3& p, int joint) {
  const double yp = std::max(p.y(), 0.0);
  const double yn = std::min(p.y(), 0.0);
  const bool thumb = joint >= 1 && joint <= 3;
  switch (k) {
    case 0: return 0.05 * p;                                    // overall size
    case 1: return Vec3(0.06 * p.x(), 0, 0);                    // palm width
    case 2: return Vec3(0, 0.07 * yp, 0);                       // finger length
    case 3: return Vec3(0, 0.06 * yn, 0);                       // palm length
    case 4: return Vec3(0, 0, 0.20 * p.z());                    // thickness
    case 5: return thumb ? Vec3(0.05 * (p.x() - 0.030), 0.05 * (p.y() + 0.058), 0) : Vec3::Zero();  // thumb size
    case 6: return Vec3(0, 1.2 * p.x() * yp, 0);                // radial/ulnar finger length
    case 7: return Vec3(1.0 * p.x() * yp / 0.05, 0, 0) * 0.05;  // finger spread
    case 8: return Vec3(0.04 * p.y(), 0, 0);                    // skew
    default: return Vec3(0, 0, 0.05 * p.x());                   // palm cupping
  }
}

}  // namespace detail

/// Template, skinning weights, shape basis and joint limits for `n_vertices`.
inline ToyHandModel make_toy_hand_model(int n_vertices) {
  ToyHandModel m;
  m.hand = make_hand_template(n_vertices);
  m.limits = default_joint_limits();
  const auto cand = detail::hand_candidates();
  const auto subset = detail::farthest_point_subset(cand, n_vertices);

  m.skinning_weights = Eigen::MatrixXd::Zero(n_vertices, kNumJoints);
  std::vector<int> owner(static_cast<std::size_t>(n_vertices + kNumKeypoints));
  for (int i = 0; i < n_vertices; ++i) {
    const auto& c = cand[static_cast<std::size_t>(subset[static_cast<std::size_t>(i)])];
    if (c.blend_joint >= 0 && c.blend > 0) {
      m.skinning_weights(i, c.blend_joint) = c.blend;
      m.skinning_weights(i, c.joint) = 1.0 - c.blend;
    } else {
      m.skinning_weights(i, c.joint) = 1.0;
    }
    owner[static_cast<std::size_t>(i)] = c.joint;
  }
  for (int k = 0; k < kNumKeypoints; ++k) {
    const int j = joint_of_keypoint(k);
    owner[static_cast<std::size_t>(n_vertices + k)] = j >= 0 ? j : 1 + 3 * ((k - 1) / 4) + 2;
  }

  const Points3 all = m.hand.points();
  const int np = m.hand.n_points();
  m.shape_basis.resize(kNumShape, np * 3);
  for (int k = 0; k < kNumShape; ++k) {
    Points3 d(np, 3);
    for (int i = 0; i < np; ++i) d.row(i) = detail::shape_direction(k, all.row(i).transpose(), owner[static_cast<std::size_t>(i)]).transpose();
    const Eigen::RowVector3d mean = d.topRows(n_vertices).colwise().mean();
    d.rowwise() -= mean;
    for (int i = 0; i < np; ++i)
      for (int c = 0; c < 3; ++c) m.shape_basis(k, 3 * i + c) = d(i, c);
  }
  return m;
}

}  // namespace poemkit
