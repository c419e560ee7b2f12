#pragma once

// Pinhole multi-view geometry: projection, DLT triangulation, Procrustes
// alignment, in-plane rotation augmentation and rig mirroring.
//
// Conventions: world -> camera extrinsics T (4x4), zero skew, no distortion,
// pixel coordinates (u = column, v = row) with pixel centers at integers.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "poemkit/errors.hpp"

namespace poemkit {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat34 = Eigen::Matrix<double, 3, 4>;
/// N x 3 point set, one point per row.
using Points3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
/// N x 2 pixel set, one (u, v) per row.
using Points2 = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;

struct CameraIntrinsics {
  Mat3 K = Mat3::Identity();

  static CameraIntrinsics from(double fx, double fy, double cx, double cy) {
    CameraIntrinsics in;
    in.K << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    in.validate();
    return in;
  }
  double fx() const { return K(0, 0); }
  double fy() const { return K(1, 1); }
  double cx() const { return K(0, 2); }
  double cy() const { return K(1, 2); }

  void validate() const {
    if (!(fx() > 0 && fy() > 0)) throw ConfigError("intrinsics: focal lengths must be positive");
    if (K(0, 1) != 0 || K(1, 0) != 0 || K(2, 0) != 0 || K(2, 1) != 0 || K(2, 2) != 1) {
      throw ConfigError("intrinsics: expected zero skew and last row [0,0,1]");
    }
  }
};

struct CameraPose {
  Mat4 T = Mat4::Identity();  // world -> camera

  static CameraPose from(const Mat3& R, const Vec3& t) {
    CameraPose p;
    p.T.topLeftCorner<3, 3>() = R;
    p.T.topRightCorner<3, 1>() = t;
    return p;
  }
  Mat3 rotation() const { return T.topLeftCorner<3, 3>(); }
  Vec3 translation() const { return T.topRightCorner<3, 1>(); }

  CameraPose inverse() const {
    const Mat3 Rt = rotation().transpose();
    return from(Rt, -Rt * translation());
  }

  void validate(double tol = 1e-9) const {
    const Mat3 R = rotation();
    if ((R * R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > tol || std::abs(R.determinant() - 1.0) > tol) {
      throw ConfigError("pose: rotation block is not in SO(3)");
    }
    if (T(3, 0) != 0 || T(3, 1) != 0 || T(3, 2) != 0 || T(3, 3) != 1) {
      throw ConfigError("pose: last row must be [0,0,0,1]");
    }
  }
};

struct Camera {
  CameraIntrinsics intrinsics;
  CameraPose pose;
  int width = 0;
  int height = 0;

  /// M = K * T[0:3, :].
  Mat34 projection() const { return intrinsics.K * pose.T.topRows<3>(); }
  /// Optical center in world coordinates.
  Vec3 center() const { return -pose.rotation().transpose() * pose.translation(); }
};

/// Extrinsic for a camera at `eye` whose optical axis passes through
/// `target`; image rows run against `up`.
inline CameraPose look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 z = (target - eye).normalized();
  Vec3 y = -up + up.dot(z) * z;
  if (y.norm() < 1e-12) throw DegenerateError("look_at: up vector parallel to viewing direction");
  y.normalize();
  const Vec3 x = y.cross(z);
  Mat3 R;
  R.row(0) = x.transpose();
  R.row(1) = y.transpose();
  R.row(2) = z.transpose();
  return CameraPose::from(R, -R * eye);
}

/// Re-expresses `pose` (world -> camera) in the frame of `anchor`'s camera,
/// i.e. the new world is the anchor camera frame.
inline CameraPose reanchor(const CameraPose& pose, const CameraPose& anchor) {
  CameraPose out;
  out.T = pose.T * anchor.inverse().T;
  return out;
}

struct Rig {
  std::vector<Camera> cameras;

  std::size_t size() const { return cameras.size(); }
  /// Camera 0 sits at the world origin with identity orientation.
  bool canonical(double tol = 1e-12) const {
    return !cameras.empty() && (cameras.front().pose.T - Mat4::Identity()).cwiseAbs().maxCoeff() <= tol;
  }
};

// ---------------------------------------------------------------------------
// Projection

struct Projection {
  Points2 pixels;
  Eigen::VectorXd depth;
  std::vector<std::uint8_t> in_front;
};

inline Projection project(const Points3& points, const Camera& camera) {
  const Mat34 M = camera.projection();
  const Eigen::Index n = points.rows();
  Projection out;
  out.pixels.resize(n, 2);
  out.depth.resize(n);
  out.in_front.assign(static_cast<std::size_t>(n), 0);
  const Mat3 R = camera.pose.rotation();
  const Vec3 t = camera.pose.translation();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 p = points.row(i).transpose();
    const Eigen::Vector3d h = M.leftCols<3>() * p + M.col(3);
    out.pixels(i, 0) = h.x() / h.z();
    out.pixels(i, 1) = h.y() / h.z();
    const double z = (R * p + t).z();
    out.depth(i) = z;
    out.in_front[static_cast<std::size_t>(i)] = z > 0 ? 1 : 0;
  }
  return out;
}

inline Vec2 project_point(const Vec3& p, const Camera& camera) {
  const Eigen::Vector3d h = camera.projection() * p.homogeneous();
  return {h.x() / h.z(), h.y() / h.z()};
}

// ---------------------------------------------------------------------------
// SVD

struct Svd {
  Eigen::MatrixXd U;          // m x n, orthonormal columns (for nonzero singular values)
  Eigen::VectorXd singular;   // n, descending
  Eigen::MatrixXd V;          // n x n
};

/// One-sided (Hestenes) Jacobi SVD. Rows are zero-padded when m < n.
inline Svd jacobi_svd(const Eigen::MatrixXd& input, int max_sweeps = 60) {
  const Eigen::Index n = input.cols();
  Eigen::MatrixXd A = input;
  if (A.rows() < n) {
    A.conservativeResize(n, Eigen::NoChange);
    A.bottomRows(n - input.rows()).setZero();
  }
  Eigen::MatrixXd V = Eigen::MatrixXd::Identity(n, n);
  const double eps = 1e-15;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double alpha = A.col(p).squaredNorm();
        const double beta = A.col(q).squaredNorm();
        const double gamma = A.col(p).dot(A.col(q));
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        const Eigen::VectorXd ap = A.col(p);
        A.col(p) = c * ap - s * A.col(q);
        A.col(q) = s * ap + c * A.col(q);
        const Eigen::VectorXd vp = V.col(p);
        V.col(p) = c * vp - s * V.col(q);
        V.col(q) = s * vp + c * V.col(q);
      }
    }
    if (!rotated) break;
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  Eigen::VectorXd norms(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    norms(j) = A.col(j).norm();
    order[static_cast<std::size_t>(j)] = j;
  }
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return norms(a) > norms(b); });
  Svd out;
  out.U.resize(A.rows(), n);
  out.singular.resize(n);
  out.V.resize(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index j = order[static_cast<std::size_t>(k)];
    out.singular(k) = norms(j);
    out.V.col(k) = V.col(j);
    out.U.col(k) = norms(j) > 0 ? Eigen::VectorXd(A.col(j) / norms(j)) : Eigen::VectorXd::Zero(A.rows());
  }
  if (input.rows() < n) out.U.conservativeResize(input.rows(), Eigen::NoChange);
  return out;
}

// ---------------------------------------------------------------------------
// Triangulation

struct Observation {
  Vec2 pixel;
  Camera camera;
};

struct Triangulation {
  Vec3 point;
  Eigen::VectorXd singular;  // of the stacked 2N x 4 system, descending
  bool near_singular = false;
};

/// Stacks u*M[2] - M[0] and v*M[2] - M[1] for every view and returns the
/// dehomogenized right singular vector of the smallest singular value.
inline Triangulation triangulate_dlt(std::span<const Observation> obs) {
  if (obs.size() < 2) throw DegenerateError("triangulate_dlt: need at least 2 views, got " + std::to_string(obs.size()));
  bool distinct = false;
  const Vec3 c0 = obs.front().camera.center();
  for (const auto& o : obs) {
    if ((o.camera.center() - c0).norm() > 1e-12 * std::max(1.0, c0.norm())) distinct = true;
  }
  if (!distinct) throw DegenerateError("triangulate_dlt: all views share one optical center (no FoV disparity)");

  Eigen::MatrixXd A(2 * static_cast<Eigen::Index>(obs.size()), 4);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const Mat34 M = obs[i].camera.projection();
    const auto r = static_cast<Eigen::Index>(2 * i);
    A.row(r) = obs[i].pixel.x() * M.row(2) - M.row(0);
    A.row(r + 1) = obs[i].pixel.y() * M.row(2) - M.row(1);
  }
  const Svd svd = jacobi_svd(A);
  const double s_max = svd.singular(0);
  const double s3 = svd.singular(2);
  const double s4 = svd.singular(3);
  if (!(s_max > 0) || s3 <= 1e-12 * s_max) {
    throw DegenerateError("triangulate_dlt: rays are parallel (null space has dimension > 1)");
  }
  const Eigen::Vector4d h = svd.V.col(3);
  if (std::abs(h(3)) < 1e-12) throw DegenerateError("triangulate_dlt: solution is a point at infinity");
  Triangulation out;
  out.point = h.head<3>() / h(3);
  out.singular = svd.singular;
  out.near_singular = (s3 - s4) <= 1e-9 * s3;
  return out;
}

// ---------------------------------------------------------------------------
// Procrustes

struct Similarity {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Points3 apply(const Points3& p) const {
    Points3 out = (scale * (p * rotation.transpose())).rowwise() + translation.transpose();
    return out;
  }
};

struct ProcrustesResult {
  Points3 aligned;
  Similarity transform;
};

/// Similarity (s, R, t) minimizing |s R pred + t - gt|^2 with det(R) = +1.
inline ProcrustesResult procrustes_align(const Points3& pred, const Points3& gt) {
  if (pred.rows() != gt.rows()) throw ShapeError("procrustes_align: point counts differ");
  if (pred.rows() < 3) throw DegenerateError("procrustes_align: need at least 3 points");
  const Vec3 mp = pred.colwise().mean().transpose();
  const Vec3 mg = gt.colwise().mean().transpose();
  const Points3 pc = pred.rowwise() - mp.transpose();
  const Points3 gc = gt.rowwise() - mg.transpose();
  const double var_p = pc.squaredNorm();
  const double var_g = gc.squaredNorm();
  if (var_p <= 0 || var_g <= 0) throw DegenerateError("procrustes_align: zero variance point set");
  // H = sum_i pc_i gc_i^T; R = V D U^T
  const Eigen::Matrix3d H = pc.transpose() * gc;
  const Svd svd = jacobi_svd(H);
  Mat3 D = Mat3::Identity();
  if ((svd.V * svd.U.transpose()).determinant() < 0) D(2, 2) = -1;
  ProcrustesResult out;
  out.transform.rotation = svd.V * D * svd.U.transpose();
  out.transform.scale = (svd.singular.asDiagonal() * D).trace() / var_p;
  out.transform.translation = mg - out.transform.scale * out.transform.rotation * mp;
  out.aligned = out.transform.apply(pred);
  return out;
}

// ---------------------------------------------------------------------------
// Rotation augmentation

struct RotatedView {
  Mat2 pixel_map;    // applied about the principal point
  Vec2 center;       // principal point
  Camera camera;     // pose replaced by Rot(a) * T

  Vec2 map(const Vec2& p) const { return center + pixel_map * (p - center); }
};

/// In-plane image rotation by `angle` radians expressed as a new extrinsic.
/// With fx == fy the pixel map is exactly the 2D rotation rot(angle).
inline RotatedView rotate_augment(const Camera& camera, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  Mat3 rot3;
  rot3 << c, -s, 0, s, c, 0, 0, 0, 1;
  Mat4 rot4 = Mat4::Identity();
  rot4.topLeftCorner<3, 3>() = rot3;
  RotatedView out;
  out.camera = camera;
  out.camera.pose.T = rot4 * camera.pose.T;
  const double fx = camera.intrinsics.fx(), fy = camera.intrinsics.fy();
  out.pixel_map << c, -s * fx / fy, s * fy / fx, c;
  out.center = {camera.intrinsics.cx(), camera.intrinsics.cy()};
  return out;
}

// ---------------------------------------------------------------------------
// Mirroring across camera 0's Y-Z plane

inline Points3 mirror_points(const Points3& points) {
  Points3 out = points;
  out.col(0) = -out.col(0);
  return out;
}

/// u -> W - 1 - u.
inline Vec2 flip_u(const Vec2& p, int width) { return {static_cast<double>(width - 1) - p.x(), p.y()}; }

inline Camera mirror_camera(const Camera& cam) {
  Mat4 S = Mat4::Identity();
  S(0, 0) = -1;
  Camera out = cam;
  out.pose.T = S * cam.pose.T * S;
  out.intrinsics.K(0, 2) = static_cast<double>(cam.width - 1) - cam.intrinsics.cx();
  return out;
}

/// Conjugates every pose with the X reflection and flips images horizontally.
inline Rig mirror_rig(const Rig& rig) {
  Rig out;
  out.cameras.reserve(rig.size());
  for (const auto& c : rig.cameras) out.cameras.push_back(mirror_camera(c));
  return out;
}

}  // namespace poemkit
