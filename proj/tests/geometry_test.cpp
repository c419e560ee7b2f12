#include <gtest/gtest.h>

#include <Eigen/SVD>
#include <chrono>
#include <numbers>
#include <vector>

#include "poemkit/geometry.hpp"
#include "test_support.hpp"

namespace poemkit {
namespace {

using testing::random_camera;
using testing::random_points;
using testing::random_rotation;

Camera simple_camera() {
  Camera cam;
  cam.intrinsics = CameraIntrinsics::from(100, 100, 50, 50);
  cam.width = cam.height = 100;
  return cam;
}

TEST(Project, OpticalAxisHitsPrincipalPoint) {
  Points3 p(2, 3);
  p << 0, 0, 1, 0.1, 0, 1;
  auto r = project(p, simple_camera());
  EXPECT_DOUBLE_EQ(r.pixels(0, 0), 50);
  EXPECT_DOUBLE_EQ(r.pixels(0, 1), 50);
  EXPECT_DOUBLE_EQ(r.pixels(1, 0), 60);
  EXPECT_DOUBLE_EQ(r.pixels(1, 1), 50);
  EXPECT_EQ(r.in_front[0], 1);
}

TEST(Project, BehindCameraIsFlagged) {
  Points3 p(1, 3);
  p << 0.1, 0.2, -1;
  auto r = project(p, simple_camera());
  EXPECT_EQ(r.in_front[0], 0);
  EXPECT_LT(r.depth(0), 0);
}

TEST(Project, SatisfiesLinearTriangulationRows) {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const Camera cam = random_camera(rng);
    const Vec3 P = random_points(rng, 1, Vec3(0, 0, 0.6), 0.1).row(0).transpose();
    const Vec2 p = project_point(P, cam);
    const Mat34 M = cam.projection();
    const Eigen::Vector4d h = P.homogeneous();
    const double scale = M.norm() * h.norm();
    EXPECT_NEAR((p.x() * M.row(2).dot(h) - M.row(0).dot(h)) / scale, 0.0, 1e-9);
    EXPECT_NEAR((p.y() * M.row(2).dot(h) - M.row(1).dot(h)) / scale, 0.0, 1e-9);
  }
}

TEST(CameraTypes, ValidationRejectsBadInput) {
  EXPECT_THROW(CameraIntrinsics::from(-1, 100, 0, 0), ConfigError);
  CameraPose pose;
  pose.T(0, 0) = 2;
  EXPECT_THROW(pose.validate(), ConfigError);
  Rng rng(1);
  EXPECT_NO_THROW(random_camera(rng).pose.validate());
  EXPECT_NEAR(random_camera(rng).projection().fullPivLu().rank(), 3, 0);
}

TEST(JacobiSvd, AgreesWithEigen) {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 2 + static_cast<int>(rng.below(12));
    const int n = 1 + static_cast<int>(rng.below(5));
    Eigen::MatrixXd A(m, n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) A(i, j) = rng.normal();
    const Svd ours = jacobi_svd(A);
    Eigen::JacobiSVD<Eigen::MatrixXd> ref(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto k = std::min(m, n);
    for (int i = 0; i < k; ++i) EXPECT_NEAR(ours.singular(i), ref.singularValues()(i), 1e-12 * ref.singularValues()(0));
    const Eigen::MatrixXd back = ours.U * ours.singular.asDiagonal() * ours.V.transpose();
    EXPECT_LT((back - A).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((ours.V.transpose() * ours.V - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

std::vector<Observation> observe(const Vec3& P, const std::vector<Camera>& cams) {
  std::vector<Observation> obs;
  for (const auto& c : cams) obs.push_back({project_point(P, c), c});
  return obs;
}

TEST(Triangulate, TwoNoiselessViews) {
  Rng rng(31);
  const Vec3 P(0.1, -0.05, 0.6);
  auto obs = observe(P, {random_camera(rng), random_camera(rng)});
  const auto r = triangulate_dlt(obs);
  EXPECT_LT((r.point - P).norm(), 1e-8);
  EXPECT_FALSE(r.near_singular);
}

TEST(Triangulate, EightNoiselessViewsAreConsistent) {
  Rng rng(32);
  const Vec3 P(0.1, -0.05, 0.6);
  std::vector<Camera> cams;
  for (int i = 0; i < 8; ++i) cams.push_back(random_camera(rng));
  EXPECT_LT((triangulate_dlt(observe(P, cams)).point - P).norm(), 1e-8);
}

TEST(Triangulate, SameCameraTwiceIsDegenerate) {
  Rng rng(33);
  const Camera c = random_camera(rng);
  const Vec3 P(0.0, 0.0, 0.6);
  EXPECT_THROW(triangulate_dlt(observe(P, {c, c})), DegenerateError);
  EXPECT_THROW(triangulate_dlt(observe(P, {c})), DegenerateError);
}

TEST(Triangulate, ErrorShrinksWithMoreViews) {
  Rng rng(34);
  const int trials = 300;
  std::vector<double> mean_err(9, 0.0);
  for (int t = 0; t < trials; ++t) {
    std::vector<Camera> cams;
    for (int i = 0; i < 8; ++i) cams.push_back(random_camera(rng));
    const Vec3 P = random_points(rng, 1, Vec3(0, 0, 0.6), 0.05).row(0).transpose();
    std::vector<Observation> noisy;
    for (const auto& c : cams) noisy.push_back({project_point(P, c) + Vec2(rng.normal(), rng.normal()), c});
    for (int n = 2; n <= 8; ++n) {
      auto r = triangulate_dlt(std::span<const Observation>(noisy.data(), static_cast<std::size_t>(n)));
      mean_err[static_cast<std::size_t>(n)] += (r.point - P).norm() / trials;
    }
  }
  for (int n = 3; n <= 8; ++n) EXPECT_LE(mean_err[static_cast<std::size_t>(n)], mean_err[static_cast<std::size_t>(n - 1)]) << n;
}

TEST(Procrustes, IdentityInput) {
  Rng rng(41);
  const Points3 gt = random_points(rng, 21, Vec3::Zero(), 0.1);
  const auto r = procrustes_align(gt, gt);
  EXPECT_NEAR(r.transform.scale, 1.0, 1e-12);
  EXPECT_LT((r.transform.rotation - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(r.transform.translation.norm(), 1e-12);
  EXPECT_LT((r.aligned - gt).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Procrustes, RecoversExactSimilarity) {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const Points3 gt = random_points(rng, 21, Vec3::Zero(), 0.1);
    Similarity s{2.0, random_rotation(rng), Vec3(rng.normal(), rng.normal(), rng.normal())};
    const auto r = procrustes_align(s.apply(gt), gt);
    EXPECT_LT((r.aligned - gt).rowwise().norm().maxCoeff(), 1e-10);
    EXPECT_NEAR(r.transform.rotation.determinant(), 1.0, 1e-12);
  }
}

TEST(Procrustes, NeverWorseThanUnaligned) {
  Rng rng(43);
  for (int trial = 0; trial < 50; ++trial) {
    const Points3 gt = random_points(rng, 21, Vec3::Zero(), 0.1);
    Points3 pred = gt;
    for (int i = 0; i < pred.rows(); ++i)
      for (int j = 0; j < 3; ++j) pred(i, j) += 0.01 * rng.normal();
    const double unaligned = (pred - gt).rowwise().norm().mean();
    const double aligned = (procrustes_align(pred, gt).aligned - gt).rowwise().squaredNorm().sum();
    EXPECT_LE(aligned, (pred - gt).rowwise().squaredNorm().sum() + 1e-15);
    EXPECT_GE(unaligned, 0.0);
  }
}

TEST(Procrustes, ErrorInvariantToSimilarityOfPrediction) {
  Rng rng(44);
  const Points3 gt = random_points(rng, 30, Vec3::Zero(), 0.1);
  Points3 pred = gt;
  for (int i = 0; i < pred.rows(); ++i) pred.row(i) += 0.01 * Eigen::RowVector3d(rng.normal(), rng.normal(), rng.normal());
  const double base = (procrustes_align(pred, gt).aligned - gt).squaredNorm();
  for (int trial = 0; trial < 10; ++trial) {
    Similarity s{rng.uniform(0.5, 3), random_rotation(rng), Vec3(rng.normal(), rng.normal(), rng.normal())};
    EXPECT_NEAR((procrustes_align(s.apply(pred), gt).aligned - gt).squaredNorm(), base, 1e-12);
  }
}

TEST(Procrustes, ExcludesReflections) {
  Rng rng(45);
  const Points3 gt = random_points(rng, 10, Vec3::Zero(), 0.1);
  const auto r = procrustes_align(mirror_points(gt), gt);
  EXPECT_NEAR(r.transform.rotation.determinant(), 1.0, 1e-12);
}

TEST(Procrustes, ZeroVarianceIsDegenerate) {
  Points3 flat = Points3::Zero(5, 3);
  Rng rng(46);
  EXPECT_THROW(procrustes_align(flat, random_points(rng, 5, Vec3::Zero(), 1)), DegenerateError);
}

TEST(RotateAugment, ZeroAngleIsIdentity) {
  Rng rng(51);
  const Camera cam = random_camera(rng);
  const auto r = rotate_augment(cam, 0.0);
  EXPECT_EQ(r.camera.pose.T, cam.pose.T);
}

TEST(RotateAugment, HalfTurnFixesPrincipalPoint) {
  Camera cam = simple_camera();
  const auto r = rotate_augment(cam, std::numbers::pi);
  const Vec2 p = project_point(Vec3(0, 0, 2), r.camera);
  EXPECT_NEAR(p.x(), 50, 1e-12);
  EXPECT_NEAR(p.y(), 50, 1e-12);
}

TEST(RotateAugment, CommutesWithProjection) {
  Rng rng(52);
  for (int trial = 0; trial < 10; ++trial) {
    const Camera cam = random_camera(rng);
    const double a = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const auto r = rotate_augment(cam, a);
    const Points3 pts = random_points(rng, 100, Vec3(0, 0, 0.6), 0.1);
    const auto before = project(pts, cam);
    const auto after = project(pts, r.camera);
    for (int i = 0; i < 100; ++i) {
      const Vec2 expect = r.map(before.pixels.row(i).transpose());
      EXPECT_LT((expect - after.pixels.row(i).transpose()).norm(), 1e-9);
    }
  }
}

Rig random_rig(Rng& rng, int n) {
  Rig rig;
  for (int i = 0; i < n; ++i) rig.cameras.push_back(random_camera(rng));
  const CameraPose anchor = rig.cameras.front().pose;
  for (auto& c : rig.cameras) c.pose = reanchor(c.pose, anchor);
  return rig;
}

TEST(Mirror, IsAnInvolution) {
  Rng rng(61);
  const Rig rig = random_rig(rng, 5);
  const Rig back = mirror_rig(mirror_rig(rig));
  for (std::size_t i = 0; i < rig.size(); ++i) {
    EXPECT_LT((back.cameras[i].pose.T - rig.cameras[i].pose.T).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((back.cameras[i].intrinsics.K - rig.cameras[i].intrinsics.K).cwiseAbs().maxCoeff(), 1e-12);
  }
  const Points3 p = random_points(rng, 7, Vec3::Zero(), 1);
  EXPECT_EQ(mirror_points(mirror_points(p)), p);
}

TEST(Mirror, ReflectsWorldX) {
  Points3 p(1, 3);
  p << 0.3, -0.2, 0.7;
  const Points3 m = mirror_points(p);
  EXPECT_EQ(m(0, 0), -0.3);
  EXPECT_EQ(m(0, 1), -0.2);
  EXPECT_EQ(m(0, 2), 0.7);
}

TEST(Mirror, CommutesWithProjection) {
  Rng rng(62);
  const Rig rig = random_rig(rng, 4);
  const Rig mirrored = mirror_rig(rig);
  EXPECT_TRUE(mirrored.canonical());
  const Points3 pts = random_points(rng, 50, Vec3(0, 0, 0.6), 0.1);
  const Points3 mpts = mirror_points(pts);
  for (std::size_t c = 0; c < rig.size(); ++c) {
    const auto a = project(mpts, mirrored.cameras[c]);
    const auto b = project(pts, rig.cameras[c]);
    for (int i = 0; i < pts.rows(); ++i) {
      const Vec2 expect = flip_u(b.pixels.row(i).transpose(), rig.cameras[c].width);
      EXPECT_LT((a.pixels.row(i).transpose() - expect).norm(), 1e-9);
    }
  }
}

TEST(Reanchor, PreservesProjections) {
  Rng rng(71);
  std::vector<Camera> cams;
  for (int i = 0; i < 4; ++i) cams.push_back(random_camera(rng));
  const Points3 pts = random_points(rng, 20, Vec3(0, 0, 0.6), 0.1);
  const CameraPose anchor = cams[2].pose;
  Points3 moved(pts.rows(), 3);
  for (int i = 0; i < pts.rows(); ++i)
    moved.row(i) = (anchor.rotation() * pts.row(i).transpose() + anchor.translation()).transpose();
  for (const auto& c : cams) {
    Camera c2 = c;
    c2.pose = reanchor(c.pose, anchor);
    const auto a = project(pts, c), b = project(moved, c2);
    EXPECT_LT((a.pixels - b.pixels).cwiseAbs().maxCoeff(), 1e-9);
  }
}

}  // namespace
}  // namespace poemkit
