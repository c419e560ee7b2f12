#include <gtest/gtest.h>

#include <filesystem>

#include "poemkit/synth.hpp"
#include "test_support.hpp"

using namespace poemkit;

namespace {

BackboneConfig backbone() {
  BackboneConfig c;
  c.channels = 8;
  c.seed = 4;
  return c;
}

const ToyHandModel& toy() {
  static const ToyHandModel m = make_toy_hand_model(30);
  return m;
}

FrameBundle sample_frame(std::uint64_t seed, int views = 4, Handedness h = Handedness::Right) {
  RigOptions o;
  o.views = views;
  const auto rig = make_rig(o, seed);
  return render_frame(make_scene(seed + 100, rig_center(o), h), rig, toy(), backbone());
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

}  // namespace

TEST(MakeRig, SingleCameraIsIdentityAnchored) {
  RigOptions o;
  o.views = 1;
  const auto rig = make_rig(o, 3);
  ASSERT_EQ(rig.size(), 1u);
  EXPECT_TRUE(rig.canonical(0.0));
}

TEST(MakeRig, OriginProjectsIntoCentralHalf) {
  for (int n = 1; n <= 8; ++n) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      RigOptions o;
      o.views = n;
      const auto rig = make_rig(o, seed);
      EXPECT_TRUE(rig.canonical());
      for (const auto& c : rig.cameras) {
        const Vec2 px = project_point(rig_center(o), c);
        EXPECT_GT(px.x(), 0.25 * c.width);
        EXPECT_LT(px.x(), 0.75 * c.width);
        EXPECT_GT(px.y(), 0.25 * c.height);
        EXPECT_LT(px.y(), 0.75 * c.height);
        EXPECT_NEAR((c.center() - rig_center(o)).norm(), o.radius, 1e-12);
      }
    }
  }
}

TEST(MakeRig, DeterministicAndRejectsEmpty) {
  RigOptions o;
  const auto a = make_rig(o, 7), b = make_rig(o, 7), c = make_rig(o, 8);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.cameras[i].pose.T, b.cameras[i].pose.T);
  EXPECT_NE(a.cameras[1].pose.T, c.cameras[1].pose.T);
  o.views = 0;
  EXPECT_THROW(make_rig(o, 1), ConfigError);
}

TEST(Scene, WithinJointLimitsAndNearCenter) {
  const auto limits = default_joint_limits();
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto sc = make_scene(s, Vec3(0, 0, 0.6));
    for (int j = 1; j < kNumJoints; ++j)
      for (int a = 0; a < 3; ++a) {
        EXPECT_GE(sc.pose.theta(j, a), limits.lower[static_cast<std::size_t>(j)](a));
        EXPECT_LE(sc.pose.theta(j, a), limits.upper[static_cast<std::size_t>(j)](a));
      }
    EXPECT_LE((sc.pose.root - Vec3(0, 0, 0.6)).cwiseAbs().maxCoeff(), 0.02);
  }
}

TEST(RenderFrame, GroundTruthMatchesPosedHand) {
  const auto f = sample_frame(1);
  RigOptions o;
  const auto sc = make_scene(101, rig_center(o));
  const auto mesh = pose_hand(toy(), sc.pose);
  EXPECT_EQ(f.gt_points.rows(), 51);
  EXPECT_EQ(f.gt_vertices(), mesh.vertices);
  EXPECT_EQ(f.gt_keypoints(), mesh.keypoints);
  EXPECT_EQ(f.gt_root, Vec3(mesh.keypoints.row(kRootKeypoint).transpose()));
  ASSERT_EQ(f.features.size(), 4u);
  EXPECT_EQ(f.features[0].grid.shape(), (Shape{32, 32, 8}));
  EXPECT_EQ(f.heatmaps[0].grid.shape(), (Shape{32, 32}));
}

TEST(RenderFrame, Deterministic) {
  const auto a = sample_frame(2), b = sample_frame(2);
  for (std::size_t i = 0; i < a.views(); ++i) {
    EXPECT_EQ(max_abs_diff(a.features[i].grid, b.features[i].grid), 0.0);
    EXPECT_EQ(max_abs_diff(a.heatmaps[i].grid, b.heatmaps[i].grid), 0.0);
  }
}

TEST(RenderFrame, RootOutsideAllFrustaGivesZeroHeatmaps) {
  RigOptions o;
  const auto rig = make_rig(o, 3);
  auto sc = make_scene(5, rig_center(o));
  sc.pose.root = Vec3(5, 5, 0.6);
  const auto f = render_frame(sc, rig, toy(), backbone());
  for (const auto& h : f.heatmaps)
    for (double v : h.grid.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(estimate_root(f.heatmaps, f.rig), DegenerateError);
}

TEST(RandomizeViews, KeepAllIdentityIsUnchanged) {
  const auto f = sample_frame(4);
  const auto g = select_views(f, {0, 1, 2, 3});
  EXPECT_EQ(g.gt_points, f.gt_points);
  EXPECT_EQ(g.gt_root, f.gt_root);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(g.rig.cameras[i].pose.T, f.rig.cameras[i].pose.T);
    EXPECT_EQ(max_abs_diff(g.features[i].grid, f.features[i].grid), 0.0);
  }
}

TEST(RandomizeViews, ReanchoringPreservesProjectionsAndDistances) {
  for (std::uint64_t s = 0; s < 40; ++s) {
    const auto f = sample_frame(10 + s, 1 + static_cast<int>(s % 8));
    const auto g = randomize_views(f, s);
    ASSERT_GE(g.views(), 1u);
    ASSERT_LE(g.views(), f.views());
    EXPECT_TRUE(g.rig.canonical(0.0));
    // Match each kept view to its source by its feature grid.
    for (std::size_t i = 0; i < g.views(); ++i) {
      std::size_t src = f.views();
      for (std::size_t j = 0; j < f.views(); ++j)
        if (max_abs_diff(g.features[i].grid, f.features[j].grid) == 0.0) src = j;
      ASSERT_LT(src, f.views());
      const auto before = project(f.gt_points, f.rig.cameras[src]).pixels;
      const auto after = project(g.gt_points, g.rig.cameras[i]).pixels;
      EXPECT_LT((before - after).cwiseAbs().maxCoeff(), 1e-9);
      EXPECT_LT((project_point(f.gt_root, f.rig.cameras[src]) - project_point(g.gt_root, g.rig.cameras[i])).norm(), 1e-9);
    }
    for (int a = 0; a < 5; ++a)
      for (int b = 0; b < 5; ++b)
        EXPECT_NEAR((g.gt_points.row(a * 7) - g.gt_points.row(b * 9)).norm(),
                    (f.gt_points.row(a * 7) - f.gt_points.row(b * 9)).norm(), 1e-12);
  }
}

TEST(RandomizeViews, CountIsUniformOverOneToN) {
  const auto f = sample_frame(5);
  std::vector<int> counts(5, 0);
  for (std::uint64_t s = 0; s < 2000; ++s) counts[randomize_views(f, s).views()]++;
  EXPECT_EQ(counts[0], 0);
  for (int n = 1; n <= 4; ++n) EXPECT_NEAR(counts[static_cast<std::size_t>(n)], 500, 80);
}

TEST(RandomizeViews, SingleViewFrame) {
  const auto f = sample_frame(6);
  const auto g = select_views(f, {2});
  EXPECT_EQ(g.views(), 1u);
  EXPECT_TRUE(g.rig.canonical(0.0));
  EXPECT_THROW(select_views(f, {}), ConfigError);
  EXPECT_THROW(select_views(f, {7}), ConfigError);
}

TEST(Mirror, LeftSceneEqualsMirroredRightBundle) {
  RigOptions o;
  const auto rig = make_rig(o, 12);
  const auto right_scene = make_scene(40, rig_center(o));
  auto left_scene = right_scene;
  left_scene.handedness = Handedness::Left;
  left_scene.pose.root.x() = -right_scene.pose.root.x();
  const auto right = render_frame(right_scene, rig, toy(), backbone());
  const auto left = render_frame(left_scene, mirror_rig(rig), toy(), backbone());
  const auto mirrored = mirror_frame(right);
  EXPECT_EQ(mirrored.handedness, Handedness::Left);
  EXPECT_LT((left.gt_points - mirrored.gt_points).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((left.gt_root - mirrored.gt_root).cwiseAbs().maxCoeff(), 1e-15);
  for (std::size_t i = 0; i < rig.size(); ++i) {
    EXPECT_LT((left.rig.cameras[i].pose.T - mirrored.rig.cameras[i].pose.T).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT(max_abs_diff(left.features[i].grid, mirrored.features[i].grid), 1e-9);
    EXPECT_LT(max_abs_diff(left.heatmaps[i].grid, mirrored.heatmaps[i].grid), 1e-9);
  }
  // Mirroring twice is the identity.
  const auto back = mirror_frame(mirrored);
  EXPECT_EQ(back.gt_points, right.gt_points);
  EXPECT_EQ(max_abs_diff(back.features[1].grid, right.features[1].grid), 0.0);
}

TEST(BundleIo, RoundTripIsExact) {
  const auto f = sample_frame(7, 3, Handedness::Left);
  const auto dir = std::filesystem::temp_directory_path() / "poemkit_synth_bundle";
  std::filesystem::remove_all(dir);
  write_bundle(f, dir);
  const auto g = read_bundle(dir);
  EXPECT_EQ(g.handedness, Handedness::Left);
  EXPECT_EQ(g.gt_points, f.gt_points);
  EXPECT_EQ(g.gt_root, f.gt_root);
  ASSERT_EQ(g.views(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(g.rig.cameras[i].pose.T, f.rig.cameras[i].pose.T);
    EXPECT_EQ(g.rig.cameras[i].intrinsics.K, f.rig.cameras[i].intrinsics.K);
    EXPECT_EQ(max_abs_diff(g.features[i].grid, f.features[i].grid), 0.0);
    EXPECT_EQ(g.features[i].stride, 8);
  }
  std::filesystem::remove_all(dir);
}

TEST(BundleIo, ReportsBadFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "poemkit_synth_bad";
  std::filesystem::remove_all(dir);
  EXPECT_THROW(read_bundle(dir), IoError);
  const auto f = sample_frame(8, 2);
  write_bundle(f, dir);
  auto bytes = io::read_file(dir / "grid_1.bin");
  bytes.resize(bytes.size() - 3);
  io::write_file_atomic(dir / "grid_1.bin", bytes);
  EXPECT_THROW(read_bundle(dir), IoError);
  io::write_text_atomic(dir / "rig.json", "{not json");
  EXPECT_THROW(read_bundle(dir), ConfigError);
  std::filesystem::remove_all(dir);
}
