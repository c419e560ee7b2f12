#include <gtest/gtest.h>

#include <chrono>
#include <numbers>

#include "poemkit/fitting.hpp"
#include "test_support.hpp"

using namespace poemkit;

namespace {

std::vector<KeypointView> render_views(const Points3& kp, const std::vector<Camera>& cams, Rng* noise_rng = nullptr,
                                       double noise_px = 0.0) {
  std::vector<KeypointView> views;
  for (const auto& cam : cams) {
    Points2 px = project(kp, cam).pixels;
    if (noise_rng) {
      for (Eigen::Index i = 0; i < px.rows(); ++i)
        for (int c = 0; c < 2; ++c) px(i, c) += noise_rng->normal(0.0, noise_px);
    }
    views.push_back({cam, px, {}});
  }
  return views;
}

std::vector<Camera> cameras(Rng& rng, int n, const Vec3& target) {
  std::vector<Camera> cams;
  for (int i = 0; i < n; ++i) cams.push_back(poemkit::testing::random_camera(rng, target));
  return cams;
}

double mpjpe(const Points3& a, const Points3& b) { return (a - b).rowwise().norm().mean(); }

const ToyHandModel& model77() {
  static const ToyHandModel m = make_toy_hand_model(77);
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Template and model

TEST(HandTemplate, QueryCountFollowsVertexCount) {
  EXPECT_EQ(make_hand_template(77).n_points(), 98);
  EXPECT_EQ(make_hand_template(5).n_points(), 26);
  EXPECT_EQ(make_hand_template(778).n_points(), 799);
  EXPECT_THROW(make_hand_template(0), ConfigError);
}

TEST(HandTemplate, RootAtOriginAndDeterministic) {
  const auto a = make_hand_template(77), b = make_hand_template(77);
  EXPECT_EQ(a.joints.row(kRootKeypoint).norm(), 0.0);
  EXPECT_EQ(a.vertices, b.vertices);
  for (const auto& f : a.faces)
    for (int v : f) {
      EXPECT_GE(v, 0);
      EXPECT_LT(v, 77);
    }
  // hand fits comfortably inside a 10 cm ball around the root
  EXPECT_LT(a.points().rowwise().norm().maxCoeff(), 0.1);
}

TEST(HandTemplate, SkeletonIndexing) {
  for (int j = 0; j < kNumJoints; ++j) EXPECT_EQ(joint_of_keypoint(keypoint_of_joint(j)), j);
  EXPECT_EQ(keypoint_of_joint(7), 9);
  EXPECT_EQ(joint_parent(7), 0);
  EXPECT_EQ(joint_parent(9), 8);
  EXPECT_EQ(joint_of_keypoint(4), -1);
}

TEST(ToyHandModel, SkinningRowsSumToOne) {
  for (int n : {5, 77, 778}) {
    const auto m = make_toy_hand_model(n);
    EXPECT_EQ(m.skinning_weights.rows(), n);
    EXPECT_LT((m.skinning_weights.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-9);
    EXPECT_GE(m.skinning_weights.minCoeff(), 0.0);
  }
}

TEST(ToyHandModel, ShapeDirectionsZeroMean) {
  const auto& m = model77();
  ASSERT_EQ(m.shape_basis.rows(), kNumShape);
  for (int k = 0; k < kNumShape; ++k) {
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (int i = 0; i < m.hand.n_vertices(); ++i) mean += m.shape_basis.row(k).segment<3>(3 * i).transpose();
    EXPECT_LT((mean / m.hand.n_vertices()).norm(), 1e-12) << "direction " << k;
    EXPECT_GT(m.shape_basis.row(k).norm(), 1e-3) << "direction " << k;
  }
}

// ---------------------------------------------------------------------------
// lbs_forward

TEST(LbsForward, RestPoseIsTemplate) {
  const auto& m = model77();
  const auto mesh = pose_hand(m, HandPose{});
  EXPECT_LT((mesh.vertices - m.hand.vertices).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((mesh.keypoints - m.hand.joints).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(LbsForward, RootTranslatesEverything) {
  const auto& m = model77();
  Rng rng(3);
  HandPose p = sample_pose(rng);
  const auto base = pose_hand(m, p);
  p.root = Vec3(0.1, 0, 0);
  const auto moved = pose_hand(m, p);
  const Eigen::RowVector3d d(0.1, 0, 0);
  EXPECT_LT((moved.vertices.rowwise() - d - base.vertices).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((moved.keypoints.rowwise() - d - base.keypoints).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((moved.keypoints.row(kRootKeypoint) - d).norm(), 1e-12);
}

TEST(LbsForward, SingleJointBendIsRigidAboutJoint) {
  const auto& m = model77();
  HandPose p;
  p.theta(7, 0) = std::numbers::pi / 2;  // middle MCP flexion
  const auto mesh = pose_hand(m, p);
  const Vec3 pivot = m.hand.joints.row(9).transpose();
  const Mat3 R = Eigen::AngleAxisd(std::numbers::pi / 2, Vec3::UnitX()).toRotationMatrix();
  for (int k : {10, 11, 12}) {
    const Vec3 expect = R * (m.hand.joints.row(k).transpose() - pivot) + pivot;
    EXPECT_LT((mesh.keypoints.row(k).transpose() - expect).norm(), 1e-12) << "keypoint " << k;
  }
  int rigid = 0;
  for (int v = 0; v < m.hand.n_vertices(); ++v) {
    const double chain = m.skinning_weights(v, 7) + m.skinning_weights(v, 8) + m.skinning_weights(v, 9);
    if (chain < 1.0 - 1e-12) continue;
    ++rigid;
    const Vec3 expect = R * (m.hand.vertices.row(v).transpose() - pivot) + pivot;
    EXPECT_LT((mesh.vertices.row(v).transpose() - expect).norm(), 1e-12) << "vertex " << v;
  }
  EXPECT_GT(rigid, 3);
  // other fingers untouched
  for (int k : {5, 6, 7, 8, 13, 17})
    EXPECT_LT((mesh.keypoints.row(k) - m.hand.joints.row(k)).norm(), 1e-15);
}

TEST(LbsForward, BonesKeepLengthUnderPose) {
  const auto& m = model77();
  Rng rng(11);
  const HandPose p = sample_pose(rng, Vec3(0, 0, 0.5));
  HandPose shaped;
  shaped.beta = p.beta;
  const auto rest = pose_hand(m, shaped);
  const auto posed = pose_hand(m, p);
  for (int k = 1; k < kNumKeypoints; ++k) {
    const int parent = (k - 1) % 4 == 0 ? 0 : k - 1;
    EXPECT_NEAR((posed.keypoints.row(k) - posed.keypoints.row(parent)).norm(),
                (rest.keypoints.row(k) - rest.keypoints.row(parent)).norm(), 1e-12);
  }
}

TEST(LbsForward, ShapeErrors) {
  const auto& m = model77();
  EXPECT_THROW(lbs_forward(m, Tensor::zeros({15, 3}), Tensor::zeros({10}), Tensor::zeros({3})), ShapeError);
  EXPECT_THROW(lbs_forward(m, Tensor::zeros({16, 3}), Tensor::zeros({9}), Tensor::zeros({3})), ShapeError);
}

TEST(LbsForward, Gradcheck) {
  const auto m = make_toy_hand_model(5);
  Rng rng(5);
  const HandPose p = sample_pose(rng, Vec3(0.01, 0.02, 0.5));
  std::vector<Tensor> inputs{to_tensor(p.theta, true), reshape(to_tensor(p.beta), {kNumShape}), reshape(to_tensor(p.root), {3})};
  inputs[1].set_requires_grad(true);
  inputs[2].set_requires_grad(true);
  Tensor wv = to_tensor(poemkit::testing::random_points(rng, 5, Vec3::Zero(), 1.0));
  Tensor wk = to_tensor(poemkit::testing::random_points(rng, kNumKeypoints, Vec3::Zero(), 1.0));
  auto fn = [&](const std::vector<Tensor>& in) {
    const auto out = lbs_forward(m, in[0], in[1], in[2]);
    return sum(mul(out.vertices, wv)) + sum(mul(out.keypoints, wk));
  };
  EXPECT_LT(gradcheck<double>(fn, inputs), 1e-6);
}

TEST(Rodrigues, MatchesEigenAndIsStableAtZero) {
  Rng rng(2);
  Eigen::Matrix<double, 4, 3, Eigen::RowMajor> w;
  w.setZero();
  for (int i = 1; i < 4; ++i) w.row(i) = (rng.uniform(0.1, 3.0) * poemkit::testing::random_unit(rng)).transpose();
  const auto R = rodrigues(to_tensor(w));
  for (int i = 0; i < 4; ++i) {
    const Vec3 v = w.row(i).transpose();
    const Mat3 expect = v.norm() > 0 ? Eigen::AngleAxisd(v.norm(), v.normalized()).toRotationMatrix() : Mat3::Identity();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(R.at({static_cast<std::size_t>(i), static_cast<std::size_t>(r), static_cast<std::size_t>(c)}), expect(r, c), 1e-14);
  }
  // gradient at the origin is finite and matches finite differences
  std::vector<Tensor> in{Tensor::zeros({1, 3})};
  in[0].set_requires_grad(true);
  Tensor wts({1, 3, 3}, {0.3, -1.1, 0.7, 0.2, 0.5, -0.4, 1.3, 0.1, -0.9});
  EXPECT_LT(gradcheck<double>([&](const std::vector<Tensor>& x) { return sum(mul(rodrigues(x[0]), wts)); }, in), 1e-6);
}

// ---------------------------------------------------------------------------
// Losses

TEST(Loss2d, ExactObservationsGiveZero) {
  const auto& m = model77();
  Rng rng(4);
  const auto mesh = pose_hand(m, sample_pose(rng, Vec3(0, 0, 0.6)));
  const auto views = render_views(mesh.keypoints, cameras(rng, 3, Vec3(0, 0, 0.6)));
  EXPECT_LT(loss_2d(to_tensor(mesh.keypoints), views).item(), 1e-20);
}

TEST(Loss2d, SingleOffsetClosedForm) {
  const auto& m = model77();
  Rng rng(6);
  const auto mesh = pose_hand(m, sample_pose(rng, Vec3(0, 0, 0.6)));
  auto views = render_views(mesh.keypoints, cameras(rng, 2, Vec3(0, 0, 0.6)));
  views[1].pixels(4, 0) += 3;
  views[1].pixels(4, 1) += 4;
  EXPECT_NEAR(loss_2d(to_tensor(mesh.keypoints), views).item(), 25.0 / 42.0, 1e-9);
  // masking two keypoints in view 0 changes the denominator only
  views[0].valid.assign(kNumKeypoints, true);
  views[0].valid[0] = views[0].valid[1] = false;
  views[0].pixels(0, 0) += 100;  // masked, ignored
  EXPECT_NEAR(loss_2d(to_tensor(mesh.keypoints), views).item(), 25.0 / 40.0, 1e-9);
}

TEST(Loss2d, NoValidObservationsIsAnError) {
  Rng rng(1);
  KeypointView v{poemkit::testing::random_camera(rng), Points2::Zero(kNumKeypoints, 2), std::vector<bool>(kNumKeypoints, false)};
  EXPECT_THROW(loss_2d(Tensor::zeros({21, 3}), {v}), DegenerateError);
}

TEST(Loss2d, GradcheckRoot) {
  const auto& m = model77();
  Rng rng(8);
  const HandPose p = sample_pose(rng, Vec3(0, 0, 0.6));
  const auto mesh = pose_hand(m, p);
  auto views = render_views(mesh.keypoints, cameras(rng, 3, Vec3(0, 0, 0.6)), &rng, 2.0);
  std::vector<Tensor> in{reshape(to_tensor(Vec3(0.003, -0.002, 0.604)), {3})};
  in[0].set_requires_grad(true);
  const auto theta = to_tensor(p.theta);
  const auto beta = reshape(to_tensor(p.beta), {kNumShape});
  auto fn = [&](const std::vector<Tensor>& x) { return loss_2d(lbs_forward(m, theta, beta, x[0]).keypoints, views); };
  EXPECT_LT(gradcheck<double>(fn, in, 1e-7), 1e-4);
}

TEST(LossKin, InsideLimitsIsZeroWithZeroGradient) {
  const auto& m = model77();
  Rng rng(9);
  Tensor theta = to_tensor(sample_pose(rng).theta, true);
  theta.mutable_data()[0] = 5.0;  // global orientation is unbounded
  TapeScope scope;
  const auto l = loss_kin(theta, m.limits);
  EXPECT_EQ(l.item(), 0.0);
  backward(l);
  for (double g : theta.grad()) EXPECT_EQ(g, 0.0);
}

TEST(LossKin, QuadraticHinge) {
  const auto& m = model77();
  Tensor theta = Tensor::zeros({16, 3});
  theta.mutable_data()[3 * 4 + 0] = 1.9;   // flexion above 1.8
  EXPECT_NEAR(loss_kin(theta, m.limits).item(), 0.01, 1e-12);
  theta.mutable_data()[3 * 5 + 2] = -0.5;  // abduction below -0.4
  EXPECT_NEAR(loss_kin(theta, m.limits).item(), 0.02, 1e-12);
}

// ---------------------------------------------------------------------------
// fit

TEST(Fit, ZeroIterationsReturnsInitialization) {
  const auto& m = model77();
  Rng rng(10);
  const Vec3 root(0.01, 0.0, 0.6);
  const auto mesh = pose_hand(m, sample_pose(rng, root));
  const auto views = render_views(mesh.keypoints, cameras(rng, 3, root));
  FitOptions opt;
  opt.iterations = 0;
  const auto r = fit(m, views, opt);
  EXPECT_TRUE(r.loss_trace.empty());
  EXPECT_EQ(r.pose.theta.norm(), 0.0);
  EXPECT_EQ(r.pose.beta.norm(), 0.0);
  EXPECT_LT((r.pose.root - triangulate_root(views)).norm(), 1e-15);
}

TEST(Fit, NoiselessRecovery) {
  const auto& m = model77();
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const Vec3 root(rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02), 0.6);
    const auto mesh = pose_hand(m, sample_pose(rng, root));
    const auto cams = cameras(rng, 4, root);
    const auto views = render_views(mesh.keypoints, cams);
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = fit(m, views);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EXPECT_LT(secs, 10.0);
    EXPECT_LT(mpjpe(r.mesh.keypoints, mesh.keypoints), 2e-3) << "trial " << trial;
    EXPECT_LE(r.final_loss, r.initial_loss);
    EXPECT_EQ(r.loss_trace.size(), 300u);
    for (const auto& cam : cams) {
      const auto px = project(r.mesh.keypoints, cam).pixels;
      EXPECT_LT((px - project(mesh.keypoints, cam).pixels).rowwise().norm().maxCoeff(), 0.5) << "trial " << trial;
    }
  }
}

TEST(Fit, MoreViewsBeatFewerUnderNoise) {
  const auto& m = model77();
  Rng rng(13);
  double err2 = 0, err4 = 0;
  constexpr int kTrials = 50;
  for (int trial = 0; trial < kTrials; ++trial) {
    const Vec3 root(0, 0, 0.6);
    const auto mesh = pose_hand(m, sample_pose(rng, root));
    const auto cams = cameras(rng, 4, root);
    const auto views4 = render_views(mesh.keypoints, cams, &rng, 1.0);
    const std::vector<KeypointView> views2(views4.begin(), views4.begin() + 2);
    err4 += mpjpe(fit(m, views4).mesh.keypoints, mesh.keypoints);
    err2 += mpjpe(fit(m, views2).mesh.keypoints, mesh.keypoints);
  }
  EXPECT_LT(err4, err2);
}

TEST(Fit, SingleViewNeedsFixedRoot) {
  const auto& m = model77();
  Rng rng(14);
  const Vec3 root(0, 0, 0.6);
  const auto mesh = pose_hand(m, sample_pose(rng, root));
  const auto views = render_views(mesh.keypoints, cameras(rng, 1, root));
  EXPECT_THROW(fit(m, views), DegenerateError);
  FitOptions opt;
  opt.fixed_root = root;
  opt.iterations = 50;
  const auto r = fit(m, views, opt);
  EXPECT_EQ(r.pose.root, root);
  EXPECT_LE(r.final_loss, r.initial_loss);
}

TEST(Fit, CoincidentCamerasPropagateDegeneracy) {
  const auto& m = model77();
  Rng rng(15);
  const Vec3 root(0, 0, 0.6);
  const auto mesh = pose_hand(m, sample_pose(rng, root));
  const Camera cam = poemkit::testing::random_camera(rng, root);
  EXPECT_THROW(fit(m, render_views(mesh.keypoints, {cam, cam})), DegenerateError);
}
