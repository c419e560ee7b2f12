#pragma once

// Differentiable skinning of the toy hand and multi-view keypoint fitting.

#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "poemkit/convert.hpp"
#include "poemkit/errors.hpp"
#include "poemkit/geometry.hpp"
#include "poemkit/hand.hpp"
#include "poemkit/nn.hpp"
#include "poemkit/rng.hpp"
#include "poemkit/tensor.hpp"

namespace poemkit {

/// Rotation matrices [J,3,3] from axis-angle rows [J,3].
/// R = I + a W + b W^2 with a = sin t / t and b = 2 sin^2(t/2) / t^2, which
/// stays accurate as t -> 0.
template <typename T>
BasicTensor<T> rodrigues(const BasicTensor<T>& w) {
  if (w.rank() != 2 || w.dim(1) != 3) throw ShapeError("rodrigues: expected [J,3], got " + shape_str(w.shape()));
  const std::size_t J = w.dim(0);
  const auto t = sqrt(shift(sum(square(w), 1, true), T(1e-20)));  // [J,1]
  const auto a = div(sin(t), t);
  const auto half = sin(scale(t, T(0.5)));
  const auto b = div(scale(square(half), T(2)), square(t));
  const auto x = slice(w, 1, 0, 1), y = slice(w, 1, 1, 2), z = slice(w, 1, 2, 3);
  const auto zero = BasicTensor<T>::zeros({J, 1});
  const auto W = reshape(concat<T>({zero, -z, y, z, zero, -x, -y, x, zero}, 1), {J, 3, 3});
  std::vector<T> eye(J * 9, T(0));
  for (std::size_t j = 0; j < J; ++j) eye[j * 9] = eye[j * 9 + 4] = eye[j * 9 + 8] = T(1);
  const BasicTensor<T> I({J, 3, 3}, std::move(eye));
  return I + mul(reshape(a, {J, 1, 1}), W) + mul(reshape(b, {J, 1, 1}), matmul(W, W));
}

template <typename T>
struct BasicHandOutput {
  BasicTensor<T> vertices;   // [n_vertices, 3]
  BasicTensor<T> keypoints;  // [21, 3]
};
using HandOutput = BasicHandOutput<double>;

namespace detail {
inline const std::array<std::array<std::size_t, 5>, 3>& joint_levels() {
  static const std::array<std::array<std::size_t, 5>, 3> levels = {{
      {1, 4, 7, 10, 13},
      {2, 5, 8, 11, 14},
      {3, 6, 9, 12, 15},
  }};
  return levels;
}
}  // namespace detail

/// Posed vertices and keypoints. theta [16,3] axis-angle (joint 0 is the
/// global orientation), beta [10], root [3]: the posed root keypoint lands
/// exactly on `root`.
template <typename T>
BasicHandOutput<T> lbs_forward(const ToyHandModel& model, const BasicTensor<T>& theta, const BasicTensor<T>& beta,
                               const BasicTensor<T>& root) {
  if (theta.shape() != Shape{kNumJoints, 3}) throw ShapeError("lbs_forward: theta must be [16,3], got " + shape_str(theta.shape()));
  if (beta.numel() != kNumShape) throw ShapeError("lbs_forward: beta must have 10 values, got " + shape_str(beta.shape()));
  if (root.numel() != 3) throw ShapeError("lbs_forward: root must have 3 values, got " + shape_str(root.shape()));
  const std::size_t nv = static_cast<std::size_t>(model.hand.n_vertices());
  const std::size_t np = nv + kNumKeypoints;

  // shape blend over [V; J]
  const auto rest = to_tensor<T>(model.hand.points());
  const auto basis = to_tensor<T>(model.shape_basis);
  const auto shaped = rest + reshape(matmul(reshape(beta, {1, kNumShape}), basis), {np, 3});
  const auto verts_rest = slice(shaped, 0, 0, nv);
  const auto kp_rest = slice(shaped, 0, nv, np);

  std::vector<std::size_t> joint_kp(kNumJoints);
  for (int j = 0; j < kNumJoints; ++j) joint_kp[static_cast<std::size_t>(j)] = static_cast<std::size_t>(keypoint_of_joint(j));
  const auto J = gather(kp_rest, joint_kp, {kNumJoints});  // [16,3]
  const auto R = rodrigues(theta);

  // forward kinematics one depth level at a time
  const std::array<std::size_t, 1> zero_idx{0};
  std::vector<BasicTensor<T>> G_parts{gather(R, zero_idx, {1})};
  std::vector<BasicTensor<T>> t_parts{gather(J, zero_idx, {1})};
  std::vector<std::size_t> order{0};
  std::array<std::size_t, 5> parent_pos{0, 0, 0, 0, 0};  // rows of the previous level
  BasicTensor<T> G_prev = G_parts[0], t_prev = t_parts[0];
  std::array<std::size_t, 5> prev_joints{0, 0, 0, 0, 0};
  for (const auto& level : detail::joint_levels()) {
    const auto Gp = gather(G_prev, parent_pos, {5});
    const auto tp = gather(t_prev, parent_pos, {5});
    const auto Jl = gather(J, level, {5});
    const auto Jp = gather(J, prev_joints, {5});
    const auto offset = reshape(Jl - Jp, {5, 3, 1});
    const auto t_l = reshape(matmul(Gp, offset), {5, 3}) + tp;
    const auto G_l = matmul(Gp, gather(R, level, {5}));
    G_parts.push_back(G_l);
    t_parts.push_back(t_l);
    order.insert(order.end(), level.begin(), level.end());
    G_prev = G_l;
    t_prev = t_l;
    prev_joints = level;
    parent_pos = {0, 1, 2, 3, 4};
  }
  std::vector<std::size_t> inverse(kNumJoints);
  for (std::size_t i = 0; i < order.size(); ++i) inverse[order[i]] = i;
  const auto G = gather(concat(G_parts, 0), inverse, {kNumJoints});  // [16,3,3]
  const auto t = gather(concat(t_parts, 0), inverse, {kNumJoints});  // [16,3]

  // skinning: v' = sum_j w_vj (G_j (v - J_j) + t_j)
  const auto rel = reshape(verts_rest, {1, nv, 3}) - reshape(J, {kNumJoints, 1, 3});
  const auto moved = matmul(rel, transpose(G)) + reshape(t, {kNumJoints, 1, 3});
  const Eigen::MatrixXd wt = model.skinning_weights.transpose();
  const auto weights = reshape(to_tensor<T>(wt), {kNumJoints, nv, 1});
  const auto verts = sum(mul(moved, weights), 0);

  // keypoints: joint origins plus fingertips carried by the distal joints
  const std::array<std::size_t, 5> dip{3, 6, 9, 12, 15};
  const std::array<std::size_t, 5> tip_kp{4, 8, 12, 16, 20};
  const auto tip_rel = reshape(gather(kp_rest, tip_kp, {5}) - gather(J, dip, {5}), {5, 3, 1});
  const auto tips = reshape(matmul(gather(G, dip, {5}), tip_rel), {5, 3}) + gather(t, dip, {5});
  std::vector<std::size_t> kp_src(kNumKeypoints);
  for (int k = 0; k < kNumKeypoints; ++k) {
    const int j = joint_of_keypoint(k);
    kp_src[static_cast<std::size_t>(k)] = j >= 0 ? static_cast<std::size_t>(j) : kNumJoints + static_cast<std::size_t>((k - 1) / 4);
  }
  const auto kps = gather(concat<T>({t, tips}, 0), kp_src, {kNumKeypoints});

  const auto offset = reshape(root, {1, 3}) - slice(kps, 0, kRootKeypoint, kRootKeypoint + 1);
  return {verts + offset, kps + offset};
}

/// Non-differentiable convenience wrapper.
struct HandPose {
  Eigen::Matrix<double, kNumJoints, 3, Eigen::RowMajor> theta = decltype(theta)::Zero();
  Eigen::Matrix<double, kNumShape, 1> beta = decltype(beta)::Zero();
  Vec3 root = Vec3::Zero();
};

/// Plausible random pose near the rest orientation, inside the joint limits.
inline HandPose sample_pose(Rng& rng, const Vec3& root = Vec3::Zero()) {
  HandPose p;
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  p.theta.row(0) = (rng.uniform(0.0, 0.5) * axis.normalized()).transpose();
  for (int j = 1; j < kNumJoints; ++j) {
    p.theta(j, 0) = rng.uniform(0.0, 0.8);
    p.theta(j, 1) = rng.uniform(-0.1, 0.1);
    p.theta(j, 2) = rng.uniform(-0.2, 0.2);
  }
  for (int k = 0; k < kNumShape; ++k) p.beta(k) = rng.normal(0.0, 0.5);
  p.root = root;
  return p;
}

struct HandMesh {
  Points3 vertices;
  Points3 keypoints;
};

inline HandMesh pose_hand(const ToyHandModel& model, const HandPose& pose) {
  NoGradGuard guard;
  const auto out = lbs_forward<double>(model, to_tensor(pose.theta), reshape(to_tensor(pose.beta), {kNumShape}),
                                       reshape(to_tensor(pose.root), {3}));
  return {to_matrix(out.vertices), to_matrix(out.keypoints)};
}

// ---------------------------------------------------------------------------
// Losses

/// 2D keypoints seen by one camera; `valid[k]` masks missing detections.
struct KeypointView {
  Camera camera;
  Points2 pixels;            // 21 x 2
  std::vector<bool> valid;   // 21 entries, empty means all valid
};

inline int valid_count(const KeypointView& v) {
  if (v.valid.empty()) return kNumKeypoints;
  int n = 0;
  for (bool b : v.valid) n += b ? 1 : 0;
  return n;
}

/// Mean over valid (view, keypoint) pairs of the squared pixel distance
/// between projected 3D keypoints [21,3] and the observations.
template <typename T>
BasicTensor<T> loss_2d(const BasicTensor<T>& keypoints, const std::vector<KeypointView>& views) {
  if (keypoints.shape() != Shape{kNumKeypoints, 3}) throw ShapeError("loss_2d: keypoints must be [21,3], got " + shape_str(keypoints.shape()));
  int total = 0;
  BasicTensor<T> acc = BasicTensor<T>::scalar(T(0));
  for (const auto& v : views) {
    if (v.pixels.rows() != kNumKeypoints) throw ShapeError("loss_2d: each view needs 21 pixels");
    if (!v.valid.empty() && v.valid.size() != kNumKeypoints) throw ShapeError("loss_2d: mask must have 21 entries");
    const int n = valid_count(v);
    if (n == 0) continue;
    total += n;
    const Mat34 M = v.camera.projection();
    const Eigen::Matrix3d Mt = M.leftCols<3>().transpose();
    const auto h = matmul(keypoints, to_tensor<T>(Mt)) + reshape(to_tensor<T>(Eigen::RowVector3d(M.col(3).transpose())), {3});
    const auto z = slice(h, 1, 2, 3);
    const auto uv = div(slice(h, 1, 0, 2), z);
    auto d = square(uv - to_tensor<T>(v.pixels));
    if (!v.valid.empty()) {
      Eigen::MatrixXd mask(kNumKeypoints, 1);
      for (int k = 0; k < kNumKeypoints; ++k) mask(k) = v.valid[static_cast<std::size_t>(k)] ? 1.0 : 0.0;
      d = mul(d, to_tensor<T>(mask));
    }
    acc = acc + sum(d);
  }
  if (total == 0) throw DegenerateError("loss_2d: no valid keypoints in any view");
  return scale(acc, T(1.0 / total));
}

/// Squared violation of per-joint angle limits, summed.
template <typename T>
BasicTensor<T> loss_kin(const BasicTensor<T>& theta, const JointLimits& limits) {
  if (theta.shape() != Shape{kNumJoints, 3}) throw ShapeError("loss_kin: theta must be [16,3], got " + shape_str(theta.shape()));
  Eigen::Matrix<double, kNumJoints, 3, Eigen::RowMajor> lo, hi;
  for (int j = 0; j < kNumJoints; ++j) {
    // unbounded components become a harmless large bound
    lo.row(j) = limits.lower[static_cast<std::size_t>(j)].cwiseMax(-1e9).transpose();
    hi.row(j) = limits.upper[static_cast<std::size_t>(j)].cwiseMin(1e9).transpose();
  }
  return sum(hinge_sq(theta - to_tensor<T>(hi))) + sum(hinge_sq(to_tensor<T>(lo) - theta));
}

// ---------------------------------------------------------------------------
// Fitting

struct FitOptions {
  int iterations = 300;
  double lr = 1e-2;
  double lambda_kin = 0.1;
  int plateau = 50;          // iterations without improvement before decaying
  double plateau_tol = 1e-8;  // absolute improvement that counts
  double decay = 0.5;
  double converge_loss = 1e-6;  // px^2
  std::optional<Vec3> fixed_root;  // required with fewer than two views
  /// Metres per unit of the root parameter, which is optimized as an offset
  /// from its initialization. Keeps Adam's per-step root motion comparable to
  /// the articulation steps.
  double root_unit = 0.01;
  double pose_unit = 8.0;   // radians per unit of the theta parameter
  double shape_unit = 8.0;  // beta per unit of the shape parameter
};

struct FitResult {
  HandPose pose;
  HandMesh mesh;
  std::vector<double> loss_trace;  // objective at each iteration
  double initial_loss = 0;
  double final_loss = 0;  // objective at the returned parameters
  bool converged = false;
};

/// Root initialization: DLT on the root keypoint over views that see it.
inline Vec3 triangulate_root(const std::vector<KeypointView>& views) {
  std::vector<Observation> obs;
  for (const auto& v : views) {
    if (v.valid.empty() || v.valid[kRootKeypoint]) obs.push_back({v.pixels.row(kRootKeypoint).transpose(), v.camera});
  }
  return triangulate_dlt(obs).point;
}

/// Recovers (theta, beta, root) from multi-view 2D keypoints with Adam.
/// Returns the best parameters seen, so final_loss <= initial_loss.
inline FitResult fit(const ToyHandModel& model, const std::vector<KeypointView>& views, const FitOptions& opt = {}) {
  if (views.empty()) throw DegenerateError("fit: no views");
  const bool free_root = !opt.fixed_root.has_value();
  const Vec3 root0 = free_root ? triangulate_root(views) : *opt.fixed_root;

  ParamStore store;
  store.add("theta", {kNumJoints, 3}, Init::Zeros);
  store.add("beta", {kNumShape}, Init::Zeros);
  store.add("root", {3}, Init::Zeros);
  const auto root_base = reshape(to_tensor(root0), {3});
  auto root_of = [&](const Tensor& offset) { return root_base + scale(offset, opt.root_unit); };

  auto objective = [&](bool record) {
    const auto theta = scale(store.get("theta"), opt.pose_unit);
    const auto out = lbs_forward(model, theta, scale(store.get("beta"), opt.shape_unit), root_of(store.get("root")));
    auto loss = loss_2d(out.keypoints, views) + scale(loss_kin(theta, model.limits), opt.lambda_kin);
    if (record) backward(loss);
    return loss.item();
  };

  FitResult res;
  AdamOptions adam;
  adam.lr = opt.lr;
  double best = std::numeric_limits<double>::infinity();
  double plateau_ref = best;
  int stall = 0;
  std::vector<std::vector<double>> best_params;
  auto snapshot = [&] {
    best_params.clear();
    for (const auto& e : store.entries()) best_params.emplace_back(e.value.data().begin(), e.value.data().end());
  };
  for (int it = 0; it < opt.iterations; ++it) {
    TapeScope scope;
    store.zero_grad();
    const double loss = objective(true);
    if (!std::isfinite(loss)) throw Error("fit: objective became non-finite at iteration " + std::to_string(it));
    res.loss_trace.push_back(loss);
    if (it == 0) res.initial_loss = loss;
    if (loss < best) {
      best = loss;
      snapshot();
    }
    if (loss < plateau_ref - opt.plateau_tol) {
      plateau_ref = loss;
      stall = 0;
    } else if (++stall >= opt.plateau) {
      adam.lr *= opt.decay;
      stall = 0;
    }
    auto grads = collect_grads(store);
    if (!free_root) std::fill(grads["root"].begin(), grads["root"].end(), 0.0);
    adam_step(store, grads, adam);
  }
  {
    NoGradGuard guard;
    const double last = objective(false);
    if (last < best || best_params.empty()) {
      best = last;
      snapshot();
    }
  }
  for (std::size_t i = 0; i < store.entries().size(); ++i) {
    auto w = store.entries()[i].value.mutable_data();
    std::copy(best_params[i].begin(), best_params[i].end(), w.begin());
  }
  for (int j = 0; j < kNumJoints; ++j)
    for (int c = 0; c < 3; ++c) res.pose.theta(j, c) = opt.pose_unit * store.get("theta").data()[static_cast<std::size_t>(3 * j + c)];
  for (int k = 0; k < kNumShape; ++k) res.pose.beta(k) = opt.shape_unit * store.get("beta").data()[static_cast<std::size_t>(k)];
  const auto root_final = root_of(store.get("root"));
  for (int c = 0; c < 3; ++c) res.pose.root(c) = root_final.data()[static_cast<std::size_t>(c)];
  res.mesh = pose_hand(model, res.pose);
  res.final_loss = best;
  res.converged = best <= opt.converge_loss ||
                  (res.loss_trace.size() > 1 && std::abs(res.loss_trace.back() - res.loss_trace[res.loss_trace.size() - 2]) <=
                                                     opt.plateau_tol * std::max(1.0, res.loss_trace.back()));
  return res;
}

}  // namespace poemkit
