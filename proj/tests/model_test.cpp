#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "poemkit/metrics.hpp"
#include "poemkit/model.hpp"

using namespace poemkit;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d = 16;
  c.layers = 2;
  c.k = 4;
  c.heads = 4;
  c.basis_points = 64;
  c.n_vertices = 20;
  c.seed = 5;
  return c;
}

const ToyHandModel& toy() {
  static const ToyHandModel m = make_toy_hand_model(20);
  return m;
}

FrameBundle frame(std::uint64_t seed, int views = 4, Handedness h = Handedness::Right) {
  RigOptions o;
  o.views = views;
  BackboneConfig b;
  b.channels = 16;
  b.seed = 2;
  return render_frame(make_scene(seed, rig_center(o), h), make_rig(o, 9), toy(), b);
}

void perturb(ParamStore& s, double scale, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& e : s.entries())
    for (auto& v : e.value.mutable_data()) v += scale * rng.normal();
}

std::vector<double> flat(const ParamStore& s) {
  std::vector<double> out;
  for (const auto& e : s.entries()) out.insert(out.end(), e.value.data().begin(), e.value.data().end());
  return out;
}

}  // namespace

TEST(Model, UntrainedPredictionIsTemplateAtEstimatedRoot) {
  const auto m = make_model(small_config());
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto f = frame(s);
    const auto p = reconstruct(m, f);
    EXPECT_EQ(p.root, estimate_root(f.heatmaps, f.rig).root);
    const Points3 expect = m.tmpl.points().rowwise() + p.root.transpose();
    EXPECT_TRUE((p.points.array() == expect.array()).all());
    EXPECT_LT((p.root - f.gt_root).norm(), 0.005);
  }
}

TEST(Model, SingleViewNeedsASuppliedRoot) {
  const auto m = make_model(small_config());
  const auto f = frame(3, 1);
  EXPECT_THROW(reconstruct(m, f), DegenerateError);
  const auto p = reconstruct(m, f, f.gt_root);
  EXPECT_EQ(p.root, f.gt_root);
}

TEST(Model, RejectsChannelMismatch) {
  auto cfg = small_config();
  cfg.d = 32;
  const auto m = make_model(cfg);
  EXPECT_THROW(reconstruct(m, frame(1)), ShapeError);
}

TEST(Model, CompatibilityListsEveryDifference) {
  const auto cfg = small_config();
  auto other = cfg;
  other.d = 32;
  other.layers = 3;
  ParamStore loaded(1);
  add_model_params(loaded, other);
  const auto problems = compatibility_problems(loaded, cfg);
  std::size_t shape = 0, unused = 0;
  for (const auto& p : problems) {
    shape += p.find(" vs config ") != std::string::npos;
    unused += p.find("not used") != std::string::npos;
  }
  EXPECT_GT(shape, 10u);
  EXPECT_GT(unused, 5u);
  EXPECT_TRUE(compatibility_problems(make_model(cfg).params, cfg).empty());
  EXPECT_THROW(model_from_store(cfg, std::move(loaded)), ConfigError);
}

TEST(Model, CloneIsDeep) {
  auto m = make_model(small_config());
  auto c = clone_store(m.params);
  c.get("query_emb").mutable_data()[0] += 1.0;
  EXPECT_NE(c.get("query_emb").data()[0], m.params.get("query_emb").data()[0]);
}

TEST(Train, ZeroStepsLeavesParameters) {
  auto m = make_model(small_config());
  const auto before = flat(m.params);
  TrainOptions o;
  o.steps = 0;
  EXPECT_TRUE(train(m, {frame(1)}, o).empty());
  EXPECT_EQ(flat(m.params), before);
  EXPECT_EQ(m.params.step(), 0u);
}

TEST(Train, SingleFrameLossFalls) {
  auto m = make_model(small_config());
  const auto f = frame(2);
  TrainOptions o;
  o.steps = 150;
  o.lr = 3e-3;
  const auto before = mpjpe(split_points(reconstruct(m, f).points).keypoints, f.gt_keypoints());
  const auto trace = train(m, {f}, o);
  ASSERT_EQ(trace.size(), 150u);
  double first = 0, last = 0;
  for (int i = 0; i < 20; ++i) {
    first += trace[static_cast<std::size_t>(i)].loss;
    last += trace[trace.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  EXPECT_LT(last, 0.5 * first);
  const auto after = mpjpe(split_points(reconstruct(m, f).points).keypoints, f.gt_keypoints());
  EXPECT_LT(after, 0.5 * before);
}

TEST(Train, ResumeFromCheckpointMatchesUninterruptedRun) {
  const auto frames = std::vector<FrameBundle>{frame(3), frame(4)};
  TrainOptions o;
  o.steps = 10;
  o.lr = 1e-3;
  o.schedule = "constant";
  o.randomize_views = true;
  o.seed = 8;
  auto a = make_model(small_config());
  auto full = o;
  full.steps = 20;
  train(a, frames, full);

  auto b = make_model(small_config());
  train(b, frames, o);
  const auto path = std::filesystem::temp_directory_path() / "poemkit_resume.ckpt";
  save_checkpoint(b.params, path);
  auto c = model_from_store(small_config(), load_checkpoint(path));
  EXPECT_EQ(c.params.step(), 10u);
  const auto trace = train(c, frames, o);
  EXPECT_EQ(trace.front().step, 10u);
  EXPECT_EQ(c.params.step(), 20u);
  EXPECT_EQ(flat(c.params), flat(a.params));
  std::filesystem::remove(path);
}

TEST(Train, ThreadsMatchSequentialBatch) {
  const auto frames = std::vector<FrameBundle>{frame(5), frame(6), frame(7)};
  TrainOptions o;
  o.steps = 3;
  o.batch = 3;
  o.lr = 1e-3;
  o.seed = 2;
  auto a = make_model(small_config());
  auto b = make_model(small_config());
  train(a, frames, o);
  o.threads = 3;
  train(b, frames, o);
  const auto fa = flat(a.params), fb = flat(b.params);
  double worst = 0;
  for (std::size_t i = 0; i < fa.size(); ++i) worst = std::max(worst, std::abs(fa[i] - fb[i]));
  EXPECT_LT(worst, 1e-12);
}

TEST(Train, NonFiniteLossAbortsWithTensorNames) {
  auto m = make_model(small_config());
  auto f = frame(8);
  for (auto& v : f.features[1].grid.mutable_data()) v = std::numeric_limits<double>::quiet_NaN();
  TrainOptions o;
  o.steps = 1;
  o.gt_root = true;
  const auto before = flat(m.params);
  try {
    train(m, {f}, o);
    FAIL() << "expected an abort";
  } catch (const DegenerateError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
  EXPECT_EQ(flat(m.params), before);
}

TEST(Train, LearningRateSchedules) {
  TrainOptions o;
  o.lr = 1e-3;
  o.steps = 100;
  o.final_lr_ratio = 0.1;
  EXPECT_DOUBLE_EQ(learning_rate(o, 0), 1e-3);
  EXPECT_NEAR(learning_rate(o, 50), 1e-3 * 0.55, 1e-15);
  EXPECT_NEAR(learning_rate(o, 100), 1e-4, 1e-15);
  o.schedule = "step";
  o.step_every = 30;
  EXPECT_DOUBLE_EQ(learning_rate(o, 61), 0.25e-3);
  o.schedule = "bogus";
  EXPECT_THROW(learning_rate(o, 0), ConfigError);
}

TEST(Mirror, LeftHandPathMatchesRightHandTwin) {
  auto m = make_model(small_config());
  perturb(m.params, 0.05, 3);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto right = frame(20 + s);
    const auto left = mirror_frame(right);
    const auto pr = reconstruct(m, right);
    const auto pl = reconstruct_mirrored(m, left);
    EXPECT_LT((mirror_points(pl.points) - pr.points).cwiseAbs().maxCoeff(), 1e-9);
    // A frame routed through the mirror twice is untouched.
    const auto twice = reconstruct_mirrored(m, mirror_frame(right));
    EXPECT_LT((mirror_points(twice.points) - pr.points).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Rotation, QuarterTurnCommutesWithRenderingAndRootStage) {
  RigOptions o;
  const auto rig = make_rig(o, 4);
  BackboneConfig b;
  b.channels = 16;
  const auto scene = make_scene(31, rig_center(o));
  const auto f = render_frame(scene, rig, toy(), b);
  for (int k = 1; k < 4; ++k) {
    for (std::size_t v = 0; v < 4; ++v) {
      const auto g = rotate_view_quarter(f, v, k);
      // Rendering with the rotated camera equals the rotated grids.
      const auto direct = synth_backbone(f.gt_points, f.gt_root, g.rig.cameras[v], b);
      const auto a = direct.features.grid.data(), c = g.features[v].grid.data();
      double worst = 0;
      for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - c[i]));
      EXPECT_LT(worst, 1e-9);
      EXPECT_LT((estimate_root(g.heatmaps, g.rig).root - estimate_root(f.heatmaps, f.rig).root).norm(), 1e-9);
    }
  }
}
