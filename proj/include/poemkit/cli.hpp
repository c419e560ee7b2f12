#pragma once

// Command-line front end. Each subcommand validates its paths, does its work
// in memory or in a temporary sibling, then publishes with an atomic rename.
// Exit codes: 0 ok, 1 verification failure, 2 I/O or configuration error,
// 3 numerical degeneracy.

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "poemkit/basis.hpp"
#include "poemkit/errors.hpp"
#include "poemkit/fitting.hpp"
#include "poemkit/metrics.hpp"
#include "poemkit/model.hpp"
#include "poemkit/mutation.hpp"
#include "poemkit/synth.hpp"
#include "poemkit/verify.hpp"

namespace poemkit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kVerifyFailed = 1, kConfigError = 2, kDegenerate = 3 };

// ---------------------------------------------------------------------------
// Helpers

/// --seed if given, else $POEMKIT_SEED, else 0.
inline std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("POEMKIT_SEED")) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("POEMKIT_SEED is not an unsigned integer: '") + env + "'");
  }
  return 0;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first
/// failure after all workers stop.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, std::min<int>(threads, static_cast<int>(std::max<std::size_t>(n, 1)))));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto body = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      {
        std::lock_guard lock(mu);
        if (failure) return;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(body);
  body();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string frame_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%06zu", i);
  return buf;
}

inline void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw IoError(what + " not found: " + p.string());
}

inline ModelConfig load_model_config(const std::optional<fs::path>& path) {
  if (!path) return ModelConfig{};
  require_file(*path, "model config");
  try {
    return read_json(*path).get<ModelConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(path->string() + ": " + e.what());
  }
}

/// Temporary sibling directory, renamed over `target` on commit and removed
/// otherwise. An existing target is only replaced if it holds a manifest.
class StagedDir {
 public:
  explicit StagedDir(fs::path target) : target_(std::move(target)) {
    if (fs::exists(target_) && !fs::is_empty(target_) && !fs::exists(target_ / "manifest.json")) {
      throw IoError("refusing to replace non-dataset directory " + target_.string());
    }
    const auto parent = target_.has_parent_path() ? target_.parent_path() : fs::path(".");
    std::error_code ec;
    fs::create_directories(parent, ec);
    if (ec) throw IoError("cannot create " + parent.string() + ": " + ec.message());
    stage_ = parent / ("." + target_.filename().string() + ".tmp-" + hex64(fnv1a(target_.string()) ^ static_cast<std::uint64_t>(::getpid())));
    fs::remove_all(stage_, ec);
    fs::create_directories(stage_, ec);
    if (ec) throw IoError("cannot create " + stage_.string() + ": " + ec.message());
  }
  StagedDir(const StagedDir&) = delete;
  StagedDir& operator=(const StagedDir&) = delete;
  ~StagedDir() {
    std::error_code ec;
    if (!committed_) fs::remove_all(stage_, ec);
  }
  const fs::path& path() const { return stage_; }
  void commit() {
    std::error_code ec;
    if (fs::exists(target_)) fs::remove_all(target_, ec);
    if (ec) throw IoError("cannot replace " + target_.string() + ": " + ec.message());
    fs::rename(stage_, target_, ec);
    if (ec) throw IoError("cannot publish " + target_.string() + ": " + ec.message());
    committed_ = true;
  }

 private:
  fs::path target_, stage_;
  bool committed_ = false;
};

// ---------------------------------------------------------------------------
// Datasets

struct GenOptions {
  std::size_t frames = 10;
  RigOptions rig;
  BackboneConfig backbone;
  int n_vertices = 77;
  std::string handedness = "right";  // right | left | mixed
  bool per_frame_rig = false;
  double keypoint_noise = 0.0;  // px, for the keypoints.json fit input
};

inline json gen_config_json(const GenOptions& o) {
  return {{"rig", o.rig},
          {"backbone", {{"stride", o.backbone.stride}, {"channels", o.backbone.channels},
                        {"heatmap_sigma", o.backbone.heatmap_sigma}, {"feature_sigma", o.backbone.feature_sigma},
                        {"seed", o.backbone.seed}}},
          {"n_vertices", o.n_vertices},
          {"handedness", o.handedness},
          {"per_frame_rig", o.per_frame_rig},
          {"keypoint_noise", o.keypoint_noise}};
}

/// keypoints.json for `fit`: the ground-truth keypoints projected into each
/// view, optionally with Gaussian pixel noise.
inline json keypoint_observations(const FrameBundle& f, double noise, std::uint64_t seed) {
  Rng rng(seed);
  json views = json::array();
  const Points3 kp = f.gt_keypoints();
  for (std::size_t v = 0; v < f.views(); ++v) {
    const auto proj = project(kp, f.rig.cameras[v]);
    json rows = json::array();
    for (int k = 0; k < kNumKeypoints; ++k) {
      const bool ok = proj.in_front[static_cast<std::size_t>(k)] != 0;
      rows.push_back({proj.pixels(k, 0) + noise * rng.normal(), proj.pixels(k, 1) + noise * rng.normal(), ok ? 1 : 0});
    }
    views.push_back({{"camera_index", v}, {"keypoints", rows}});
  }
  return {{"views", views}};
}

/// Renders one frame of a dataset from its index (pure given seed and options).
inline FrameBundle generate_frame(const GenOptions& o, const ToyHandModel& toy, const Rig& shared_rig, std::uint64_t seed, std::size_t i) {
  const std::uint64_t fs_seed = mix_seed(seed, 1000 + i);
  const Rig rig = o.per_frame_rig ? make_rig(o.rig, mix_seed(fs_seed, fnv1a("rig"))) : shared_rig;
  Handedness h = Handedness::Right;
  if (o.handedness == "left") {
    h = Handedness::Left;
  } else if (o.handedness == "mixed") {
    h = (mix_seed(fs_seed, fnv1a("hand")) & 1) ? Handedness::Left : Handedness::Right;
  } else if (o.handedness != "right") {
    throw ConfigError("handedness must be right, left or mixed");
  }
  auto center = rig_center(o.rig);
  if (h == Handedness::Left) center.x() = -center.x();
  return render_frame(make_scene(fs_seed, center, h), rig, toy, o.backbone);
}

inline void generate_dataset(const GenOptions& o, std::uint64_t seed, const fs::path& out, int threads) {
  if (o.backbone.channels < 1) throw ConfigError("channels must be >= 1");
  const auto toy = make_toy_hand_model(o.n_vertices);
  const Rig rig = make_rig(o.rig, mix_seed(seed, fnv1a("rig")));
  StagedDir stage(out);
  parallel_for(o.frames, threads, [&](std::size_t i) {
    const auto f = generate_frame(o, toy, rig, seed, i);
    const auto dir = stage.path() / frame_id(i);
    write_bundle(f, dir);
    io::write_text_atomic(dir / "keypoints.json", dump_json(keypoint_observations(f, o.keypoint_noise, mix_seed(seed, 5000 + i))));
  });
  const json cfg = gen_config_json(o);
  json ids = json::array();
  for (std::size_t i = 0; i < o.frames; ++i) ids.push_back(frame_id(i));
  const json manifest = {{"format", "poemkit-dataset"}, {"version", 1}, {"n_frames", o.frames}, {"seed", seed},
                         {"config", cfg}, {"config_hash", hex64(fnv1a(cfg.dump()))}, {"frames", ids}};
  io::write_text_atomic(stage.path() / "manifest.json", dump_json(manifest));
  stage.commit();
}

struct Dataset {
  json manifest;
  std::vector<std::string> ids;
  std::vector<FrameBundle> frames;
};

inline Dataset load_dataset(const fs::path& dir, int threads = 1) {
  require_file(dir / "manifest.json", "dataset manifest");
  Dataset d;
  d.manifest = read_json(dir / "manifest.json");
  try {
    d.ids = d.manifest.at("frames").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ConfigError((dir / "manifest.json").string() + ": " + e.what());
  }
  d.frames.resize(d.ids.size());
  parallel_for(d.ids.size(), threads, [&](std::size_t i) { d.frames[i] = read_bundle(dir / d.ids[i]); });
  return d;
}

// ---------------------------------------------------------------------------
// View selection: all | shuffle | random | comma-separated indices

inline std::vector<std::size_t> view_order(const std::string& spec, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (spec == "all") return order;
  Rng rng(seed);
  if (spec == "shuffle") {
    rng.shuffle(order);
    return order;
  }
  if (spec == "random") {
    const auto keep = static_cast<std::size_t>(1 + rng.below(n));
    rng.shuffle(order);
    order.resize(keep);
    return order;
  }
  std::vector<std::size_t> out;
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const auto v = std::stoul(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      if (v >= n) throw ConfigError("--views index " + tok + " out of range for " + std::to_string(n) + " views");
      out.push_back(v);
    } catch (const std::logic_error&) {
      throw ConfigError("--views must be all, shuffle, random or a list like 2,0,1; got '" + spec + "'");
    }
  }
  if (out.empty()) throw ConfigError("--views selects no views");
  return out;
}

/// Points predicted in a re-anchored frame, mapped back to the dataset world.
inline Points3 to_original_world(const Points3& p, const FrameBundle& original, std::size_t first_view) {
  const CameraPose a = original.rig.cameras[first_view].pose;
  if (first_view == 0 && original.rig.canonical(0.0)) return p;
  const Mat3 R = a.rotation();
  const Vec3 t = a.translation();
  return (p.rowwise() - t.transpose()) * R;  // R^T (x - t), row-wise
}

// ---------------------------------------------------------------------------
// Subcommands

struct ReconstructOptions {
  fs::path data, checkpoint, out;
  std::optional<fs::path> config, roots;
  bool mirror = false;
  bool gt_root = false;
  std::string views = "all";
  int threads = 1;
};

inline json reconstruct_dataset(const ReconstructOptions& o, std::uint64_t seed, std::ostream& log) {
  require_file(o.checkpoint, "checkpoint");
  const auto cfg = load_model_config(o.config);
  const auto model = model_from_store(cfg, load_checkpoint(o.checkpoint));
  const auto ds = load_dataset(o.data, o.threads);
  std::map<std::string, Vec3> roots;
  if (o.roots) {
    require_file(*o.roots, "root file");
    for (const auto& [id, v] : read_json(*o.roots).items()) {
      const auto r = v.get<std::vector<double>>();
      if (r.size() != 3) throw ConfigError("root file: " + id + " needs 3 values");
      roots[id] = Vec3(r[0], r[1], r[2]);
    }
  }
  std::vector<json> rows(ds.frames.size());
  parallel_for(ds.frames.size(), o.threads, [&](std::size_t i) {
    const auto& original = ds.frames[i];
    if (original.gt_points.rows() != cfg.queries()) {
      throw ShapeError(ds.ids[i] + ": " + std::to_string(original.gt_points.rows()) + " points per frame, model has Q=" + std::to_string(cfg.queries()));
    }
    const auto order = view_order(o.views, original.views(), mix_seed(seed, i));
    const auto f = select_views(original, order);
    std::optional<Vec3> fallback;
    const auto anchor = original.rig.cameras[order.front()].pose;
    auto into_frame = [&](const Vec3& w) {
      if (order.front() == 0 && original.rig.canonical(0.0)) return w;
      return Vec3(anchor.rotation() * w + anchor.translation());
    };
    if (auto it = roots.find(ds.ids[i]); it != roots.end()) fallback = into_frame(it->second);
    else if (o.gt_root) fallback = f.gt_root;
    if (f.views() < 2 && !fallback) {
      throw DegenerateError(ds.ids[i] + ": single-view frame needs --gt-root or a root file (one view cannot triangulate)");
    }
    const bool mirrored = o.mirror && f.handedness == Handedness::Left;
    const auto p = mirrored ? reconstruct_mirrored(model, f, fallback) : reconstruct(model, f, fallback);
    const Points3 world = to_original_world(p.points, original, order.front());
    const Points3 root_w = to_original_world(Points3(p.root.transpose()), original, order.front());
    rows[i] = {{"id", ds.ids[i]},
               {"root", {root_w(0, 0), root_w(0, 1), root_w(0, 2)}},
               {"points", points_to_json(world)},
               {"views", order},
               {"mirrored", mirrored},
               {"seconds", p.seconds}};
  });
  log << "reconstructed " << rows.size() << " frames\n";
  return {{"n_vertices", cfg.n_vertices}, {"frames", rows}};
}

inline EvalReport evaluate_predictions(const json& pred, const Dataset& ds, double lo, double hi) {
  std::map<std::string, const json*> by_id;
  for (const auto& r : pred.at("frames")) by_id[r.at("id").get<std::string>()] = &r;
  std::vector<std::string> missing;
  for (const auto& id : ds.ids)
    if (!by_id.contains(id)) missing.push_back(id);
  std::vector<std::string> extra;
  for (const auto& [id, _] : by_id)
    if (std::find(ds.ids.begin(), ds.ids.end(), id) == ds.ids.end()) extra.push_back(id);
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "prediction/dataset frame mismatch";
    if (!missing.empty()) {
      msg += "; missing predictions for:";
      for (const auto& m : missing) msg += " " + m;
    }
    if (!extra.empty()) {
      msg += "; unknown frames:";
      for (const auto& m : extra) msg += " " + m;
    }
    throw ConfigError(msg);
  }
  std::vector<HandPoints> p, g;
  for (std::size_t i = 0; i < ds.ids.size(); ++i) {
    const Points3 pts = points_from_json(by_id.at(ds.ids[i])->at("points"));
    if (pts.rows() != ds.frames[i].gt_points.rows()) throw ShapeError(ds.ids[i] + ": prediction and ground truth point counts differ");
    p.push_back(split_points(pts));
    g.push_back(split_points(ds.frames[i].gt_points));
  }
  return evaluate(p, g, lo, hi);
}

inline std::vector<KeypointView> parse_keypoints(const json& kp, const Rig& rig) {
  std::vector<KeypointView> views;
  try {
    for (const auto& v : kp.at("views")) {
      const auto ci = v.at("camera_index").get<std::size_t>();
      if (ci >= rig.size()) throw ConfigError("keypoints: camera_index " + std::to_string(ci) + " not in rig");
      const auto& rows = v.at("keypoints");
      if (rows.size() != kNumKeypoints) throw ConfigError("keypoints: each view needs 21 entries");
      KeypointView kv{rig.cameras[ci], Points2(kNumKeypoints, 2), std::vector<bool>(kNumKeypoints, true)};
      for (int k = 0; k < kNumKeypoints; ++k) {
        const auto& r = rows.at(static_cast<std::size_t>(k));
        kv.pixels(k, 0) = r.at(0).get<double>();
        kv.pixels(k, 1) = r.at(1).get<double>();
        kv.valid[static_cast<std::size_t>(k)] = r.size() < 3 || r.at(2).get<double>() != 0.0;
      }
      views.push_back(std::move(kv));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("keypoints json: ") + e.what());
  }
  if (views.empty()) throw ConfigError("keypoints json: no views");
  return views;
}

inline json fit_result_json(const FitResult& r) {
  json theta = json::array();
  for (int j = 0; j < kNumJoints; ++j) theta.push_back({r.pose.theta(j, 0), r.pose.theta(j, 1), r.pose.theta(j, 2)});
  return {{"theta", theta},
          {"beta", std::vector<double>(r.pose.beta.data(), r.pose.beta.data() + kNumShape)},
          {"root", {r.pose.root.x(), r.pose.root.y(), r.pose.root.z()}},
          {"keypoints", points_to_json(r.mesh.keypoints)},
          {"vertices", points_to_json(r.mesh.vertices)},
          {"initial_loss", r.initial_loss},
          {"final_loss", r.final_loss},
          {"converged", r.converged},
          {"loss_trace", r.loss_trace}};
}

inline std::optional<Vec3> parse_vec3(const std::string& s, const std::string& what) {
  if (s.empty()) return std::nullopt;
  std::vector<double> v;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      v.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw ConfigError(what + ": '" + s + "' is not x,y,z");
    }
  }
  if (v.size() != 3) throw ConfigError(what + ": '" + s + "' is not x,y,z");
  return Vec3(v[0], v[1], v[2]);
}

inline int run_verify(const std::vector<std::string>& mutate, std::ostream& out) {
  Mutations m;
  for (const auto& name : mutate) {
    if (name == "aggregation_sign_flip") m.aggregation_sign_flip = true;
    else if (name == "vector_softmax_wrong_axis") m.vector_softmax_wrong_axis = true;
    else throw ConfigError("unknown mutation '" + name + "' (aggregation_sign_flip, vector_softmax_wrong_axis)");
  }
  MutationScope scope(m);
  const auto results = verify::run_all();
  int failed = 0;
  for (const auto& r : results) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name << "  " << r.detail << "\n";
    failed += r.passed ? 0 : 1;
  }
  out << (failed ? std::to_string(failed) + " check(s) failed\n" : "all " + std::to_string(results.size()) + " checks passed\n");
  return failed ? kVerifyFailed : kOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"poemkit: multi-view hand mesh reconstruction toolkit"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed_flag;
  int threads = 1;
  std::optional<fs::path> config;
  auto common = [&](CLI::App* c) {
    c->add_option("--seed", seed_flag, "random seed (falls back to $POEMKIT_SEED, then 0)");
    c->add_option("--threads", threads, "frame-level worker threads")->check(CLI::PositiveNumber);
  };

  // gen
  GenOptions gen;
  fs::path gen_out;
  auto* g = app.add_subcommand("gen", "generate a synthetic dataset");
  common(g);
  g->add_option("--frames", gen.frames, "number of frames");
  g->add_option("--views", gen.rig.views, "cameras per rig")->check(CLI::Range(1, 64));
  g->add_option("--radius", gen.rig.radius, "rig radius (m)");
  g->add_option("--width", gen.rig.width);
  g->add_option("--height", gen.rig.height);
  g->add_option("--focal", gen.rig.focal);
  g->add_option("--azimuth-jitter", gen.rig.azimuth_jitter, "max azimuth perturbation (rad)");
  g->add_option("--elevation-range", gen.rig.elevation_range, "max |elevation| (rad)");
  g->add_option("--stride", gen.backbone.stride);
  g->add_option("--channels", gen.backbone.channels, "feature channels (must equal the model's d)");
  g->add_option("--feature-seed", gen.backbone.seed, "seed of the per-point feature signatures");
  g->add_option("--n-vertices", gen.n_vertices);
  g->add_option("--handedness", gen.handedness)->check(CLI::IsMember({"right", "left", "mixed"}));
  g->add_flag("--per-frame-rig", gen.per_frame_rig, "draw a new rig for every frame");
  g->add_option("--keypoint-noise", gen.keypoint_noise, "pixel noise of keypoints.json");
  g->add_option("--out", gen_out, "output directory")->required();

  // reconstruct
  ReconstructOptions rec;
  auto* r = app.add_subcommand("reconstruct", "run the two-stage model over a dataset");
  common(r);
  r->add_option("--data", rec.data)->required();
  r->add_option("--checkpoint", rec.checkpoint)->required();
  r->add_option("--config", config, "model config JSON");
  r->add_option("--out", rec.out)->required();
  r->add_flag("--mirror", rec.mirror, "route left hands through mirror, reconstruct, mirror back");
  r->add_flag("--gt-root", rec.gt_root, "use the ground-truth root for single-view frames");
  r->add_option("--roots", rec.roots, "JSON {frame_id: [x,y,z]} roots for single-view frames");
  r->add_option("--views", rec.views, "all | shuffle | random | list like 2,0,1");

  // train
  fs::path train_data, train_out;
  std::optional<fs::path> resume;
  std::optional<int> steps;
  std::optional<double> lr;
  std::optional<std::string> schedule;
  std::optional<int> batch;
  bool randomize = false, train_gt_root = false, quiet = false;
  auto* t = app.add_subcommand("train", "train the model");
  common(t);
  t->add_option("--data", train_data)->required();
  t->add_option("--config", config, "model config JSON (optional \"train\" section)");
  t->add_option("--out", train_out, "checkpoint path; the loss log goes to <out>.loss.csv")->required();
  t->add_option("--steps", steps);
  t->add_option("--lr", lr);
  t->add_option("--schedule", schedule)->check(CLI::IsMember({"cosine", "step", "constant"}));
  t->add_option("--batch", batch);
  t->add_option("--resume", resume, "continue from a checkpoint");
  t->add_flag("--randomize-views", randomize, "random view count and order per sample");
  t->add_flag("--gt-root", train_gt_root, "train on the true root instead of stage 1");
  t->add_flag("--quiet", quiet);

  // fit
  fs::path kp_path, rig_path, fit_out;
  FitOptions fit_opt;
  std::string fixed_root;
  int fit_vertices = 77;
  auto* f = app.add_subcommand("fit", "fit the toy hand to multi-view 2D keypoints");
  common(f);
  f->add_option("--keypoints", kp_path)->required();
  f->add_option("--rig", rig_path)->required();
  f->add_option("--out", fit_out)->required();
  f->add_option("--iterations", fit_opt.iterations);
  f->add_option("--lr", fit_opt.lr);
  f->add_option("--lambda-kin", fit_opt.lambda_kin);
  f->add_option("--fixed-root", fixed_root, "x,y,z (required for a single view)");
  f->add_option("--n-vertices", fit_vertices);

  // eval
  fs::path pred_path, eval_data;
  std::optional<fs::path> eval_out;
  double lo = 0, hi = 20;
  auto* e = app.add_subcommand("eval", "score predictions against a dataset");
  common(e);
  e->add_option("--pred", pred_path)->required();
  e->add_option("--data", eval_data)->required();
  e->add_option("--out", eval_out);
  e->add_option("--auc-lo", lo);
  e->add_option("--auc-hi", hi);

  // verify
  std::vector<std::string> mutate;
  auto* v = app.add_subcommand("verify", "run the built-in oracle suite");
  common(v);
  v->add_option("--mutate", mutate, "inject a fault: aggregation_sign_flip, vector_softmax_wrong_axis");

  // bps-export
  fs::path bps_out;
  std::optional<int> bps_count;
  std::optional<double> bps_diameter;
  auto* b = app.add_subcommand("bps-export", "write the basis point set as CSV");
  common(b);
  b->add_option("--config", config, "model config JSON");
  b->add_option("--count", bps_count);
  b->add_option("--diameter", bps_diameter);
  b->add_option("--out", bps_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    std::stringstream o, er;
    const int code = app.exit(ex, o, er);
    out << o.str();
    err << er.str();
    return code == 0 ? kOk : kConfigError;
  }

  try {
    const std::uint64_t seed = resolve_seed(seed_flag);
    if (g->parsed()) {
      generate_dataset(gen, seed, gen_out, threads);
      out << "wrote " << gen.frames << " frames to " << gen_out.string() << "\n";
    } else if (r->parsed()) {
      rec.config = config;
      rec.threads = threads;
      const auto pred = reconstruct_dataset(rec, seed, err);
      io::write_text_atomic(rec.out, dump_json(pred));
    } else if (t->parsed()) {
      auto cfg = load_model_config(config);
      TrainOptions topt;
      if (config) {
        const auto j = read_json(*config);
        if (j.contains("train")) topt = j.at("train").get<TrainOptions>();
      }
      if (steps) topt.steps = *steps;
      if (lr) topt.lr = *lr;
      if (schedule) topt.schedule = *schedule;
      if (batch) topt.batch = *batch;
      topt.randomize_views = topt.randomize_views || randomize;
      topt.gt_root = topt.gt_root || train_gt_root;
      topt.threads = threads;
      topt.seed = seed;
      if (topt.steps < 0) throw ConfigError("--steps must be >= 0");
      Model m = resume ? (require_file(*resume, "checkpoint"), model_from_store(cfg, load_checkpoint(*resume))) : make_model(cfg);
      const auto ds = load_dataset(train_data, threads);
      std::string csv = "step,loss,lr\n";
      char line[96];
      const auto trace = train(m, ds.frames, topt, [&](const StepRecord& s) {
        std::snprintf(line, sizeof line, "%llu,%.10g,%.6g\n", static_cast<unsigned long long>(s.step), s.loss, s.lr);
        csv += line;
        if (!quiet && topt.log_every > 0 && (s.step + 1) % static_cast<std::uint64_t>(topt.log_every) == 0) err << line;
      });
      save_checkpoint(m.params, train_out);
      io::write_text_atomic(fs::path(train_out.string() + ".loss.csv"), csv);
      if (!quiet) out << "trained " << trace.size() << " steps; checkpoint at step " << m.params.step() << " -> " << train_out.string() << "\n";
    } else if (f->parsed()) {
      require_file(kp_path, "keypoint file");
      require_file(rig_path, "rig file");
      const auto rig = rig_from_json(read_json(rig_path));
      const auto views = parse_keypoints(read_json(kp_path), rig);
      fit_opt.fixed_root = parse_vec3(fixed_root, "--fixed-root");
      const auto toy = make_toy_hand_model(fit_vertices);
      const auto res = poemkit::fit(toy, views, fit_opt);
      io::write_text_atomic(fit_out, dump_json(fit_result_json(res)));
      out << "fit: loss " << res.initial_loss << " -> " << res.final_loss << "\n";
    } else if (e->parsed()) {
      require_file(pred_path, "predictions");
      const auto ds = load_dataset(eval_data, threads);
      const auto report = evaluate_predictions(read_json(pred_path), ds, lo, hi);
      if (eval_out) io::write_text_atomic(*eval_out, dump_json(json(report)));
      out << format_report_table(report);
    } else if (v->parsed()) {
      return run_verify(mutate, out);
    } else if (b->parsed()) {
      auto cfg = load_model_config(config);
      if (bps_count) cfg.basis_points = *bps_count;
      if (bps_diameter) cfg.diameter = *bps_diameter;
      const auto bps = generate_bps(cfg.basis_points, cfg.diameter, seed_flag || std::getenv("POEMKIT_SEED") ? seed : basis_seed(cfg));
      std::string csv = "x,y,z\n";
      char line[96];
      for (int i = 0; i < bps.size(); ++i) {
        std::snprintf(line, sizeof line, "%.17g,%.17g,%.17g\n", bps.points(i, 0), bps.points(i, 1), bps.points(i, 2));
        csv += line;
      }
      io::write_text_atomic(bps_out, csv);
    }
    return kOk;
  } catch (const DegenerateError& ex) {
    err << "error (degenerate): " << ex.what() << "\n";
    return kDegenerate;
  } catch (const Error& ex) {
    err << "error: " << ex.what() << "\n";
    return kConfigError;
  } catch (const json::exception& ex) {
    err << "error (json): " << ex.what() << "\n";
    return kConfigError;
  } catch (const std::filesystem::filesystem_error& ex) {
    err << "error (io): " << ex.what() << "\n";
    return kConfigError;
  }
}

}  // namespace poemkit::cli
