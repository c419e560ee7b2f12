#pragma once

// The two-stage reconstructor: root from heatmaps, then basis placement,
// projected feature sampling, aggregation and the decoder. Also the training
// loop.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "poemkit/basis.hpp"
#include "poemkit/decoder.hpp"
#include "poemkit/errors.hpp"
#include "poemkit/hand.hpp"
#include "poemkit/nn.hpp"
#include "poemkit/root_stage.hpp"
#include "poemkit/synth.hpp"

namespace poemkit {

struct Model {
  ModelConfig cfg;
  HandTemplate tmpl;
  BasisPointSet bps;
  ParamStore params;
};

inline std::uint64_t basis_seed(const ModelConfig& cfg) { return mix_seed(cfg.seed, fnv1a("bps")); }

inline void add_model_params(ParamStore& s, const ModelConfig& cfg) {
  add_decoder_params(s, cfg);
  add_aggregation_params(s, static_cast<std::size_t>(cfg.d));
}

inline Model make_model(const ModelConfig& cfg) {
  cfg.validate();
  Model m{cfg, make_hand_template(cfg.n_vertices), generate_bps(cfg.basis_points, cfg.diameter, basis_seed(cfg)),
          ParamStore(cfg.seed)};
  add_model_params(m.params, cfg);
  return m;
}

/// Lists every difference between a loaded parameter store and the one the
/// config would create; empty when compatible.
inline std::vector<std::string> compatibility_problems(const ParamStore& loaded, const ModelConfig& cfg) {
  ParamStore expect(cfg.seed);
  add_model_params(expect, cfg);
  std::vector<std::string> out;
  for (const auto& e : expect.entries()) {
    if (!loaded.contains(e.name)) {
      out.push_back(e.name + ": missing from checkpoint (expected " + shape_str(e.value.shape()) + ")");
    } else if (loaded.get(e.name).shape() != e.value.shape()) {
      out.push_back(e.name + ": checkpoint " + shape_str(loaded.get(e.name).shape()) + " vs config " + shape_str(e.value.shape()));
    }
  }
  for (const auto& e : loaded.entries())
    if (!expect.contains(e.name)) out.push_back(e.name + ": not used by this config");
  return out;
}

/// Model with parameters taken from a checkpoint store.
inline Model model_from_store(const ModelConfig& cfg, ParamStore store) {
  const auto problems = compatibility_problems(store, cfg);
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match the model config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  return {cfg, make_hand_template(cfg.n_vertices), generate_bps(cfg.basis_points, cfg.diameter, basis_seed(cfg)),
          std::move(store)};
}

/// Deep copy of a parameter store (values and Adam moments).
inline ParamStore clone_store(const ParamStore& s) {
  ParamStore out(s.seed());
  for (const auto& e : s.entries()) {
    out.insert(e.name, e.value.detach());
    out.entries().back().adam_m = e.adam_m;
    out.entries().back().adam_v = e.adam_v;
  }
  out.set_step(s.step());
  return out;
}

// ---------------------------------------------------------------------------
// Inference

/// Stage 1. Multi-view frames triangulate the heatmap peaks; a single view
/// cannot, so it needs `fallback` (an external or ground-truth root).
inline Vec3 stage_one_root(const FrameBundle& f, const std::optional<Vec3>& fallback = std::nullopt) {
  if (f.views() >= 2) return estimate_root(f.heatmaps, f.rig).root;
  if (fallback) return *fallback;
  throw DegenerateError("single-view frame: the root cannot be triangulated; supply a root");
}

/// Stage 2 given a root.
template <typename T = double>
BasicDecoderOutput<T> forward(const Model& m, const FrameBundle& f, const Vec3& root, const BasicParamStore<T>& s) {
  if (f.features.size() != f.views()) throw ShapeError("frame has " + std::to_string(f.features.size()) + " grids for " + std::to_string(f.views()) + " cameras");
  std::vector<BasicTensor<T>> grids;
  const int stride = f.features.empty() ? m.cfg.stride : f.features.front().stride;
  for (const auto& g : f.features) {
    if (g.grid.rank() != 3 || g.grid.dim(2) != static_cast<std::size_t>(m.cfg.d)) {
      throw ShapeError("feature grid " + shape_str(g.grid.shape()) + " does not have d=" + std::to_string(m.cfg.d) + " channels");
    }
    if (g.stride != stride) throw ShapeError("feature grids use different strides");
    if constexpr (std::is_same_v<T, double>) {
      grids.push_back(g.grid);
    } else {
      const auto d = g.grid.data();
      grids.emplace_back(g.grid.shape(), std::vector<T>(d.begin(), d.end()));
    }
  }
  const auto placed = place_basis(m.bps, root);
  const auto views = sample_projected_features<T>(placed, f.rig, grids, stride, m.cfg.pe_temperature);
  const auto agg = projective_aggregation(views, s.get("agg.theta"), s.get("agg.phi"));
  return decoder_forward(agg, placed.relative, root, m.tmpl, m.cfg, s);
}

struct Prediction {
  Points3 points;  // [V + 21, 3]
  Vec3 root = Vec3::Zero();
  double seconds = 0;
};

inline Prediction reconstruct(const Model& m, const FrameBundle& f, const std::optional<Vec3>& fallback_root = std::nullopt) {
  const auto t0 = std::chrono::steady_clock::now();
  NoGradGuard ng;
  Prediction p;
  p.root = stage_one_root(f, fallback_root);
  p.points = to_matrix(forward(m, f, p.root, m.params).points);
  p.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return p;
}

/// Left hands: mirror the frame, reconstruct as a right hand, mirror back.
inline Prediction reconstruct_mirrored(const Model& m, const FrameBundle& f, const std::optional<Vec3>& fallback_root = std::nullopt) {
  std::optional<Vec3> fb;
  if (fallback_root) fb = Vec3(-fallback_root->x(), fallback_root->y(), fallback_root->z());
  auto p = reconstruct(m, mirror_frame(f), fb);
  p.points = mirror_points(p.points);
  p.root.x() = -p.root.x();
  return p;
}

// ---------------------------------------------------------------------------
// Training

/// Mean Euclidean distance between predicted and target points.
template <typename T>
BasicTensor<T> point_l2_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  return mean(sqrt(shift(sum(square(pred - target), 1), T(1e-12))));
}

template <typename T>
BasicTensor<T> training_loss(const BasicDecoderOutput<T>& out, const BasicTensor<T>& target, bool deep_supervision) {
  if (!deep_supervision || out.layer_points.size() <= 1) return point_l2_loss(out.points, target);
  BasicTensor<T> acc;
  for (const auto& lp : out.layer_points) {
    const auto l = point_l2_loss(lp, target);
    acc = acc.defined() ? acc + l : l;
  }
  return scale(acc, T(1.0 / static_cast<double>(out.layer_points.size())));
}

struct TrainOptions {
  int steps = 1000;
  int batch = 1;
  double lr = 1e-4;
  std::string schedule = "cosine";  // cosine | step | constant
  double final_lr_ratio = 0.1;      // cosine floor
  int step_every = 1000;            // step schedule
  double step_gamma = 0.5;
  bool randomize_views = false;
  bool gt_root = false;             // train on the true root instead of stage 1
  int threads = 1;
  std::uint64_t seed = 0;
  int log_every = 0;
};

inline void to_json(nlohmann::json& j, const TrainOptions& o) {
  j = {{"steps", o.steps}, {"batch", o.batch}, {"lr", o.lr}, {"schedule", o.schedule},
       {"final_lr_ratio", o.final_lr_ratio}, {"step_every", o.step_every}, {"step_gamma", o.step_gamma},
       {"randomize_views", o.randomize_views}, {"gt_root", o.gt_root}};
}

inline void from_json(const nlohmann::json& j, TrainOptions& o) {
  o.steps = j.value("steps", o.steps);
  o.batch = j.value("batch", o.batch);
  o.lr = j.value("lr", o.lr);
  o.schedule = j.value("schedule", o.schedule);
  o.final_lr_ratio = j.value("final_lr_ratio", o.final_lr_ratio);
  o.step_every = j.value("step_every", o.step_every);
  o.step_gamma = j.value("step_gamma", o.step_gamma);
  o.randomize_views = j.value("randomize_views", o.randomize_views);
  o.gt_root = j.value("gt_root", o.gt_root);
}

inline double learning_rate(const TrainOptions& o, std::uint64_t step) {
  if (o.schedule == "constant") return o.lr;
  if (o.schedule == "step") {
    if (o.step_every < 1) throw ConfigError("step schedule needs step_every >= 1");
    return o.lr * std::pow(o.step_gamma, static_cast<double>(step / static_cast<std::uint64_t>(o.step_every)));
  }
  if (o.schedule == "cosine") {
    const double t = o.steps > 0 ? std::min(1.0, static_cast<double>(step) / o.steps) : 1.0;
    const double floor = o.final_lr_ratio;
    return o.lr * (floor + (1 - floor) * 0.5 * (1 + std::cos(std::numbers::pi * t)));
  }
  throw ConfigError("unknown lr schedule '" + o.schedule + "' (cosine, step, constant)");
}

/// Frame the training step actually sees (view randomization applied).
inline FrameBundle training_view(const FrameBundle& f, const TrainOptions& o, std::uint64_t step, std::size_t slot) {
  if (!o.randomize_views) return f;
  return randomize_views(f, mix_seed(o.seed, step * 1315423911ULL + slot + 1));
}

/// Loss and gradients of one frame into `s` (accumulating).
inline double frame_loss_backward(const Model& m, const FrameBundle& f, const TrainOptions& o, ParamStore& s) {
  TapeScope scope;
  const Vec3 root = o.gt_root ? f.gt_root : stage_one_root(f, f.gt_root);
  const auto out = forward(m, f, root, s);
  const auto loss = training_loss(out, to_tensor(f.gt_points), m.cfg.deep_supervision);
  const double v = loss.item();
  if (std::isfinite(v)) backward(loss);
  return v;
}

struct StepRecord {
  std::uint64_t step = 0;
  double loss = 0;
  double lr = 0;
};

/// Adam on the mean-L2 point loss. Frames of a batch are spread over
/// `threads` workers, each with its own tape and parameter copy. Throws
/// DegenerateError naming the offending tensors on a non-finite loss or
/// gradient. The callback sees every step.
inline std::vector<StepRecord> train(Model& m, const std::vector<FrameBundle>& frames, const TrainOptions& o,
                                     const std::function<void(const StepRecord&)>& on_step = {}) {
  if (frames.empty()) throw ConfigError("train: no frames");
  if (o.batch < 1 || o.threads < 1) throw ConfigError("train: batch and threads must be >= 1");
  for (const auto& f : frames) {
    if (f.gt_points.rows() != m.cfg.queries()) {
      throw ShapeError("train: frame has " + std::to_string(f.gt_points.rows()) + " ground-truth points, model expects Q=" +
                       std::to_string(m.cfg.queries()));
    }
  }
  const auto workers = static_cast<std::size_t>(std::min(o.threads, o.batch));
  std::vector<ParamStore> copies;
  for (std::size_t w = 1; w < workers; ++w) copies.push_back(clone_store(m.params));
  std::vector<StepRecord> trace;
  const std::uint64_t start = m.params.step();
  for (std::uint64_t it = 0; it < static_cast<std::uint64_t>(o.steps); ++it) {
    const std::uint64_t step = start + it;
    Rng pick(mix_seed(o.seed, step));
    std::vector<std::size_t> batch(static_cast<std::size_t>(o.batch));
    for (auto& b : batch) b = static_cast<std::size_t>(pick.below(frames.size()));
    m.params.zero_grad();
    for (auto& c : copies) {
      c.zero_grad();
      for (std::size_t i = 0; i < c.entries().size(); ++i) {
        auto src = m.params.entries()[i].value.data();
        auto dst = c.entries()[i].value.mutable_data();
        std::copy(src.begin(), src.end(), dst.begin());
      }
    }
    std::vector<double> losses(batch.size());
    auto run = [&](std::size_t w) {
      ParamStore& s = w == 0 ? m.params : copies[w - 1];
      for (std::size_t b = w; b < batch.size(); b += workers)
        losses[b] = frame_loss_backward(m, training_view(frames[batch[b]], o, step, b), o, s);
    };
    if (workers == 1) {
      run(0);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run, w);
      run(0);
      for (auto& t : pool) t.join();
    }
    double loss = 0;
    for (double l : losses) loss += l;
    loss /= static_cast<double>(batch.size());
    auto grads = collect_grads(m.params);
    for (auto& c : copies) {
      const auto g = collect_grads(c);
      for (auto& [name, v] : grads) {
        const auto& add = g.at(name);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += add[i];
      }
    }
    std::string bad;
    for (auto& [name, v] : grads) {
      for (auto& x : v) {
        x /= static_cast<double>(batch.size());
        if (!std::isfinite(x)) {
          bad += (bad.empty() ? "" : ", ") + name;
          break;
        }
      }
    }
    if (!std::isfinite(loss) || !bad.empty()) {
      throw DegenerateError("non-finite training loss at step " + std::to_string(step) + " (loss " + std::to_string(loss) +
                            "); non-finite gradients in: " + (bad.empty() ? std::string("none") : bad));
    }
    const double lr = learning_rate(o, it);
    adam_step(m.params, grads, AdamOptions{lr});
    trace.push_back({step, loss, lr});
    if (on_step) on_step(trace.back());
  }
  m.params.zero_grad();
  return trace;
}

}  // namespace poemkit
