#pragma once

// Named parameters, initialization, Adam, and the checkpoint format.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "poemkit/errors.hpp"
#include "poemkit/io.hpp"
#include "poemkit/rng.hpp"
#include "poemkit/tensor.hpp"

namespace poemkit {

enum class Init {
  Zeros,
  FanInUniform,   // U(-sqrt(1/fan_in), +sqrt(1/fan_in))
  XavierUniform,  // U(-sqrt(6/(fan_in+fan_out)), +...)
  Normal,         // N(0, 1)
};

template <typename T>
class BasicParamStore {
 public:
  struct Entry {
    std::string name;
    BasicTensor<T> value;
    std::vector<T> adam_m;
    std::vector<T> adam_v;
  };

  explicit BasicParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  /// Registers a trainable tensor. Values are drawn from a stream derived
  /// from (seed, name), so they do not depend on registration order. Weight
  /// matrices are [fan_in, fan_out]; for biases pass `fan_in` explicitly.
  BasicTensor<T>& add(const std::string& name, Shape shape, Init init, std::size_t fan_in = 0) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
    const std::size_t n = shape_numel(shape);
    std::vector<T> data(n, T{0});
    Rng rng(mix_seed(seed_, fnv1a(name)));
    const std::size_t fi = fan_in ? fan_in : (shape.empty() ? 1 : shape.front());
    const std::size_t fo = shape.size() >= 2 ? shape.back() : fi;
    switch (init) {
      case Init::Zeros:
        break;
      case Init::FanInUniform: {
        const double b = std::sqrt(1.0 / static_cast<double>(fi));
        for (auto& v : data) v = static_cast<T>(rng.uniform(-b, b));
        break;
      }
      case Init::XavierUniform: {
        const double b = std::sqrt(6.0 / static_cast<double>(fi + fo));
        for (auto& v : data) v = static_cast<T>(rng.uniform(-b, b));
        break;
      }
      case Init::Normal:
        for (auto& v : data) v = static_cast<T>(rng.normal());
        break;
    }
    return insert(name, BasicTensor<T>(std::move(shape), std::move(data), true));
  }

  /// Registers an existing tensor as-is (used by checkpoint loading).
  BasicTensor<T>& insert(const std::string& name, BasicTensor<T> value) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
    value.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.push_back({name, std::move(value), {}, {}});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  const BasicTensor<T>& get(const std::string& name) const { return entries_.at(lookup(name)).value; }
  BasicTensor<T>& get(const std::string& name) { return entries_.at(lookup(name)).value; }

  std::size_t size() const { return entries_.size(); }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  std::uint64_t seed_;
  std::uint64_t step_ = 0;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParamStore = BasicParamStore<double>;

// ---------------------------------------------------------------------------
// Layers

/// x [.., in] W [in, out] (+ b [out]).
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>* bias = nullptr) {
  if (weight.rank() != 2 || x.dim(-1) != weight.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  BasicTensor<T> y;
  if (x.rank() == 2) {
    y = matmul(x, weight);
  } else {
    const std::size_t rows = x.numel() / x.dim(-1);
    Shape out = x.shape();
    out.back() = weight.dim(1);
    y = reshape(matmul(reshape(x, {rows, x.dim(-1)}), weight), out);
  }
  return bias ? add(y, *bias) : y;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
using GradMap = std::map<std::string, std::vector<T>>;

/// Gradients of every parameter; parameters the loss never reached get zeros
/// (their derivative is identically zero).
template <typename T>
GradMap<T> collect_grads(const BasicParamStore<T>& store) {
  GradMap<T> grads;
  for (const auto& e : store.entries()) {
    grads[e.name] = e.value.has_grad() ? std::vector<T>(e.value.grad().begin(), e.value.grad().end())
                                       : std::vector<T>(e.value.numel(), T{0});
  }
  return grads;
}

/// One bias-corrected Adam update; moments live in the store so a checkpoint
/// round-trip resumes exactly.
template <typename T>
void adam_step(BasicParamStore<T>& store, const GradMap<T>& grads, const AdamOptions& opt) {
  std::string missing;
  for (const auto& e : store.entries()) {
    auto it = grads.find(e.name);
    if (it == grads.end()) {
      missing += (missing.empty() ? "" : ", ") + e.name;
    } else if (it->second.size() != e.value.numel()) {
      throw ShapeError("adam_step: gradient for " + e.name + " has " + std::to_string(it->second.size()) +
                       " values, parameter has " + std::to_string(e.value.numel()));
    }
  }
  if (!missing.empty()) throw ConfigError("adam_step: missing gradients for " + missing);

  const std::uint64_t t = store.step() + 1;
  store.set_step(t);
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
  for (auto& e : store.entries()) {
    const auto& g = grads.at(e.name);
    if (e.adam_m.size() != g.size()) {
      e.adam_m.assign(g.size(), T{0});
      e.adam_v.assign(g.size(), T{0});
    }
    auto w = e.value.mutable_data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double m = opt.beta1 * static_cast<double>(e.adam_m[i]) + (1.0 - opt.beta1) * gi;
      const double v = opt.beta2 * static_cast<double>(e.adam_v[i]) + (1.0 - opt.beta2) * gi * gi;
      e.adam_m[i] = static_cast<T>(m);
      e.adam_v[i] = static_cast<T>(v);
      const double mhat = m / c1;
      const double vhat = v / c2;
      w[i] = static_cast<T>(static_cast<double>(w[i]) - opt.lr * mhat / (std::sqrt(vhat) + opt.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "POEMKIT\0"  u32 version  u64 seed  u8 dtype (0 = f64, 1 = f32)  u64 step  u64 count
//   count x { u32 name_len, name, u32 rank, u64 extents[rank], values }
//   u8 has_optimizer_state, then (if set) count x { m values, v values }
// All integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, double> || std::is_same_v<T, float>);
  return std::is_same_v<T, double> ? 0 : 1;
}

namespace detail {
template <typename T>
void put_values(io::ByteWriter& w, std::span<const T> values) {
  for (T v : values) {
    if constexpr (std::is_same_v<T, double>) {
      w.put_f64(v);
    } else {
      w.put_f32(v);
    }
  }
}
template <typename T>
std::vector<T> get_values(io::ByteReader& r, std::size_t n) {
  std::vector<T> out(n);
  for (auto& v : out) {
    if constexpr (std::is_same_v<T, double>) {
      v = r.get_f64();
    } else {
      v = r.get_f32();
    }
  }
  return out;
}
}  // namespace detail

template <typename T>
std::vector<char> encode_checkpoint(const BasicParamStore<T>& store) {
  io::ByteWriter w;
  w.put_bytes(std::string_view("POEMKIT\0", 8));
  w.put(kCheckpointVersion);
  w.put(store.seed());
  w.put(dtype_code<T>());
  w.put(store.step());
  w.put(static_cast<std::uint64_t>(store.size()));
  bool has_state = !store.entries().empty();
  for (const auto& e : store.entries()) {
    w.put(static_cast<std::uint32_t>(e.name.size()));
    w.put_bytes(e.name);
    w.put(static_cast<std::uint32_t>(e.value.rank()));
    for (auto x : e.value.shape()) w.put(static_cast<std::uint64_t>(x));
    detail::put_values<T>(w, e.value.data());
    has_state = has_state && e.adam_m.size() == e.value.numel();
  }
  w.put(static_cast<std::uint8_t>(has_state ? 1 : 0));
  if (has_state) {
    for (const auto& e : store.entries()) {
      detail::put_values<T>(w, std::span<const T>(e.adam_m));
      detail::put_values<T>(w, std::span<const T>(e.adam_v));
    }
  }
  return w.bytes();
}

template <typename T>
BasicParamStore<T> decode_checkpoint(std::vector<char> bytes, const std::string& source = "checkpoint") {
  io::ByteReader r(std::move(bytes), source);
  if (r.get_bytes(8) != std::string("POEMKIT\0", 8)) throw IoError(source + ": not a poemkit checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw IoError(source + ": unsupported version " + std::to_string(version));
  const auto seed = r.get<std::uint64_t>();
  const auto dtype = r.get<std::uint8_t>();
  if (dtype != dtype_code<T>()) throw IoError(source + ": dtype mismatch");
  const auto step = r.get<std::uint64_t>();
  const auto count = r.get<std::uint64_t>();
  BasicParamStore<T> store(seed);
  store.set_step(step);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::string name = r.get_bytes(len);
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& x : shape) x = static_cast<std::size_t>(r.get<std::uint64_t>());
    auto values = detail::get_values<T>(r, shape_numel(shape));
    store.insert(name, BasicTensor<T>(std::move(shape), std::move(values), true));
  }
  if (r.get<std::uint8_t>() != 0) {
    for (auto& e : store.entries()) {
      e.adam_m = detail::get_values<T>(r, e.value.numel());
      e.adam_v = detail::get_values<T>(r, e.value.numel());
    }
  }
  if (!r.at_end()) throw IoError(source + ": trailing bytes");
  return store;
}

template <typename T>
void save_checkpoint(const BasicParamStore<T>& store, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(store));
}

template <typename T = double>
BasicParamStore<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(io::read_file(path), path.string());
}

}  // namespace poemkit
