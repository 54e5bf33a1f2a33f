#pragma once

// Named parameter tensors, initialization and the checkpoint file format.
//
// Checkpoint JSON (version 1):
//   {
//     "format": "sonoqa-checkpoint",
//     "version": 1,
//     "meta": { ... free-form, e.g. model config and optimizer step ... },
//     "parameters": { "<name>": { "shape": [..], "values": [..] }, ... }
//   }
// Values are written with round-trip precision, so save/load is lossless.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "sonoqa/autograd.hpp"
#include "sonoqa/random.hpp"

namespace sonoqa {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
class ParameterSet {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void add(const std::string& name, Tensor<T> t) {
    if (!params_.emplace(name, std::move(t)).second) throw ConfigError("duplicate parameter " + name);
  }

  // Uniform in +-sqrt(6 / (fan_in + fan_out)), drawn from a stream keyed by name.
  void add_glorot(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
    Tensor<T> t(std::move(shape));
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Rng rng = Rng::derive(seed, fnv1a(name));
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-limit, limit));
    add(name, std::move(t));
  }

  void add_zeros(const std::string& name, Shape shape) { add(name, Tensor<T>(std::move(shape))); }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Tensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }

  Map& map() noexcept { return params_; }
  const Map& map() const noexcept { return params_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  void fill(T v) {
    for (auto& [_, t] : params_) std::fill(t.values().begin(), t.values().end(), v);
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) { return a.params_ == b.params_; }

 private:
  Map params_;
};

// Parameters placed on a tape for one forward pass.
template <typename T>
class Binding {
 public:
  Binding(Tape<T>& tape, const ParameterSet<T>& params, bool requires_grad) : tape_(&tape) {
    for (const auto& [name, t] : params.map()) vars_.emplace(name, tape.leaf(t, requires_grad));
  }

  const Var<T>& operator()(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("parameter " + name + " not bound");
    return it->second;
  }

  Tape<T>& tape() const { return *tape_; }
  const std::map<std::string, Var<T>>& vars() const { return vars_; }

  // Adds scale * d(loss)/d(param) into `grads` (same names as the bound set).
  void accumulate_grads(ParameterSet<T>& grads, T scale = T(1)) const {
    for (const auto& [name, v] : vars_) {
      const Tensor<T> g = tape_->grad(v);
      auto& dst = grads.at(name);
      for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += scale * g[i];
    }
  }

 private:
  Tape<T>* tape_;
  std::map<std::string, Var<T>> vars_;
};

template <typename T>
ParameterSet<T> zeros_like(const ParameterSet<T>& p) {
  ParameterSet<T> z;
  for (const auto& [name, t] : p.map()) z.add_zeros(name, t.shape());
  return z;
}

template <typename T>
nlohmann::json params_to_json(const ParameterSet<T>& p) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, t] : p.map()) {
    std::vector<double> vals(t.values().begin(), t.values().end());
    j[name] = {{"shape", t.shape()}, {"values", vals}};
  }
  return j;
}

template <typename T>
ParameterSet<T> params_from_json(const nlohmann::json& j) {
  ParameterSet<T> p;
  for (const auto& [name, entry] : j.items()) {
    const auto shape = entry.at("shape").template get<Shape>();
    const auto vals = entry.at("values").template get<std::vector<double>>();
    p.add(name, Tensor<T>(shape, std::vector<T>(vals.begin(), vals.end())));
  }
  return p;
}

inline constexpr int kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterSet<T>& params, const nlohmann::json& meta) {
  nlohmann::json j;
  j["format"] = "sonoqa-checkpoint";
  j["version"] = kCheckpointVersion;
  j["meta"] = meta;
  j["parameters"] = params_to_json(params);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os << j.dump() << '\n';
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

struct CheckpointData {
  nlohmann::json meta;
  nlohmann::json parameters;
};

inline CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint " + path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "sonoqa-checkpoint") throw IoError(path.string() + " is not a sonoqa checkpoint");
  if (j.value("version", 0) != kCheckpointVersion)
    throw IoError("unsupported checkpoint version in " + path.string());
  return {j.at("meta"), j.at("parameters")};
}

}  // namespace sonoqa
