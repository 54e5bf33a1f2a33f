#pragma once

// Feature extraction network: five stride-2 3x3 conv stages (C1..C5), each
// with a 1x1 stride-2 projection skip, plus the pooling heads used on top.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "sonoqa/autograd.hpp"
#include "sonoqa/image.hpp"
#include "sonoqa/params.hpp"
#include "sonoqa/pooling.hpp"

namespace sonoqa {

struct FenConfig {
  static constexpr std::array<std::size_t, 5> kBaseChannels{128, 256, 512, 1024, 2048};
  static constexpr std::size_t kKernel = 3;
  static constexpr std::size_t kStride = 2;
  static constexpr std::size_t kPadding = 1;

  double channel_scale = 16.0;

  // Per-stage widths after dividing by channel_scale; rejects non-integers.
  std::array<std::size_t, 5> channels() const {
    if (!(channel_scale > 0.0)) throw ConfigError("channel_scale must be positive");
    std::array<std::size_t, 5> out{};
    for (std::size_t s = 0; s < 5; ++s) {
      const double c = static_cast<double>(kBaseChannels[s]) / channel_scale;
      const double r = std::round(c);
      if (r < 1.0 || std::abs(c - r) > 1e-9)
        throw ConfigError("channel_scale " + std::to_string(channel_scale) + " gives non-integer width for C" +
                          std::to_string(s + 1));
      out[s] = static_cast<std::size_t>(r);
    }
    return out;
  }
};

inline std::string fen_name(std::size_t stage, const char* what) {
  return "fen.c" + std::to_string(stage + 1) + "." + what;
}

// Adds the backbone's parameters to `params`.
template <typename T>
void add_fen_params(ParameterSet<T>& params, const FenConfig& cfg, std::uint64_t seed) {
  const auto ch = cfg.channels();
  std::size_t in = 1;
  const std::size_t k = FenConfig::kKernel;
  for (std::size_t s = 0; s < 5; ++s) {
    params.add_glorot(fen_name(s, "w"), {ch[s], in, k, k}, in * k * k, ch[s] * k * k, seed);
    params.add_zeros(fen_name(s, "b"), {ch[s]});
    params.add_glorot(fen_name(s, "proj"), {ch[s], in, 1, 1}, in, ch[s], seed);
    in = ch[s];
  }
}

// Forward pass on a tape: input [1,H,W] -> {C1..C5}.
// Stage s computes relu(conv3x3_s2(x) + b) + proj1x1_s2(x).
template <typename T>
std::vector<Var<T>> fen_forward(const Binding<T>& p, const Var<T>& input) {
  auto& tape = p.tape();
  std::vector<Var<T>> maps;
  Var<T> x = input;
  for (std::size_t s = 0; s < 5; ++s) {
    const Var<T>& w = p(fen_name(s, "w"));
    const Var<T> residual = ag::relu(ag::conv2d(x, w, p(fen_name(s, "b")), FenConfig::kStride, FenConfig::kPadding));
    const Var<T>& proj = p(fen_name(s, "proj"));
    const Var<T> zero_bias = tape.constant(Tensor<T>({proj.shape()[0]}));
    const Var<T> skip = ag::conv2d(x, proj, zero_bias, FenConfig::kStride, 0);
    x = ag::add(residual, skip);
    maps.push_back(x);
  }
  return maps;
}

inline void check_fen_input(std::size_t width, std::size_t height) {
  if (width < 32 || height < 32) throw InputError("image must be at least 32x32 pixels");
  if (width % 32 != 0 || height % 32 != 0) throw InputError("image extents must be divisible by 32");
}

template <typename T>
Tensor<T> image_tensor(const GrayImage& img) {
  Tensor<T> t({1, img.height(), img.width()});
  for (std::size_t i = 0; i < img.size(); ++i) t[i] = static_cast<T>(img.pixels()[i]);
  return t;
}

struct FeatureMaps {
  std::vector<Tensor<double>> stages;  // C1..C5
};

// Standalone backbone with its own parameters; the full detector shares the
// same parameter names inside a larger set.
template <typename T>
class FeatureExtractor {
 public:
  FeatureExtractor(FenConfig cfg, std::uint64_t seed) : cfg_(cfg) { add_fen_params(params_, cfg_, seed); }

  const FenConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }

  FeatureMaps extract(const GrayImage& image) const {
    check_fen_input(image.width(), image.height());
    Tape<T> tape;
    Binding<T> bound(tape, params_, false);
    const auto maps = fen_forward(bound, tape.constant(image_tensor<T>(image)));
    FeatureMaps out;
    for (const auto& m : maps) out.stages.push_back(m.value().template cast<double>());
    return out;
  }

 private:
  FenConfig cfg_;
  ParameterSet<T> params_;
};

template <typename T>
FeatureExtractor<T> build_fen(const FenConfig& cfg, std::uint64_t seed) {
  return FeatureExtractor<T>(cfg, seed);
}

// Value-level conveniences over the tape ops.
inline Tensor<double> global_avg_pool(const Tensor<double>& map) {
  Tape<double> t;
  return ag::global_avg_pool(t.constant(map)).value();
}

inline Tensor<double> spp(const Tensor<double>& map, const std::vector<std::size_t>& levels) {
  Tape<double> t;
  return ag::spp(t.constant(map), levels).value();
}

inline const std::vector<std::size_t>& default_spp_levels() {
  static const std::vector<std::size_t> levels{1, 2, 4, 16};
  return levels;
}

}  // namespace sonoqa
