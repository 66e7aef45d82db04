#pragma once

// Seeded generators for synthetic models and inputs. All generated values
// are float32-representable so they survive the on-disk formats unchanged.

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "shiftcnn/io.hpp"
#include "shiftcnn/tensor.hpp"

namespace shiftcnn {

struct SyntheticGeometry {
  std::size_t channels = 3;
  std::size_t height = 8;
  std::size_t width = 8;
  std::vector<std::size_t> widths{8, 8, 4};  // output channels per layer
  std::size_t kernel = 3;
  double weight_stddev = 0.1;
  double bias_stddev = 0.05;
};

inline double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

inline FloatTensor random_normal_tensor(std::vector<std::size_t> dims, double stddev,
                                        std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  FloatTensor t(std::move(dims));
  for (double& v : t.data()) v = round_to_float(dist(rng));
  return t;
}

inline FloatTensor random_uniform_tensor(std::vector<std::size_t> dims, double lo, double hi,
                                         std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  FloatTensor t(std::move(dims));
  for (double& v : t.data()) v = round_to_float(dist(rng));
  return t;
}

/// Chain of same-padded stride-1 convolutions with ReLU between layers
/// (none after the last).
inline FloatModel random_float_model(const SyntheticGeometry& g, std::mt19937_64& rng) {
  FloatModel model;
  std::size_t in = g.channels;
  std::normal_distribution<double> bias_dist(0.0, g.bias_stddev);
  for (std::size_t i = 0; i < g.widths.size(); ++i) {
    LayerSpec spec;
    spec.name = "conv" + std::to_string(i + 1);
    spec.in_channels = in;
    spec.out_channels = g.widths[i];
    spec.kernel_h = spec.kernel_w = g.kernel;
    spec.in_h = g.height;
    spec.in_w = g.width;
    spec.stride = 1;
    spec.padding = g.kernel / 2;
    spec.has_bias = true;
    FloatLayer layer{spec, random_normal_tensor(spec.weight_dims(), g.weight_stddev, rng),
                     std::vector<double>(spec.out_channels), i + 1 < g.widths.size()};
    for (double& b : layer.bias) b = round_to_float(bias_dist(rng));
    model.layers.push_back(std::move(layer));
    in = g.widths[i];
  }
  return model;
}

}  // namespace shiftcnn
