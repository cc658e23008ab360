#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "lain/autodiff.hpp"

namespace lain {

enum class Activation { identity, relu };

/// Affine map y = x W + b acting on row vectors. W is [in x out].
struct DenseLayer {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;  // optional
  Activation activation = Activation::identity;

  std::size_t in() const { return weight->tensor.rows(); }
  std::size_t out() const { return weight->tensor.cols(); }
};

/// Fan-based uniform (Xavier) initialization, seeded per parameter name so
/// the values do not depend on construction order.
inline Tensor xavier_uniform(std::size_t in, std::size_t out, std::uint64_t seed, const std::string& name) {
  Rng rng(seed_for(seed, name));
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor w({in, out});
  for (double& v : w.data()) v = rng.uniform(-a, a);
  return w;
}

inline DenseLayer make_dense(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                             std::uint64_t seed, Activation act = Activation::identity, bool with_bias = true) {
  DenseLayer layer;
  layer.weight = &store.add(name + ".weight", xavier_uniform(in, out, seed, name + ".weight"));
  if (with_bias) layer.bias = &store.add(name + ".bias", Tensor({out}));
  layer.activation = act;
  return layer;
}

inline Var dense_forward(Tape& t, Var x, const DenseLayer& layer) {
  if (t.value(x).cols() != layer.in()) {
    throw DimensionError("dense layer " + layer.weight->name + " expects " + std::to_string(layer.in()) +
                         " inputs, got shape " + shape_str(t.value(x).shape()));
  }
  Var y = matmul(t, x, t.param(*layer.weight));
  if (layer.bias) y = add_row(t, y, t.param(*layer.bias));
  if (layer.activation == Activation::relu) y = relu(t, y);
  return y;
}

/// Applies the layers in order. Dropout (inverted, rate `dropout`) follows
/// every layer except the last and only when `rng` is set.
inline Var mlp_forward(Tape& t, Var x, std::span<const DenseLayer> layers, double dropout = 0.0,
                       Rng* rng = nullptr) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i > 0 && layers[i - 1].out() != layers[i].in()) {
      throw DimensionError("mlp: layer " + layers[i - 1].weight->name + " outputs " +
                           std::to_string(layers[i - 1].out()) + " but " + layers[i].weight->name + " takes " +
                           std::to_string(layers[i].in()));
    }
    x = dense_forward(t, x, layers[i]);
    if (i + 1 < layers.size()) x = lain::dropout(t, x, dropout, rng);
  }
  return x;
}

inline std::size_t dense_param_count(std::size_t in, std::size_t out, bool with_bias = true) {
  return in * out + (with_bias ? out : 0);
}

}  // namespace lain
