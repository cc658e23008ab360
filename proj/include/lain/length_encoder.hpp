#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lain/autodiff.hpp"
#include "lain/nn.hpp"

namespace lain {

/// [sin(L w_1) .. sin(L w_n), cos(L w_1) .. cos(L w_n)]
inline std::vector<double> fourier_features(double length, std::span<const double> omega) {
  if (length < 0) throw DomainError("sequence length must be nonnegative");
  const std::size_t n = omega.size();
  std::vector<double> f(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    f[i] = std::sin(length * omega[i]);
    f[n + i] = std::cos(length * omega[i]);
  }
  return f;
}

/// Batched Fourier features: one row per length, gradients flow into omega.
inline Var fourier_features(Tape& t, Var omega, std::span<const double> lengths) {
  const std::vector<double> w = t.value(omega).data();
  const std::size_t n = w.size();
  Tensor out({lengths.size(), 2 * n});
  for (std::size_t r = 0; r < lengths.size(); ++r) {
    const auto f = fourier_features(lengths[r], w);
    std::copy(f.begin(), f.end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * 2 * n));
  }
  std::vector<double> ls(lengths.begin(), lengths.end());
  return t.record(
      std::move(out), {omega},
      [omega, ls = std::move(ls), n](Tape& tp, std::uint32_t self) {
        auto g = tp.grad(self);
        auto gw = tp.grad(omega);
        const auto& w2 = tp.value(omega).data();
        for (std::size_t r = 0; r < ls.size(); ++r) {
          const double L = ls[r];
          const double* gr = g.data() + r * 2 * n;
          for (std::size_t i = 0; i < n; ++i) {
            gw[i] += gr[i] * L * std::cos(L * w2[i]) - gr[n + i] * L * std::sin(L * w2[i]);
          }
        }
      },
      "fourier_features");
}

struct LengthEncoderConfig {
  std::size_t d = 64;        // output (backbone embedding) width
  std::size_t d_f = 32;      // number of learnable frequencies
  std::size_t hidden = 512;  // Linear and MLP width
  double ln_eps = 1e-5;
};

struct LengthEmbedding {
  Tensor h_len;
  std::int64_t source_length = 0;
};

/// Spectral length encoder:
///   f     = [sin(L w); cos(L w)]
///   h_len = MLP(LayerNorm(Linear(f)))
/// with a two-layer ReLU MLP (hidden -> hidden -> d) and no output activation.
class SpectralLengthEncoder {
 public:
  SpectralLengthEncoder() = default;

  SpectralLengthEncoder(ParameterStore& store, const LengthEncoderConfig& cfg, std::uint64_t seed,
                        const std::string& prefix = "sle")
      : cfg_(cfg) {
    Tensor omega({cfg.d_f});
    for (std::size_t i = 0; i < cfg.d_f; ++i) {
      omega[i] = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(cfg.d_f));
    }
    omega_ = &store.add(prefix + ".omega", std::move(omega));
    proj_ = make_dense(store, prefix + ".linear", 2 * cfg.d_f, cfg.hidden, seed);
    ln_gain_ = &store.add(prefix + ".ln.gain", Tensor({cfg.hidden}, 1.0));
    ln_bias_ = &store.add(prefix + ".ln.bias", Tensor({cfg.hidden}));
    mlp_.push_back(make_dense(store, prefix + ".mlp0", cfg.hidden, cfg.hidden, seed, Activation::relu));
    mlp_.push_back(make_dense(store, prefix + ".mlp1", cfg.hidden, cfg.d, seed));
  }

  const LengthEncoderConfig& config() const { return cfg_; }
  Parameter& omega() const { return *omega_; }

  Var fourier(Tape& t, std::span<const double> lengths) const {
    return fourier_features(t, t.param(*omega_), lengths);
  }

  /// One row of h_len per requested length.
  Var encode(Tape& t, std::span<const double> lengths) const {
    Var f = fourier(t, lengths);
    Var x = dense_forward(t, f, proj_);
    x = layer_norm(t, x, t.param(*ln_gain_), t.param(*ln_bias_), cfg_.ln_eps);
    return mlp_forward(t, x, mlp_);
  }

  LengthEmbedding encode_length(std::int64_t length) const {
    if (length < 0) throw DomainError("sequence length must be nonnegative");
    Tape t;
    const double L = static_cast<double>(length);
    Var h = encode(t, std::span<const double>(&L, 1));
    Tensor out = t.value(h);
    out.reshape({cfg_.d});
    return {std::move(out), length};
  }

  static std::size_t param_count(const LengthEncoderConfig& c) {
    return c.d_f + dense_param_count(2 * c.d_f, c.hidden) + 2 * c.hidden + dense_param_count(c.hidden, c.hidden) +
           dense_param_count(c.hidden, c.d);
  }

 private:
  LengthEncoderConfig cfg_;
  Parameter* omega_ = nullptr;
  DenseLayer proj_;
  Parameter* ln_gain_ = nullptr;
  Parameter* ln_bias_ = nullptr;
  std::vector<DenseLayer> mlp_;
};

}  // namespace lain
