#pragma once

// Trainable layers (dense, conv, batch normalization), parameter
// initialization, and the Adam optimizer.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "hynet/common.hpp"
#include "hynet/tensor.hpp"

namespace hynet {

// A named trainable tensor with Adam moment state.
struct Parameter {
  std::string name;
  Tensor value;
  std::vector<double> adam_m, adam_v;
  std::size_t step_count = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    value.set_requires_grad(true);
    adam_m.assign(value.numel(), 0.0);
    adam_v.assign(value.numel(), 0.0);
  }
};

// ---------------------------------------------------------------------------
// Initialization.
// ---------------------------------------------------------------------------

// Zero-mean Gaussian with std sqrt(2/fan_in) — for layers followed by ReLU.
inline Tensor he_init(Shape shape, std::size_t fan_in, Rng& rng) {
  if (fan_in < 1) throw ContractError("he_init: fan_in must be >= 1");
  double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  return Tensor::randn(std::move(shape), rng, stddev);
}

// Uniform Glorot — for the final linear score layers (no ReLU after).
inline Tensor glorot_init(Shape shape, std::size_t fan_in, std::size_t fan_out,
                          Rng& rng) {
  if (fan_in < 1 || fan_out < 1)
    throw ContractError("glorot_init: fans must be >= 1");
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::size_t n = numel(shape);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-limit, limit);
  return Tensor::from(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

// One standard bias-corrected Adam update from the gradients currently held
// in each parameter's grad slot. Gradients are not cleared here; callers zero
// them at the start of the next step.
inline void adam_step(const std::vector<Parameter*>& params, double lr,
                      double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
  for (Parameter* p : params) {
    const std::vector<double>& g = p->value.grad();
    for (double gi : g)
      if (!std::isfinite(gi))
        throw TrainingError(msg("adam_step: non-finite gradient in parameter '",
                                p->name, "'"));
    p->step_count += 1;
    double t = static_cast<double>(p->step_count);
    double bc1 = 1.0 - std::pow(beta1, t);
    double bc2 = 1.0 - std::pow(beta2, t);
    std::vector<double>& v = p->value.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      p->adam_m[i] = beta1 * p->adam_m[i] + (1.0 - beta1) * g[i];
      p->adam_v[i] = beta2 * p->adam_v[i] + (1.0 - beta2) * g[i] * g[i];
      double mhat = p->adam_m[i] / bc1;
      double vhat = p->adam_v[i] / bc2;
      v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

inline void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->value.zero_grad();
}

// ---------------------------------------------------------------------------
// Layers.
// ---------------------------------------------------------------------------

struct Dense {
  Parameter weight, bias;  // weight: [out, in]

  Dense() = default;
  // init: "he" (ReLU follows) or "glorot" (linear score head).
  Dense(const std::string& name, std::size_t in, std::size_t out, Rng& rng,
        const std::string& init = "he")
      : weight(name + ".weight",
               init == "he" ? he_init({out, in}, in, rng)
                            : glorot_init({out, in}, in, out, rng)),
        bias(name + ".bias", Tensor::zeros({out})) {}

  Tensor operator()(const Tensor& x) const {
    return linear(x, weight.value, bias.value);
  }
  std::vector<Parameter*> params() { return {&weight, &bias}; }
};

struct Conv {
  Parameter kernel, bias;  // kernel: [K, C, kh, kw]
  std::size_t stride, padding;

  Conv() = default;
  Conv(const std::string& name, std::size_t in_ch, std::size_t out_ch,
       std::size_t ksize, std::size_t stride_, std::size_t padding_, Rng& rng)
      : kernel(name + ".weight",
               he_init({out_ch, in_ch, ksize, ksize}, in_ch * ksize * ksize,
                       rng)),
        bias(name + ".bias", Tensor::zeros({out_ch})),
        stride(stride_),
        padding(padding_) {}

  Tensor operator()(const Tensor& x) const {
    return conv2d(x, kernel.value, bias.value, stride, padding);
  }
  std::vector<Parameter*> params() { return {&kernel, &bias}; }
};

// Per-channel batch normalization over [B,C,H,W]. Train mode normalizes with
// biased batch statistics and updates running averages (unbiased variance in
// the running update, mainstream convention); eval mode is a fixed affine map.
struct BatchNorm2d {
  Parameter gamma, beta;
  std::vector<double> running_mean, running_var;
  double momentum = 0.1, eps = 1e-5;
  bool train_mode = true;

  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, std::size_t channels)
      : gamma(name + ".weight", Tensor::full({channels}, 1.0)),
        beta(name + ".bias", Tensor::zeros({channels})),
        running_mean(channels, 0.0),
        running_var(channels, 1.0) {}

  Tensor operator()(const Tensor& x) {
    if (!train_mode)
      return bn2d_eval(x, gamma.value, beta.value, running_mean, running_var,
                       eps);
    std::vector<double> bmean, bvar;
    Tensor y = bn2d_train(x, gamma.value, beta.value, eps, &bmean, &bvar);
    double n = static_cast<double>(x.size(0) * x.size(2) * x.size(3));
    double unbias = n > 1.0 ? n / (n - 1.0) : 1.0;
    for (std::size_t c = 0; c < running_mean.size(); ++c) {
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * bmean[c];
      running_var[c] =
          (1.0 - momentum) * running_var[c] + momentum * unbias * bvar[c];
    }
    return y;
  }
  std::vector<Parameter*> params() { return {&gamma, &beta}; }
};

}  // namespace hynet
