#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "meshnet/errors.hpp"
#include "meshnet/rng.hpp"
#include "meshnet/tensor.hpp"

namespace meshnet {

/// Adam with bias correction. Defaults: lr 1e-3, beta1 0.9, beta2 0.999,
/// eps 1e-8; fine-tuning drops lr to 1e-5.
template <typename T>
struct AdamState {
  std::int64_t t = 0;
  T lr = static_cast<T>(1e-3);
  T beta1 = static_cast<T>(0.9);
  T beta2 = static_cast<T>(0.999);
  T eps = static_cast<T>(1e-8);
  std::vector<std::vector<T>> m, v;  // first/second moments per parameter

  void reset_moments() {
    m.clear();
    v.clear();
    t = 0;
  }
};

/// One Adam update over a parameter list. Moment buffers are lazily sized
/// on the first call and must stay aligned with `params` afterwards.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params,
               const std::vector<const Tensor<T>*>& grads, AdamState<T>& state) {
  if (params.size() != grads.size())
    throw ShapeError("adam_step: params/grads size mismatch");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i]->values.size(), T(0));
      state.v[i].assign(params[i]->values.size(), T(0));
    }
  }
  if (state.m.size() != params.size())
    throw ShapeError("adam_step: state does not match parameter count");

  state.t += 1;
  const T bc1 = T(1) - std::pow(state.beta1, static_cast<T>(state.t));
  const T bc2 = T(1) - std::pow(state.beta2, static_cast<T>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->values;
    const auto& g = grads[i]->values;
    if (p.size() != g.size())
      throw ShapeError("adam_step: gradient size mismatch at parameter " +
                       std::to_string(i));
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = state.beta1 * m[j] + (T(1) - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (T(1) - state.beta2) * g[j] * g[j];
      const T mhat = m[j] / bc1;
      const T vhat = v[j] / bc2;
      p[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

enum class InitScheme { xavier, identity };

/// Xavier-uniform fill for a conv kernel of shape (cout, cin, k, k, k):
/// bound = sqrt(6 / (fan_in + fan_out)) with fans counting kernel volume.
template <typename T>
void xavier_init(Tensor<T>& kernel, Rng& rng) {
  const std::int64_t kvol = kernel.shape[2] * kernel.shape[3] * kernel.shape[4];
  const double fan_in = static_cast<double>(kernel.shape[1] * kvol);
  const double fan_out = static_cast<double>(kernel.shape[0] * kvol);
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (auto& w : kernel.values)
    w = static_cast<T>(rng.uniform(-bound, bound));
}

/// Identity fill: center tap of each (oc, oc mod cin) pair is 1, everything
/// else 0, so a square layer passes its input through unchanged. Non-square
/// layers cycle input channels, which embeds (cout > cin) or truncates
/// (cout < cin) the channel set.
template <typename T>
void identity_init(Tensor<T>& kernel) {
  const std::int64_t cout = kernel.shape[0], cin = kernel.shape[1];
  const std::int64_t k = kernel.shape[2];
  std::fill(kernel.values.begin(), kernel.values.end(), T(0));
  const std::int64_t c = (k - 1) / 2;
  for (std::int64_t oc = 0; oc < cout; ++oc) {
    const std::int64_t ic = oc % cin;
    kernel.values[kernel.at5(oc, ic, c, c, c)] = T(1);
  }
}

}  // namespace meshnet
