#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "meshnet/errors.hpp"
#include "meshnet/rng.hpp"
#include "meshnet/tensor.hpp"

namespace meshnet {

// ---------------------------------------------------------------------------
// Dilated 3-d convolution.
//
// out[n,oc,o] = bias[oc] + sum_{ic,j} K[oc,ic,j] * in[n,ic, o + l*(k-1-j) - p]
//
// which is true convolution (kernel index runs against the input offset),
// not sliding correlation. Output spatial extent per axis is
// in + 2p - l*(k-1). The inner loop is a contiguous axpy over x lines with
// the tap's valid output range precomputed, so zero padding costs nothing.
// ---------------------------------------------------------------------------

namespace detail {

struct ConvGeom {
  std::int64_t batch, cin, cout, k, l, p;
  std::int64_t xi, yi, zi;  // input spatial
  std::int64_t xo, yo, zo;  // output spatial
};

template <typename T>
ConvGeom conv_geometry(const Tensor<T>& in, const Tensor<T>& kernel,
                       std::int64_t dilation, std::int64_t padding) {
  if (in.shape.size() != 5) throw ShapeError("conv3d: input must be 5-d (n,c,x,y,z)");
  if (kernel.shape.size() != 5) throw ShapeError("conv3d: kernel must be 5-d");
  if (kernel.shape[2] != kernel.shape[3] || kernel.shape[2] != kernel.shape[4])
    throw ShapeError("conv3d: kernel must be cubic");
  if (dilation < 1) throw ShapeError("conv3d: dilation must be >= 1");
  if (padding < 0) throw ShapeError("conv3d: padding must be >= 0");
  ConvGeom g;
  g.batch = in.shape[0];
  g.cin = in.shape[1];
  g.cout = kernel.shape[0];
  g.k = kernel.shape[2];
  g.l = dilation;
  g.p = padding;
  if (kernel.shape[1] != g.cin)
    throw ShapeError("conv3d: input channels " + std::to_string(g.cin) +
                     " do not match kernel in_channels " +
                     std::to_string(kernel.shape[1]));
  const std::int64_t span = g.l * (g.k - 1);
  g.xi = in.shape[2]; g.yi = in.shape[3]; g.zi = in.shape[4];
  g.xo = g.xi + 2 * g.p - span;
  g.yo = g.yi + 2 * g.p - span;
  g.zo = g.zi + 2 * g.p - span;
  if (g.xo < 1 || g.yo < 1 || g.zo < 1)
    throw ShapeError("conv3d: effective kernel span " + std::to_string(span + 1) +
                     " exceeds padded input " + in.shape_str());
  return g;
}

// Valid output range [lo, hi) of one tap whose input index is out + d.
inline void tap_range(std::int64_t d, std::int64_t out_extent,
                      std::int64_t in_extent, std::int64_t& lo, std::int64_t& hi) {
  lo = std::max<std::int64_t>(0, -d);
  hi = std::min(out_extent, in_extent - d);
}

}  // namespace detail

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& in, const Tensor<T>& kernel,
                         const Tensor<T>& bias, int dilation, int padding) {
  const auto g = detail::conv_geometry(in, kernel, dilation, padding);
  if (bias.size() != g.cout) throw ShapeError("conv3d: bias size mismatch");

  Tensor<T> out({g.batch, g.cout, g.xo, g.yo, g.zo});
  const std::int64_t in_slab = g.xi * g.yi * g.zi;
  const std::int64_t out_slab = g.xo * g.yo * g.zo;
  const T* kb = kernel.data();

  for (std::int64_t n = 0; n < g.batch; ++n)
    for (std::int64_t oc = 0; oc < g.cout; ++oc) {
      T* ob = out.data() + (n * g.cout + oc) * out_slab;
      std::fill(ob, ob + out_slab, bias.values[oc]);
      for (std::int64_t ic = 0; ic < g.cin; ++ic) {
        const T* ib = in.data() + (n * g.cin + ic) * in_slab;
        const T* kslab = kb + (oc * g.cin + ic) * g.k * g.k * g.k;
        for (std::int64_t jz = 0; jz < g.k; ++jz) {
          const std::int64_t dz = g.l * (g.k - 1 - jz) - g.p;
          std::int64_t z0, z1;
          detail::tap_range(dz, g.zo, g.zi, z0, z1);
          for (std::int64_t jy = 0; jy < g.k; ++jy) {
            const std::int64_t dy = g.l * (g.k - 1 - jy) - g.p;
            std::int64_t y0, y1;
            detail::tap_range(dy, g.yo, g.yi, y0, y1);
            for (std::int64_t jx = 0; jx < g.k; ++jx) {
              const std::int64_t dx = g.l * (g.k - 1 - jx) - g.p;
              std::int64_t x0, x1;
              detail::tap_range(dx, g.xo, g.xi, x0, x1);
              if (x0 >= x1 || y0 >= y1 || z0 >= z1) continue;
              const T w = kslab[jx + g.k * (jy + g.k * jz)];
              for (std::int64_t oz = z0; oz < z1; ++oz) {
                const std::int64_t iz = oz + dz;
                for (std::int64_t oy = y0; oy < y1; ++oy) {
                  const T* src = ib + x0 + dx + g.xi * ((oy + dy) + g.yi * iz);
                  T* dst = ob + x0 + g.xo * (oy + g.yo * oz);
                  const std::int64_t len = x1 - x0;
                  for (std::int64_t i = 0; i < len; ++i) dst[i] += w * src[i];
                }
              }
            }
          }
        }
      }
    }
  return out;
}

/// Accumulates conv gradients into the buffers that are non-null. Buffers
/// must be pre-sized (typically zero-filled by the caller).
template <typename T>
void conv3d_backward(const Tensor<T>& grad_out, const Tensor<T>& in,
                     const Tensor<T>& kernel, int dilation, int padding,
                     Tensor<T>* grad_in, Tensor<T>* grad_kernel,
                     Tensor<T>* grad_bias) {
  const auto g = detail::conv_geometry(in, kernel, dilation, padding);
  if (grad_out.shape != std::vector<std::int64_t>{g.batch, g.cout, g.xo, g.yo, g.zo})
    throw ShapeError("conv3d_backward: grad_out shape mismatch");
  const std::int64_t in_slab = g.xi * g.yi * g.zi;
  const std::int64_t out_slab = g.xo * g.yo * g.zo;

  if (grad_bias) {
    for (std::int64_t n = 0; n < g.batch; ++n)
      for (std::int64_t oc = 0; oc < g.cout; ++oc) {
        const T* gb = grad_out.data() + (n * g.cout + oc) * out_slab;
        T acc = 0;
        for (std::int64_t i = 0; i < out_slab; ++i) acc += gb[i];
        grad_bias->values[oc] += acc;
      }
  }

  for (std::int64_t n = 0; n < g.batch; ++n)
    for (std::int64_t oc = 0; oc < g.cout; ++oc) {
      const T* gb = grad_out.data() + (n * g.cout + oc) * out_slab;
      for (std::int64_t ic = 0; ic < g.cin; ++ic) {
        const T* ib = in.data() + (n * g.cin + ic) * in_slab;
        T* gib = grad_in ? grad_in->data() + (n * g.cin + ic) * in_slab : nullptr;
        const std::int64_t koff = (oc * g.cin + ic) * g.k * g.k * g.k;
        const T* kslab = kernel.data() + koff;
        T* gk = grad_kernel ? grad_kernel->data() + koff : nullptr;
        for (std::int64_t jz = 0; jz < g.k; ++jz) {
          const std::int64_t dz = g.l * (g.k - 1 - jz) - g.p;
          std::int64_t z0, z1;
          detail::tap_range(dz, g.zo, g.zi, z0, z1);
          for (std::int64_t jy = 0; jy < g.k; ++jy) {
            const std::int64_t dy = g.l * (g.k - 1 - jy) - g.p;
            std::int64_t y0, y1;
            detail::tap_range(dy, g.yo, g.yi, y0, y1);
            for (std::int64_t jx = 0; jx < g.k; ++jx) {
              const std::int64_t dx = g.l * (g.k - 1 - jx) - g.p;
              std::int64_t x0, x1;
              detail::tap_range(dx, g.xo, g.xi, x0, x1);
              if (x0 >= x1 || y0 >= y1 || z0 >= z1) continue;
              const std::int64_t ji = jx + g.k * (jy + g.k * jz);
              const T w = kslab[ji];
              const std::int64_t len = x1 - x0;
              // fixed-order unrolled accumulators keep the kernel-gradient
              // reduction deterministic while letting it vectorize
              T acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
              for (std::int64_t oz = z0; oz < z1; ++oz) {
                const std::int64_t iz = oz + dz;
                for (std::int64_t oy = y0; oy < y1; ++oy) {
                  const std::int64_t src_off = x0 + dx + g.xi * ((oy + dy) + g.yi * iz);
                  const T* go = gb + x0 + g.xo * (oy + g.yo * oz);
                  if (gk) {
                    const T* src = ib + src_off;
                    std::int64_t i = 0;
                    for (; i + 8 <= len; i += 8)
                      for (int u = 0; u < 8; ++u)
                        acc[u] += go[i + u] * src[i + u];
                    for (; i < len; ++i) acc[i % 8] += go[i] * src[i];
                  }
                  if (gib) {
                    T* gi = gib + src_off;
                    for (std::int64_t i = 0; i < len; ++i) gi[i] += w * go[i];
                  }
                }
              }
              if (gk)
                gk[ji] += ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
                          ((acc[4] + acc[5]) + (acc[6] + acc[7]));
            }
          }
        }
      }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization over (batch, x, y, z) per channel.
// ---------------------------------------------------------------------------

template <typename T>
struct BnContext {
  std::vector<T> mean;    // batch mean per channel
  std::vector<T> invstd;  // 1/sqrt(var + eps) per channel
};

template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& in, const Tensor<T>& gamma,
                            const Tensor<T>& beta, Tensor<T>& running_mean,
                            Tensor<T>& running_var, T eps, T momentum,
                            bool train, BnContext<T>* ctx = nullptr) {
  if (in.shape.size() != 5) throw ShapeError("batchnorm: input must be 5-d");
  const std::int64_t batch = in.shape[0], ch = in.shape[1];
  const std::int64_t slab = in.shape[2] * in.shape[3] * in.shape[4];
  if (gamma.size() != ch || beta.size() != ch || running_mean.size() != ch ||
      running_var.size() != ch)
    throw ShapeError("batchnorm: channel parameter size mismatch");

  Tensor<T> out(in.shape);
  const std::int64_t nr = batch * slab;  // reduction size per channel
  for (std::int64_t c = 0; c < ch; ++c) {
    T mean, invstd;
    if (train) {
      T sum = 0;
      for (std::int64_t n = 0; n < batch; ++n) {
        const T* ib = in.data() + (n * ch + c) * slab;
        for (std::int64_t i = 0; i < slab; ++i) sum += ib[i];
      }
      mean = sum / static_cast<T>(nr);
      T sq = 0;
      for (std::int64_t n = 0; n < batch; ++n) {
        const T* ib = in.data() + (n * ch + c) * slab;
        for (std::int64_t i = 0; i < slab; ++i) {
          const T d = ib[i] - mean;
          sq += d * d;
        }
      }
      const T var = sq / static_cast<T>(nr);
      invstd = T(1) / std::sqrt(var + eps);
      const T var_unbiased =
          nr > 1 ? sq / static_cast<T>(nr - 1) : var;
      running_mean.values[c] =
          (T(1) - momentum) * running_mean.values[c] + momentum * mean;
      running_var.values[c] =
          (T(1) - momentum) * running_var.values[c] + momentum * var_unbiased;
    } else {
      mean = running_mean.values[c];
      invstd = T(1) / std::sqrt(running_var.values[c] + eps);
    }
    if (ctx) {
      if (ctx->mean.size() != static_cast<std::size_t>(ch)) {
        ctx->mean.assign(ch, T(0));
        ctx->invstd.assign(ch, T(0));
      }
      ctx->mean[c] = mean;
      ctx->invstd[c] = invstd;
    }
    const T gsc = gamma.values[c] * invstd;
    const T b = beta.values[c] - gsc * mean;
    for (std::int64_t n = 0; n < batch; ++n) {
      const T* ib = in.data() + (n * ch + c) * slab;
      T* ob = out.data() + (n * ch + c) * slab;
      for (std::int64_t i = 0; i < slab; ++i) ob[i] = gsc * ib[i] + b;
    }
  }
  return out;
}

/// Inference-mode normalization from stored running statistics.
template <typename T>
Tensor<T> batchnorm_infer(const Tensor<T>& in, const Tensor<T>& gamma,
                          const Tensor<T>& beta, const Tensor<T>& running_mean,
                          const Tensor<T>& running_var, T eps) {
  if (in.shape.size() != 5) throw ShapeError("batchnorm: input must be 5-d");
  const std::int64_t batch = in.shape[0], ch = in.shape[1];
  const std::int64_t slab = in.shape[2] * in.shape[3] * in.shape[4];
  if (gamma.size() != ch || beta.size() != ch || running_mean.size() != ch ||
      running_var.size() != ch)
    throw ShapeError("batchnorm: channel parameter size mismatch");
  Tensor<T> out(in.shape);
  for (std::int64_t c = 0; c < ch; ++c) {
    const T invstd = T(1) / std::sqrt(running_var.values[c] + eps);
    const T gsc = gamma.values[c] * invstd;
    const T b = beta.values[c] - gsc * running_mean.values[c];
    for (std::int64_t n = 0; n < batch; ++n) {
      const T* ib = in.data() + (n * ch + c) * slab;
      T* ob = out.data() + (n * ch + c) * slab;
      for (std::int64_t i = 0; i < slab; ++i) ob[i] = gsc * ib[i] + b;
    }
  }
  return out;
}

/// Train-mode backward; batch statistics are part of the graph, so the
/// gradient includes the mean/variance terms.
template <typename T>
void batchnorm_backward(const Tensor<T>& grad_out, const Tensor<T>& in,
                        const Tensor<T>& gamma, const BnContext<T>& ctx,
                        Tensor<T>* grad_in, Tensor<T>* grad_gamma,
                        Tensor<T>* grad_beta) {
  const std::int64_t batch = in.shape[0], ch = in.shape[1];
  const std::int64_t slab = in.shape[2] * in.shape[3] * in.shape[4];
  const std::int64_t nr = batch * slab;
  for (std::int64_t c = 0; c < ch; ++c) {
    const T mean = ctx.mean[c], invstd = ctx.invstd[c];
    T sum_g = 0, sum_gx = 0;
    for (std::int64_t n = 0; n < batch; ++n) {
      const T* gb = grad_out.data() + (n * ch + c) * slab;
      const T* ib = in.data() + (n * ch + c) * slab;
      for (std::int64_t i = 0; i < slab; ++i) {
        sum_g += gb[i];
        sum_gx += gb[i] * (ib[i] - mean) * invstd;
      }
    }
    if (grad_beta) grad_beta->values[c] += sum_g;
    if (grad_gamma) grad_gamma->values[c] += sum_gx;
    if (grad_in) {
      const T gsc = gamma.values[c] * invstd;
      const T mg = sum_g / static_cast<T>(nr);
      const T mgx = sum_gx / static_cast<T>(nr);
      for (std::int64_t n = 0; n < batch; ++n) {
        const T* gb = grad_out.data() + (n * ch + c) * slab;
        const T* ib = in.data() + (n * ch + c) * slab;
        T* gi = grad_in->data() + (n * ch + c) * slab;
        for (std::int64_t i = 0; i < slab; ++i) {
          const T xhat = (ib[i] - mean) * invstd;
          gi[i] += gsc * (gb[i] - mg - xhat * mgx);
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// ReLU. Subgradient at 0 is defined as 0.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& in) {
  Tensor<T> out(in.shape);
  for (std::int64_t i = 0; i < in.size(); ++i)
    out.values[i] = in.values[i] > T(0) ? in.values[i] : T(0);
  return out;
}

template <typename T>
void relu_backward(const Tensor<T>& grad_out, const Tensor<T>& in,
                   Tensor<T>* grad_in) {
  for (std::int64_t i = 0; i < in.size(); ++i)
    if (in.values[i] > T(0)) grad_in->values[i] += grad_out.values[i];
}

// ---------------------------------------------------------------------------
// Volumetric dropout: whole (batch, channel) feature maps are zeroed
// together, never individual voxels, and survivors are scaled by 1/(1-p)
// so inference is a plain identity.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> dropout3d_forward(const Tensor<T>& in, double p, bool train,
                            Rng& rng, std::vector<T>* mask = nullptr) {
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("dropout3d: p must be in [0, 1)");
  const std::int64_t batch = in.shape[0], ch = in.shape[1];
  const std::int64_t slab = in.size() / (batch * ch);
  if (mask) mask->assign(batch * ch, T(1));
  if (!train || p == 0.0) return in;

  Tensor<T> out(in.shape);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (std::int64_t m = 0; m < batch * ch; ++m) {
    const T scale = rng.bernoulli(p) ? T(0) : keep_scale;
    if (mask) (*mask)[m] = scale;
    const T* ib = in.data() + m * slab;
    T* ob = out.data() + m * slab;
    for (std::int64_t i = 0; i < slab; ++i) ob[i] = scale * ib[i];
  }
  return out;
}

template <typename T>
void dropout3d_backward(const Tensor<T>& grad_out, const std::vector<T>& mask,
                        Tensor<T>* grad_in) {
  const std::int64_t slab =
      grad_out.size() / static_cast<std::int64_t>(mask.size());
  for (std::size_t m = 0; m < mask.size(); ++m) {
    const T scale = mask[m];
    const T* gb = grad_out.data() + m * slab;
    T* gi = grad_in->data() + m * slab;
    for (std::int64_t i = 0; i < slab; ++i) gi[i] += scale * gb[i];
  }
}

// ---------------------------------------------------------------------------
// LogSoftMax over the channel axis, max-shifted for stability.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> logsoftmax_forward(const Tensor<T>& in) {
  if (in.shape.size() != 5) throw ShapeError("logsoftmax: input must be 5-d");
  const std::int64_t batch = in.shape[0], ch = in.shape[1];
  const std::int64_t slab = in.shape[2] * in.shape[3] * in.shape[4];
  Tensor<T> out(in.shape);
  std::vector<T> m(slab), lse(slab);
  for (std::int64_t n = 0; n < batch; ++n) {
    const T* base = in.data() + n * ch * slab;
    std::copy(base, base + slab, m.begin());
    for (std::int64_t c = 1; c < ch; ++c) {
      const T* ib = base + c * slab;
      for (std::int64_t i = 0; i < slab; ++i) m[i] = std::max(m[i], ib[i]);
    }
    std::fill(lse.begin(), lse.end(), T(0));
    for (std::int64_t c = 0; c < ch; ++c) {
      const T* ib = base + c * slab;
      for (std::int64_t i = 0; i < slab; ++i) lse[i] += std::exp(ib[i] - m[i]);
    }
    for (std::int64_t i = 0; i < slab; ++i) lse[i] = m[i] + std::log(lse[i]);
    for (std::int64_t c = 0; c < ch; ++c) {
      const T* ib = base + c * slab;
      T* ob = out.data() + (n * ch + c) * slab;
      for (std::int64_t i = 0; i < slab; ++i) ob[i] = ib[i] - lse[i];
    }
  }
  return out;
}

template <typename T>
void logsoftmax_backward(const Tensor<T>& grad_out, const Tensor<T>& out,
                         Tensor<T>* grad_in) {
  const std::int64_t batch = out.shape[0], ch = out.shape[1];
  const std::int64_t slab = out.shape[2] * out.shape[3] * out.shape[4];
  std::vector<T> sum_g(slab);
  for (std::int64_t n = 0; n < batch; ++n) {
    std::fill(sum_g.begin(), sum_g.end(), T(0));
    for (std::int64_t c = 0; c < ch; ++c) {
      const T* gb = grad_out.data() + (n * ch + c) * slab;
      for (std::int64_t i = 0; i < slab; ++i) sum_g[i] += gb[i];
    }
    for (std::int64_t c = 0; c < ch; ++c) {
      const T* gb = grad_out.data() + (n * ch + c) * slab;
      const T* ob = out.data() + (n * ch + c) * slab;
      T* gi = grad_in->data() + (n * ch + c) * slab;
      for (std::int64_t i = 0; i < slab; ++i)
        gi[i] += gb[i] - std::exp(ob[i]) * sum_g[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Categorical cross-entropy on log-probabilities: -mean over voxels of the
// log-probability at the true class.
// ---------------------------------------------------------------------------

template <typename T>
T cross_entropy_forward(const Tensor<T>& logprobs,
                        const Tensor<std::int32_t>& labels) {
  if (logprobs.shape.size() != 5)
    throw ShapeError("cross_entropy: logprobs must be 5-d");
  const std::int64_t batch = logprobs.shape[0], ch = logprobs.shape[1];
  const std::int64_t slab = logprobs.shape[2] * logprobs.shape[3] * logprobs.shape[4];
  if (labels.size() != batch * slab)
    throw ShapeError("cross_entropy: label count does not match spatial voxels");
  T acc = 0;
  for (std::int64_t n = 0; n < batch; ++n) {
    const std::int32_t* lb = labels.data() + n * slab;
    const T* base = logprobs.data() + n * ch * slab;
    for (std::int64_t i = 0; i < slab; ++i) {
      const std::int32_t y = lb[i];
      if (y < 0 || y >= ch)
        throw ShapeError("cross_entropy: label " + std::to_string(y) +
                         " out of range [0, " + std::to_string(ch) + ")");
      acc += base[y * slab + i];
    }
  }
  return -acc / static_cast<T>(batch * slab);
}

template <typename T>
void cross_entropy_backward(T grad_loss, const Tensor<std::int32_t>& labels,
                            Tensor<T>* grad_logprobs) {
  const std::int64_t batch = grad_logprobs->shape[0];
  const std::int64_t ch = grad_logprobs->shape[1];
  const std::int64_t slab =
      grad_logprobs->shape[2] * grad_logprobs->shape[3] * grad_logprobs->shape[4];
  const T w = -grad_loss / static_cast<T>(batch * slab);
  for (std::int64_t n = 0; n < batch; ++n) {
    const std::int32_t* lb = labels.data() + n * slab;
    T* base = grad_logprobs->data() + n * ch * slab;
    for (std::int64_t i = 0; i < slab; ++i) base[lb[i] * slab + i] += w;
  }
}

}  // namespace meshnet
