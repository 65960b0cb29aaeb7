#ifndef REMIC_OPS_HPP
#define REMIC_OPS_HPP

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "remic/tape.hpp"
#include "remic/tensor.hpp"

namespace remic {

struct ConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kernel_size = 0;
  int stride = 1;
  int padding = 0;
  bool has_bias = true;

  int out_dim(int in) const {
    const int span = in + 2 * padding - kernel_size;
    if (span < 0) return 0;  // integer division would truncate toward zero
    return span / stride + 1;
  }

  void validate(int in_h, int in_w) const {
    if (in_channels <= 0 || out_channels <= 0 || kernel_size <= 0 || stride <= 0 || padding < 0)
      throw std::invalid_argument("ConvSpec: non-positive field");
    if (out_dim(in_h) < 1 || out_dim(in_w) < 1)
      throw std::invalid_argument(
          "ConvSpec: output spatial size < 1 for input " + std::to_string(in_h) +
          "x" + std::to_string(in_w) + " with kernel " + std::to_string(kernel_size) +
          " stride " + std::to_string(stride) + " pad " + std::to_string(padding));
  }
};

namespace detail {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using RowMatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Unrolls one batch item into a (Cin*k*k) x (Ho*Wo) patch matrix.
template <typename T>
MatX<T> im2col(const Tensor4<T>& x, int b, const ConvSpec& s, int ho, int wo) {
  const int k = s.kernel_size;
  const int cin = s.in_channels;
  const int h = x.height(), w = x.width();
  MatX<T> cols(cin * k * k, ho * wo);
  for (int ci = 0; ci < cin; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const int r = (ci * k + ky) * k + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s.stride - s.padding + ky;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * s.stride - s.padding + kx;
            T v = T(0);
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) v = x(b, ci, iy, ix);
            cols(r, oy * wo + ox) = v;
          }
        }
      }
    }
  }
  return cols;
}

template <typename T>
void col2im_accumulate(const MatX<T>& dcols, Tensor4<T>& gx, int b,
                       const ConvSpec& s, int ho, int wo) {
  const int k = s.kernel_size;
  const int h = gx.height(), w = gx.width();
  for (int ci = 0; ci < s.in_channels; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const int r = (ci * k + ky) * k + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s.stride - s.padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * s.stride - s.padding + kx;
            if (ix < 0 || ix >= w) continue;
            gx(b, ci, iy, ix) += dcols(r, oy * wo + ox);
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2D cross-correlation with zero padding. weights: (out, in, k, k),
// bias: (1, out, 1, 1) when spec.has_bias.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, const ConvSpec& spec) {
  const Tensor4<T>& xv = x.value();
  const Tensor4<T>& wv = w.value();
  spec.validate(xv.height(), xv.width());
  if (xv.channels() != spec.in_channels)
    throw std::invalid_argument("conv2d: input has " + std::to_string(xv.channels()) +
                                " channels, spec expects " + std::to_string(spec.in_channels));
  if (wv.shape != std::array<int, 4>{spec.out_channels, spec.in_channels,
                                     spec.kernel_size, spec.kernel_size})
    throw std::invalid_argument("conv2d: weight shape " + wv.shape_str() +
                                " inconsistent with spec");
  if (spec.has_bias) {
    if (!b.valid() || b.value().shape != std::array<int, 4>{1, spec.out_channels, 1, 1})
      throw std::invalid_argument("conv2d: bias must be (1, out_channels, 1, 1)");
  }

  const int bs = xv.batch();
  const int ho = spec.out_dim(xv.height());
  const int wo = spec.out_dim(xv.width());
  const int cink2 = spec.in_channels * spec.kernel_size * spec.kernel_size;

  Tensor4<T> out(bs, spec.out_channels, ho, wo);
  Eigen::Map<const detail::RowMatX<T>> wm(wv.data.data(), spec.out_channels, cink2);

  const bool need_w_grad = w.requires_grad();
  const bool need_x_grad = x.requires_grad();
  const bool need_b_grad = spec.has_bias && b.requires_grad();
  const bool need_grad = need_w_grad || need_x_grad || need_b_grad;

  // Patch matrices are kept for the backward pass only when dW is needed.
  std::vector<detail::MatX<T>> kept_cols;

  for (int bi = 0; bi < bs; ++bi) {
    detail::MatX<T> cols = detail::im2col(xv, bi, spec, ho, wo);
    Eigen::Map<detail::RowMatX<T>> om(
        out.data.data() + static_cast<size_t>(bi) * spec.out_channels * ho * wo,
        spec.out_channels, ho * wo);
    om.noalias() = wm * cols;
    if (spec.has_bias) {
      const Tensor4<T>& bv = b.value();
      for (int co = 0; co < spec.out_channels; ++co)
        om.row(co).array() += bv.data[static_cast<size_t>(co)];
    }
    if (need_w_grad) kept_cols.push_back(std::move(cols));
  }

  Var<T> out_var = x.tape->output(std::move(out), need_grad);
  if (need_grad) {
    Tape<T>* tape = x.tape;
    ConvSpec s = spec;
    tape->record([tape, x, w, b, out_var, s, bs, ho, wo, cink2, need_w_grad,
                  need_x_grad, need_b_grad, kept_cols = std::move(kept_cols)]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      const Tensor4<T>& wv2 = tape->value(w);
      Eigen::Map<const detail::RowMatX<T>> wm2(wv2.data.data(), s.out_channels, cink2);
      for (int bi = 0; bi < bs; ++bi) {
        Eigen::Map<const detail::RowMatX<T>> dym(
            gout.data.data() + static_cast<size_t>(bi) * s.out_channels * ho * wo,
            s.out_channels, ho * wo);
        if (need_w_grad) {
          Tensor4<T>& gw = tape->grad(w);
          Eigen::Map<detail::RowMatX<T>> dwm(gw.data.data(), s.out_channels, cink2);
          dwm.noalias() += dym * kept_cols[static_cast<size_t>(bi)].transpose();
        }
        if (need_b_grad) {
          Tensor4<T>& gb = tape->grad(b);
          for (int co = 0; co < s.out_channels; ++co)
            gb.data[static_cast<size_t>(co)] += dym.row(co).sum();
        }
        if (need_x_grad) {
          detail::MatX<T> dcols = wm2.transpose() * dym;
          detail::col2im_accumulate(dcols, tape->grad(x), bi, s, ho, wo);
        }
      }
    });
  }
  return out_var;
}

namespace detail {

// Per (batch, channel) mean and reciprocal population std used by both
// normalization ops.
template <typename T>
void channel_stats(const Tensor4<T>& x, T eps, std::vector<T>& mu, std::vector<T>& rstd) {
  const int groups = x.batch() * x.channels();
  const int n = x.plane();
  mu.resize(groups);
  rstd.resize(groups);
  for (int g = 0; g < groups; ++g) {
    const T* p = x.data.data() + static_cast<size_t>(g) * n;
    T s = T(0);
    for (int i = 0; i < n; ++i) s += p[i];
    const T m = s / T(n);
    T var = T(0);
    for (int i = 0; i < n; ++i) {
      const T d = p[i] - m;
      var += d * d;
    }
    var /= T(n);
    mu[g] = m;
    rstd[g] = T(1) / std::sqrt(var + eps);
  }
}

// dL/dx for y_hat = (x - mu) * rstd given dL/dy_hat, shared by IN and AdaIN.
template <typename T>
void normalize_backward(const Tensor4<T>& xv, const std::vector<T>& mu,
                        const std::vector<T>& rstd, const T* dyhat,
                        Tensor4<T>& gx) {
  const int groups = xv.batch() * xv.channels();
  const int n = xv.plane();
  for (int g = 0; g < groups; ++g) {
    const T* xp = xv.data.data() + static_cast<size_t>(g) * n;
    const T* dp = dyhat + static_cast<size_t>(g) * n;
    T* gp = gx.data.data() + static_cast<size_t>(g) * n;
    T sum_d = T(0), sum_dx = T(0);
    for (int i = 0; i < n; ++i) {
      const T xhat = (xp[i] - mu[g]) * rstd[g];
      sum_d += dp[i];
      sum_dx += dp[i] * xhat;
    }
    const T mean_d = sum_d / T(n);
    const T mean_dx = sum_dx / T(n);
    for (int i = 0; i < n; ++i) {
      const T xhat = (xp[i] - mu[g]) * rstd[g];
      gp[i] += rstd[g] * (dp[i] - mean_d - xhat * mean_dx);
    }
  }
}

}  // namespace detail

// Per (batch, channel) standardization: (z - mu) / sqrt(var + eps), population
// variance.
template <typename T>
Var<T> instance_norm(Var<T> x, T eps) {
  const Tensor4<T>& xv = x.value();
  std::vector<T> mu, rstd;
  detail::channel_stats(xv, eps, mu, rstd);

  Tensor4<T> out(xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
  const int groups = xv.batch() * xv.channels();
  const int n = xv.plane();
  for (int g = 0; g < groups; ++g) {
    const T* p = xv.data.data() + static_cast<size_t>(g) * n;
    T* q = out.data.data() + static_cast<size_t>(g) * n;
    for (int i = 0; i < n; ++i) q[i] = (p[i] - mu[g]) * rstd[g];
  }

  const bool need = x.requires_grad();
  Var<T> out_var = x.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = x.tape;
    tape->record([tape, x, out_var, mu = std::move(mu), rstd = std::move(rstd)]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      detail::normalize_backward(tape->value(x), mu, rstd, gout.data.data(),
                                 tape->grad(x));
    });
  }
  return out_var;
}

// AdaIN(z, gamma, beta) = gamma * (z - mu(z)) / sigma(z) + beta, with gamma and
// beta per channel, shape (1, C, 1, 1).
template <typename T>
Var<T> adain(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const Tensor4<T>& xv = x.value();
  const Tensor4<T>& gv = gamma.value();
  const Tensor4<T>& bv = beta.value();
  const int c = xv.channels();
  if (gv.shape != std::array<int, 4>{1, c, 1, 1} || bv.shape != std::array<int, 4>{1, c, 1, 1})
    throw std::invalid_argument("adain: gamma/beta must be (1, C, 1, 1) with C=" +
                                std::to_string(c) + ", got " + gv.shape_str() + " and " +
                                bv.shape_str());

  std::vector<T> mu, rstd;
  detail::channel_stats(xv, eps, mu, rstd);

  Tensor4<T> out(xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
  const int n = xv.plane();
  for (int bi = 0; bi < xv.batch(); ++bi) {
    for (int ci = 0; ci < c; ++ci) {
      const int g = bi * c + ci;
      const T* p = xv.data.data() + static_cast<size_t>(g) * n;
      T* q = out.data.data() + static_cast<size_t>(g) * n;
      for (int i = 0; i < n; ++i)
        q[i] = gv.data[static_cast<size_t>(ci)] * (p[i] - mu[g]) * rstd[g] +
               bv.data[static_cast<size_t>(ci)];
    }
  }

  const bool need = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  Var<T> out_var = x.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = x.tape;
    tape->record([tape, x, gamma, beta, out_var, mu = std::move(mu),
                  rstd = std::move(rstd), c, n]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      const Tensor4<T>& xv2 = tape->value(x);
      const Tensor4<T>& gv2 = tape->value(gamma);
      const int bs = xv2.batch();
      if (gamma.requires_grad() || beta.requires_grad()) {
        for (int ci = 0; ci < c; ++ci) {
          T dg = T(0), db = T(0);
          for (int bi = 0; bi < bs; ++bi) {
            const int g = bi * c + ci;
            const T* xp = xv2.data.data() + static_cast<size_t>(g) * n;
            const T* dp = gout.data.data() + static_cast<size_t>(g) * n;
            for (int i = 0; i < n; ++i) {
              dg += dp[i] * (xp[i] - mu[g]) * rstd[g];
              db += dp[i];
            }
          }
          if (gamma.requires_grad()) tape->grad(gamma).data[static_cast<size_t>(ci)] += dg;
          if (beta.requires_grad()) tape->grad(beta).data[static_cast<size_t>(ci)] += db;
        }
      }
      if (x.requires_grad()) {
        // dL/dy_hat = gamma * dL/dy, then the shared projection.
        Tensor4<T> dyhat(xv2.shape[0], xv2.shape[1], xv2.shape[2], xv2.shape[3]);
        for (int bi = 0; bi < bs; ++bi)
          for (int ci = 0; ci < c; ++ci) {
            const int g = bi * c + ci;
            const T* dp = gout.data.data() + static_cast<size_t>(g) * n;
            T* q = dyhat.data.data() + static_cast<size_t>(g) * n;
            for (int i = 0; i < n; ++i) q[i] = gv2.data[static_cast<size_t>(ci)] * dp[i];
          }
        detail::normalize_backward(xv2, mu, rstd, dyhat.data.data(), tape->grad(x));
      }
    });
  }
  return out_var;
}

// Elementwise max(x, slope * x).
template <typename T>
Var<T> leaky_relu(Var<T> x, T slope) {
  const Tensor4<T>& xv = x.value();
  Tensor4<T> out(xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
  for (size_t i = 0; i < xv.size(); ++i)
    out.data[i] = std::max(xv.data[i], slope * xv.data[i]);
  const bool need = x.requires_grad();
  Var<T> out_var = x.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = x.tape;
    tape->record([tape, x, out_var, slope]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      const Tensor4<T>& xv2 = tape->value(x);
      Tensor4<T>& gx = tape->grad(x);
      for (size_t i = 0; i < xv2.size(); ++i)
        gx.data[i] += gout.data[i] * (xv2.data[i] > slope * xv2.data[i] ? T(1) : slope);
    });
  }
  return out_var;
}

template <typename T>
Var<T> relu(Var<T> x) {
  return leaky_relu(x, T(0));
}

template <typename T>
Var<T> tanh_op(Var<T> x) {
  const Tensor4<T>& xv = x.value();
  Tensor4<T> out(xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
  for (size_t i = 0; i < xv.size(); ++i) out.data[i] = std::tanh(xv.data[i]);
  const bool need = x.requires_grad();
  Var<T> out_var = x.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = x.tape;
    tape->record([tape, x, out_var]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      const Tensor4<T>& yv = tape->value(out_var);
      Tensor4<T>& gx = tape->grad(x);
      for (size_t i = 0; i < yv.size(); ++i)
        gx.data[i] += gout.data[i] * (T(1) - yv.data[i] * yv.data[i]);
    });
  }
  return out_var;
}

template <typename T>
Var<T> sigmoid_op(Var<T> x) {
  const Tensor4<T>& xv = x.value();
  Tensor4<T> out(xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
  for (size_t i = 0; i < xv.size(); ++i)
    out.data[i] = T(1) / (T(1) + std::exp(-xv.data[i]));
  const bool need = x.requires_grad();
  Var<T> out_var = x.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = x.tape;
    tape->record([tape, x, out_var]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      const Tensor4<T>& yv = tape->value(out_var);
      Tensor4<T>& gx = tape->grad(x);
      for (size_t i = 0; i < yv.size(); ++i)
        gx.data[i] += gout.data[i] * yv.data[i] * (T(1) - yv.data[i]);
    });
  }
  return out_var;
}

// Each pixel replicated into a 2x2 block.
template <typename T>
Var<T> nearest_upsample2x(Var<T> x) {
  const Tensor4<T>& xv = x.value();
  Tensor4<T> out(xv.shape[0], xv.shape[1], xv.shape[2] * 2, xv.shape[3] * 2);
  for (int b = 0; b < xv.batch(); ++b)
    for (int c = 0; c < xv.channels(); ++c)
      for (int y = 0; y < xv.height(); ++y)
        for (int xx = 0; xx < xv.width(); ++xx) {
          const T v = xv(b, c, y, xx);
          out(b, c, 2 * y, 2 * xx) = v;
          out(b, c, 2 * y, 2 * xx + 1) = v;
          out(b, c, 2 * y + 1, 2 * xx) = v;
          out(b, c, 2 * y + 1, 2 * xx + 1) = v;
        }
  const bool need = x.requires_grad();
  Var<T> out_var = x.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = x.tape;
    tape->record([tape, x, out_var]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      Tensor4<T>& gx = tape->grad(x);
      for (int b = 0; b < gx.batch(); ++b)
        for (int c = 0; c < gx.channels(); ++c)
          for (int y = 0; y < gx.height(); ++y)
            for (int xx = 0; xx < gx.width(); ++xx)
              gx(b, c, y, xx) += gout(b, c, 2 * y, 2 * xx) +
                                 gout(b, c, 2 * y, 2 * xx + 1) +
                                 gout(b, c, 2 * y + 1, 2 * xx) +
                                 gout(b, c, 2 * y + 1, 2 * xx + 1);
    });
  }
  return out_var;
}

// 2x2 non-overlapping mean pooling. Rejects odd spatial dims.
template <typename T>
Var<T> downsample_avg2x(Var<T> x) {
  const Tensor4<T>& xv = x.value();
  if (xv.height() % 2 != 0 || xv.width() % 2 != 0)
    throw std::invalid_argument("downsample_avg2x: odd spatial size " + xv.shape_str());
  Tensor4<T> out(xv.shape[0], xv.shape[1], xv.shape[2] / 2, xv.shape[3] / 2);
  for (int b = 0; b < out.batch(); ++b)
    for (int c = 0; c < out.channels(); ++c)
      for (int y = 0; y < out.height(); ++y)
        for (int xx = 0; xx < out.width(); ++xx)
          // Pairwise sum: keeps pooling an exact inverse of 2x replication.
          out(b, c, y, xx) =
              ((xv(b, c, 2 * y, 2 * xx) + xv(b, c, 2 * y, 2 * xx + 1)) +
               (xv(b, c, 2 * y + 1, 2 * xx) + xv(b, c, 2 * y + 1, 2 * xx + 1))) /
              T(4);
  const bool need = x.requires_grad();
  Var<T> out_var = x.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = x.tape;
    tape->record([tape, x, out_var]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      Tensor4<T>& gx = tape->grad(x);
      for (int b = 0; b < gout.batch(); ++b)
        for (int c = 0; c < gout.channels(); ++c)
          for (int y = 0; y < gout.height(); ++y)
            for (int xx = 0; xx < gout.width(); ++xx) {
              const T g = gout(b, c, y, xx) / T(4);
              gx(b, c, 2 * y, 2 * xx) += g;
              gx(b, c, 2 * y, 2 * xx + 1) += g;
              gx(b, c, 2 * y + 1, 2 * xx) += g;
              gx(b, c, 2 * y + 1, 2 * xx + 1) += g;
            }
    });
  }
  return out_var;
}

// (B, C, H, W) -> (B, C, 1, 1) channel means.
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  const Tensor4<T>& xv = x.value();
  const int n = xv.plane();
  Tensor4<T> out(xv.shape[0], xv.shape[1], 1, 1);
  for (int g = 0; g < xv.batch() * xv.channels(); ++g) {
    const T* p = xv.data.data() + static_cast<size_t>(g) * n;
    T s = T(0);
    for (int i = 0; i < n; ++i) s += p[i];
    out.data[static_cast<size_t>(g)] = s / T(n);
  }
  const bool need = x.requires_grad();
  Var<T> out_var = x.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = x.tape;
    tape->record([tape, x, out_var, n]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      Tensor4<T>& gx = tape->grad(x);
      for (int g = 0; g < gx.batch() * gx.channels(); ++g) {
        const T gv = gout.data[static_cast<size_t>(g)] / T(n);
        T* q = gx.data.data() + static_cast<size_t>(g) * n;
        for (int i = 0; i < n; ++i) q[i] += gv;
      }
    });
  }
  return out_var;
}

// v: (B, D, 1, 1), w: (O, D, 1, 1), b: (1, O, 1, 1) -> (B, O, 1, 1).
template <typename T>
Var<T> fully_connected(Var<T> v, Var<T> w, Var<T> b) {
  const Tensor4<T>& vv = v.value();
  const Tensor4<T>& wv = w.value();
  const Tensor4<T>& bv = b.value();
  const int bs = vv.batch(), d = vv.channels(), o = wv.batch();
  if (vv.height() != 1 || vv.width() != 1 || wv.channels() != d ||
      wv.height() != 1 || wv.width() != 1 ||
      bv.shape != std::array<int, 4>{1, o, 1, 1})
    throw std::invalid_argument("fully_connected: incompatible shapes " + vv.shape_str() +
                                ", " + wv.shape_str() + ", " + bv.shape_str());
  Tensor4<T> out(bs, o, 1, 1);
  for (int bi = 0; bi < bs; ++bi)
    for (int oi = 0; oi < o; ++oi) {
      T s = bv.data[static_cast<size_t>(oi)];
      const T* wp = wv.data.data() + static_cast<size_t>(oi) * d;
      const T* vp = vv.data.data() + static_cast<size_t>(bi) * d;
      for (int di = 0; di < d; ++di) s += wp[di] * vp[di];
      out.data[static_cast<size_t>(bi) * o + oi] = s;
    }
  const bool need = v.requires_grad() || w.requires_grad() || b.requires_grad();
  Var<T> out_var = v.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = v.tape;
    tape->record([tape, v, w, b, out_var, bs, d, o]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      const Tensor4<T>& vv2 = tape->value(v);
      const Tensor4<T>& wv2 = tape->value(w);
      for (int bi = 0; bi < bs; ++bi)
        for (int oi = 0; oi < o; ++oi) {
          const T gy = gout.data[static_cast<size_t>(bi) * o + oi];
          if (gy == T(0)) continue;
          if (w.requires_grad()) {
            T* gwp = tape->grad(w).data.data() + static_cast<size_t>(oi) * d;
            const T* vp = vv2.data.data() + static_cast<size_t>(bi) * d;
            for (int di = 0; di < d; ++di) gwp[di] += gy * vp[di];
          }
          if (b.requires_grad()) tape->grad(b).data[static_cast<size_t>(oi)] += gy;
          if (v.requires_grad()) {
            T* gvp = tape->grad(v).data.data() + static_cast<size_t>(bi) * d;
            const T* wp = wv2.data.data() + static_cast<size_t>(oi) * d;
            for (int di = 0; di < d; ++di) gvp[di] += gy * wp[di];
          }
        }
    });
  }
  return out_var;
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty input list");
  const Tensor4<T>& first = xs[0].value();
  int ctot = 0;
  for (const auto& v : xs) {
    const Tensor4<T>& t = v.value();
    if (t.batch() != first.batch() || t.height() != first.height() ||
        t.width() != first.width())
      throw std::invalid_argument("concat_channels: mismatched shapes " +
                                  first.shape_str() + " vs " + t.shape_str());
    ctot += t.channels();
  }
  Tensor4<T> out(first.batch(), ctot, first.height(), first.width());
  const int plane = first.plane();
  for (int b = 0; b < first.batch(); ++b) {
    int coff = 0;
    for (const auto& v : xs) {
      const Tensor4<T>& t = v.value();
      std::copy(
          t.data.begin() + static_cast<size_t>(b) * t.channels() * plane,
          t.data.begin() + static_cast<size_t>(b + 1) * t.channels() * plane,
          out.data.begin() + (static_cast<size_t>(b) * ctot + coff) * plane);
      coff += t.channels();
    }
  }
  bool need = false;
  for (const auto& v : xs) need = need || v.requires_grad();
  Var<T> out_var = xs[0].tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = xs[0].tape;
    std::vector<Var<T>> inputs = xs;
    tape->record([tape, inputs, out_var, ctot, plane]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      for (int b = 0; b < gout.batch(); ++b) {
        int coff = 0;
        for (const auto& v : inputs) {
          const int c = tape->value(v).channels();
          if (v.requires_grad()) {
            Tensor4<T>& gx = tape->grad(v);
            const T* src = gout.data.data() + (static_cast<size_t>(b) * ctot + coff) * plane;
            T* dst = gx.data.data() + static_cast<size_t>(b) * c * plane;
            for (int i = 0; i < c * plane; ++i) dst[i] += src[i];
          }
          coff += c;
        }
      }
    });
  }
  return out_var;
}

// Channel range [lo, hi).
template <typename T>
Var<T> slice_channels(Var<T> x, int lo, int hi) {
  const Tensor4<T>& xv = x.value();
  if (lo < 0 || hi > xv.channels() || lo >= hi)
    throw std::invalid_argument("slice_channels: bad range [" + std::to_string(lo) +
                                ", " + std::to_string(hi) + ") for " + xv.shape_str());
  const int c = hi - lo, plane = xv.plane();
  Tensor4<T> out(xv.batch(), c, xv.height(), xv.width());
  for (int b = 0; b < xv.batch(); ++b)
    std::copy(xv.data.begin() + (static_cast<size_t>(b) * xv.channels() + lo) * plane,
              xv.data.begin() + (static_cast<size_t>(b) * xv.channels() + hi) * plane,
              out.data.begin() + static_cast<size_t>(b) * c * plane);
  const bool need = x.requires_grad();
  Var<T> out_var = x.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = x.tape;
    tape->record([tape, x, out_var, lo, c, plane]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      Tensor4<T>& gx = tape->grad(x);
      for (int b = 0; b < gx.batch(); ++b) {
        const T* src = gout.data.data() + static_cast<size_t>(b) * c * plane;
        T* dst = gx.data.data() + (static_cast<size_t>(b) * gx.channels() + lo) * plane;
        for (int i = 0; i < c * plane; ++i) dst[i] += src[i];
      }
    });
  }
  return out_var;
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  const Tensor4<T>& av = a.value();
  const Tensor4<T>& bv = b.value();
  check_same_shape(av, bv, "add");
  Tensor4<T> out(av.shape[0], av.shape[1], av.shape[2], av.shape[3]);
  for (size_t i = 0; i < av.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
  const bool need = a.requires_grad() || b.requires_grad();
  Var<T> out_var = a.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = a.tape;
    tape->record([tape, a, b, out_var]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      if (a.requires_grad()) {
        Tensor4<T>& ga = tape->grad(a);
        for (size_t i = 0; i < gout.size(); ++i) ga.data[i] += gout.data[i];
      }
      if (b.requires_grad()) {
        Tensor4<T>& gb = tape->grad(b);
        for (size_t i = 0; i < gout.size(); ++i) gb.data[i] += gout.data[i];
      }
    });
  }
  return out_var;
}

template <typename T>
Var<T> scale(Var<T> x, T k) {
  const Tensor4<T>& xv = x.value();
  Tensor4<T> out(xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
  for (size_t i = 0; i < xv.size(); ++i) out.data[i] = k * xv.data[i];
  const bool need = x.requires_grad();
  Var<T> out_var = x.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = x.tape;
    tape->record([tape, x, out_var, k]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      Tensor4<T>& gx = tape->grad(x);
      for (size_t i = 0; i < gout.size(); ++i) gx.data[i] += k * gout.data[i];
    });
  }
  return out_var;
}

template <typename T>
Var<T> add_const(Var<T> x, T k) {
  const Tensor4<T>& xv = x.value();
  Tensor4<T> out(xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
  for (size_t i = 0; i < xv.size(); ++i) out.data[i] = xv.data[i] + k;
  const bool need = x.requires_grad();
  Var<T> out_var = x.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = x.tape;
    tape->record([tape, x, out_var]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      Tensor4<T>& gx = tape->grad(x);
      for (size_t i = 0; i < gout.size(); ++i) gx.data[i] += gout.data[i];
    });
  }
  return out_var;
}

template <typename T>
Var<T> mean_all(Var<T> x) {
  const Tensor4<T>& xv = x.value();
  Tensor4<T> out(1, 1, 1, 1);
  T s = T(0);
  for (T v : xv.data) s += v;
  out.data[0] = s / T(xv.size());
  const bool need = x.requires_grad();
  Var<T> out_var = x.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = x.tape;
    const T inv = T(1) / T(xv.size());
    tape->record([tape, x, out_var, inv]() {
      const T g = tape->grad(out_var).data[0] * inv;
      Tensor4<T>& gx = tape->grad(x);
      for (size_t i = 0; i < gx.size(); ++i) gx.data[i] += g;
    });
  }
  return out_var;
}

// mean |a - b| over all elements (scalar output).
template <typename T>
Var<T> l1_mean(Var<T> a, Var<T> b) {
  const Tensor4<T>& av = a.value();
  const Tensor4<T>& bv = b.value();
  check_same_shape(av, bv, "l1_mean");
  Tensor4<T> out(1, 1, 1, 1);
  T s = T(0);
  for (size_t i = 0; i < av.size(); ++i) s += std::abs(av.data[i] - bv.data[i]);
  out.data[0] = s / T(av.size());
  const bool need = a.requires_grad() || b.requires_grad();
  Var<T> out_var = a.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = a.tape;
    const T inv = T(1) / T(av.size());
    tape->record([tape, a, b, out_var, inv]() {
      const T g = tape->grad(out_var).data[0] * inv;
      const Tensor4<T>& av2 = tape->value(a);
      const Tensor4<T>& bv2 = tape->value(b);
      for (size_t i = 0; i < av2.size(); ++i) {
        const T d = av2.data[i] - bv2.data[i];
        const T sgn = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
        if (a.requires_grad()) tape->grad(a).data[i] += g * sgn;
        if (b.requires_grad()) tape->grad(b).data[i] -= g * sgn;
      }
    });
  }
  return out_var;
}

// mean (x - k)^2 over all elements (scalar output). LSGAN building block.
template <typename T>
Var<T> mse_vs_const(Var<T> x, T k) {
  const Tensor4<T>& xv = x.value();
  Tensor4<T> out(1, 1, 1, 1);
  T s = T(0);
  for (T v : xv.data) s += (v - k) * (v - k);
  out.data[0] = s / T(xv.size());
  const bool need = x.requires_grad();
  Var<T> out_var = x.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = x.tape;
    const T inv = T(2) / T(xv.size());
    tape->record([tape, x, out_var, k, inv]() {
      const T g = tape->grad(out_var).data[0] * inv;
      const Tensor4<T>& xv2 = tape->value(x);
      Tensor4<T>& gx = tape->grad(x);
      for (size_t i = 0; i < xv2.size(); ++i) gx.data[i] += g * (xv2.data[i] - k);
    });
  }
  return out_var;
}

// Softmax over the channel dimension, per (batch, y, x) site.
template <typename T>
Var<T> softmax_channels(Var<T> x) {
  const Tensor4<T>& xv = x.value();
  const int bs = xv.batch(), c = xv.channels(), h = xv.height(), w = xv.width();
  Tensor4<T> out(bs, c, h, w);
  for (int b = 0; b < bs; ++b)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        T mx = xv(b, 0, y, xx);
        for (int ci = 1; ci < c; ++ci) mx = std::max(mx, xv(b, ci, y, xx));
        T z = T(0);
        for (int ci = 0; ci < c; ++ci) {
          const T e = std::exp(xv(b, ci, y, xx) - mx);
          out(b, ci, y, xx) = e;
          z += e;
        }
        for (int ci = 0; ci < c; ++ci) out(b, ci, y, xx) /= z;
      }
  const bool need = x.requires_grad();
  Var<T> out_var = x.tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = x.tape;
    tape->record([tape, x, out_var, bs, c, h, w]() {
      const Tensor4<T>& gout = tape->grad(out_var);
      const Tensor4<T>& p = tape->value(out_var);
      Tensor4<T>& gx = tape->grad(x);
      for (int b = 0; b < bs; ++b)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            T dot = T(0);
            for (int ci = 0; ci < c; ++ci) dot += gout(b, ci, y, xx) * p(b, ci, y, xx);
            for (int ci = 0; ci < c; ++ci)
              gx(b, ci, y, xx) += p(b, ci, y, xx) * (gout(b, ci, y, xx) - dot);
          }
    });
  }
  return out_var;
}

// Sum of weighted scalar vars: sum_i w_i * s_i, each s_i of shape (1,1,1,1).
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  if (terms.empty()) throw std::invalid_argument("weighted_sum: empty term list");
  if (terms.size() != weights.size())
    throw std::invalid_argument("weighted_sum: term/weight count mismatch");
  Tensor4<T> out(1, 1, 1, 1);
  T s = T(0);
  bool need = false;
  for (size_t i = 0; i < terms.size(); ++i) {
    const Tensor4<T>& tv = terms[i].value();
    if (tv.size() != 1)
      throw std::invalid_argument("weighted_sum: non-scalar term " + tv.shape_str());
    s += weights[i] * tv.data[0];
    need = need || terms[i].requires_grad();
  }
  out.data[0] = s;
  Var<T> out_var = terms[0].tape->output(std::move(out), need);
  if (need) {
    Tape<T>* tape = terms[0].tape;
    std::vector<Var<T>> ts = terms;
    std::vector<T> ws = weights;
    tape->record([tape, ts, ws, out_var]() {
      const T g = tape->grad(out_var).data[0];
      for (size_t i = 0; i < ts.size(); ++i)
        if (ts[i].requires_grad()) tape->grad(ts[i]).data[0] += ws[i] * g;
    });
  }
  return out_var;
}

template <typename T>
Var<T> mean_of(const std::vector<Var<T>>& terms) {
  std::vector<T> w(terms.size(), T(1) / T(terms.size()));
  return weighted_sum(terms, w);
}

enum class NormMode { instance, adain };

template <typename T>
struct ResBlockVars {
  Var<T> w1, b1, w2, b2;
};

// Per-block AdaIN parameters (two normalized convs per block).
template <typename T>
struct AdainStats {
  Var<T> gamma1, beta1, gamma2, beta2;
};

// x + f(x) with f = conv3x3 -> norm -> relu -> conv3x3 -> norm. Channel count
// is preserved; spatial size is preserved via pad 1.
template <typename T>
Var<T> residual_block(Var<T> x, const ResBlockVars<T>& p, NormMode mode, T eps,
                      const AdainStats<T>* stats = nullptr) {
  const int c = x.value().channels();
  ConvSpec s{c, c, 3, 1, 1, true};
  Var<T> h = conv2d(x, p.w1, p.b1, s);
  if (mode == NormMode::adain) {
    if (stats == nullptr)
      throw std::invalid_argument("residual_block: AdaIN mode needs externally supplied stats");
    h = adain(h, stats->gamma1, stats->beta1, eps);
  } else {
    h = instance_norm(h, eps);
  }
  h = relu(h);
  h = conv2d(h, p.w2, p.b2, s);
  if (mode == NormMode::adain) {
    h = adain(h, stats->gamma2, stats->beta2, eps);
  } else {
    h = instance_norm(h, eps);
  }
  return add(x, h);
}

}  // namespace remic

#endif
