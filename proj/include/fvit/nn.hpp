#pragma once

// Neural-network building blocks on top of the tensor ops: convolution,
// pooling, normalization, linear, and the parameter-owning layer structs.
//
// Convolution runs per-sample im2col feeding the shared matmul kernels;
// the backward pass rebuilds the column buffer instead of keeping it
// alive, trading a little compute for activation memory. Depthwise
// convolutions skip im2col entirely.

#include <string>
#include <vector>

#include "fvit/errors.hpp"
#include "fvit/tensor.hpp"

namespace fvit {

template <typename Real>
struct NamedParam {
  std::string name;
  Tensor<Real> tensor;  // handle onto the layer's own storage
};

namespace detail {

template <typename Real>
void im2col(const Real* x, size_t C, size_t H, size_t W, size_t kh, size_t kw,
            size_t stride, size_t pad, size_t Ho, size_t Wo, Real* col) {
  const size_t hw_out = Ho * Wo;
  for (size_t c = 0; c < C; ++c)
    for (size_t ki = 0; ki < kh; ++ki)
      for (size_t kj = 0; kj < kw; ++kj) {
        Real* dst = col + ((c * kh + ki) * kw + kj) * hw_out;
        for (size_t oh = 0; oh < Ho; ++oh) {
          const ptrdiff_t ih = ptrdiff_t(oh * stride + ki) - ptrdiff_t(pad);
          if (ih < 0 || ih >= ptrdiff_t(H)) {
            for (size_t ow = 0; ow < Wo; ++ow) dst[oh * Wo + ow] = Real(0);
            continue;
          }
          const Real* src = x + (c * H + size_t(ih)) * W;
          for (size_t ow = 0; ow < Wo; ++ow) {
            const ptrdiff_t iw = ptrdiff_t(ow * stride + kj) - ptrdiff_t(pad);
            dst[oh * Wo + ow] =
                (iw < 0 || iw >= ptrdiff_t(W)) ? Real(0) : src[size_t(iw)];
          }
        }
      }
}

template <typename Real>
void col2im_acc(const Real* col, size_t C, size_t H, size_t W, size_t kh,
                size_t kw, size_t stride, size_t pad, size_t Ho, size_t Wo,
                Real* dx) {
  const size_t hw_out = Ho * Wo;
  for (size_t c = 0; c < C; ++c)
    for (size_t ki = 0; ki < kh; ++ki)
      for (size_t kj = 0; kj < kw; ++kj) {
        const Real* src = col + ((c * kh + ki) * kw + kj) * hw_out;
        for (size_t oh = 0; oh < Ho; ++oh) {
          const ptrdiff_t ih = ptrdiff_t(oh * stride + ki) - ptrdiff_t(pad);
          if (ih < 0 || ih >= ptrdiff_t(H)) continue;
          Real* dst = dx + (c * H + size_t(ih)) * W;
          for (size_t ow = 0; ow < Wo; ++ow) {
            const ptrdiff_t iw = ptrdiff_t(ow * stride + kj) - ptrdiff_t(pad);
            if (iw >= 0 && iw < ptrdiff_t(W)) dst[size_t(iw)] += src[oh * Wo + ow];
          }
        }
      }
}

}  // namespace detail

// ==================== conv2d ====================

// x (B,Cin,H,W), w (Cout,Cin/groups,kh,kw), bias (Cout) or empty.
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w,
                    const Tensor<Real>& bias, size_t stride, size_t pad,
                    size_t groups = 1) {
  if (x.rank() != 4 || w.rank() != 4)
    throw DimError("conv2d: expected rank-4 input and weight, got " +
                   shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const size_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (groups == 0 || Cin % groups != 0 || Cout % groups != 0 ||
      w.dim(1) != Cin / groups)
    throw DimError("conv2d: weight " + shape_str(w.shape()) +
                   " incompatible with " + std::to_string(Cin) +
                   " input channels in " + std::to_string(groups) + " groups");
  const bool has_bias = bias.size() > 0;
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != Cout))
    throw DimError("conv2d: bias " + shape_str(bias.shape()) + " for " +
                   std::to_string(Cout) + " output channels");
  if (stride == 0 || H + 2 * pad < kh || W + 2 * pad < kw)
    throw DimError("conv2d: kernel " + std::to_string(kh) + "x" +
                   std::to_string(kw) + " does not fit input " +
                   shape_str(x.shape()) + " with pad " + std::to_string(pad));
  const size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const size_t Wo = (W + 2 * pad - kw) / stride + 1;
  const size_t hw_out = Ho * Wo;
  const size_t Cing = Cin / groups, Coutg = Cout / groups;
  const size_t Rg = Cing * kh * kw;
  const bool depthwise = (groups == Cin && Cing == 1);
  // a 1x1 stride-1 unpadded kernel's column buffer is the input itself
  const bool pointwise =
      !depthwise && kh == 1 && kw == 1 && stride == 1 && pad == 0;

  std::vector<Real> y(B * Cout * hw_out, Real(0));
  if (depthwise) {
    for (size_t b = 0; b < B; ++b)
      for (size_t c = 0; c < Cout; ++c) {
        const Real* xs = x.ptr() + (b * Cin + c % Cin) * H * W;
        const Real* ws = w.ptr() + c * kh * kw;
        Real* ys = y.data() + (b * Cout + c) * hw_out;
        for (size_t oh = 0; oh < Ho; ++oh)
          for (size_t ow = 0; ow < Wo; ++ow) {
            Real acc = 0;
            for (size_t ki = 0; ki < kh; ++ki) {
              const ptrdiff_t ih = ptrdiff_t(oh * stride + ki) - ptrdiff_t(pad);
              if (ih < 0 || ih >= ptrdiff_t(H)) continue;
              for (size_t kj = 0; kj < kw; ++kj) {
                const ptrdiff_t iw =
                    ptrdiff_t(ow * stride + kj) - ptrdiff_t(pad);
                if (iw < 0 || iw >= ptrdiff_t(W)) continue;
                acc += ws[ki * kw + kj] * xs[size_t(ih) * W + size_t(iw)];
              }
            }
            ys[oh * Wo + ow] = acc;
          }
      }
  } else if (pointwise) {
    for (size_t b = 0; b < B; ++b)
      for (size_t g = 0; g < groups; ++g)
        detail::mm_nn_acc(w.ptr() + g * Coutg * Rg,
                          x.ptr() + (b * Cin + g * Cing) * hw_out,
                          y.data() + (b * Cout + g * Coutg) * hw_out, Coutg,
                          Rg, hw_out);
  } else {
    std::vector<Real> col(Cin * kh * kw * hw_out);
    for (size_t b = 0; b < B; ++b) {
      detail::im2col(x.ptr() + b * Cin * H * W, Cin, H, W, kh, kw, stride, pad,
                     Ho, Wo, col.data());
      for (size_t g = 0; g < groups; ++g)
        detail::mm_nn_acc(w.ptr() + g * Coutg * Rg,
                          col.data() + g * Rg * hw_out,
                          y.data() + (b * Cout + g * Coutg) * hw_out, Coutg,
                          Rg, hw_out);
    }
  }
  if (has_bias) {
    const Real* pb = bias.ptr();
    for (size_t b = 0; b < B; ++b)
      for (size_t c = 0; c < Cout; ++c) {
        Real* ys = y.data() + (b * Cout + c) * hw_out;
        for (size_t i = 0; i < hw_out; ++i) ys[i] += pb[c];
      }
  }
  Tensor<Real> out = Tensor<Real>::from({B, Cout, Ho, Wo}, std::move(y));

  auto* tape = Tape<Real>::current();
  const bool need = tape && (x.requires_grad() || w.requires_grad() ||
                             (has_bias && bias.requires_grad()));
  if (need) {
    out.set_requires_grad(true);
    auto xn = x.node();
    auto wn = w.node();
    auto bn = bias.node();
    auto on = out.node();
    tape->record({xn, wn, bn, on}, [=]() {
      if (on->grad.empty()) return;
      const Real* dy = on->grad.data();
      if (has_bias && bn->requires_grad) {
        bn->ensure_grad();
        for (size_t b = 0; b < B; ++b)
          for (size_t c = 0; c < Cout; ++c) {
            const Real* g = dy + (b * Cout + c) * hw_out;
            Real acc = 0;
            for (size_t i = 0; i < hw_out; ++i) acc += g[i];
            bn->grad[c] += acc;
          }
      }
      const bool want_x = xn->requires_grad;
      const bool want_w = wn->requires_grad;
      if (!want_x && !want_w) return;
      if (want_x) xn->ensure_grad();
      if (want_w) wn->ensure_grad();
      if (depthwise) {
        for (size_t b = 0; b < B; ++b)
          for (size_t c = 0; c < Cout; ++c) {
            const Real* g = dy + (b * Cout + c) * hw_out;
            const Real* xs = xn->value.data() + (b * Cin + c % Cin) * H * W;
            const Real* ws = wn->value.data() + c * kh * kw;
            Real* dxs =
                want_x ? xn->grad.data() + (b * Cin + c % Cin) * H * W : nullptr;
            Real* dws = want_w ? wn->grad.data() + c * kh * kw : nullptr;
            for (size_t oh = 0; oh < Ho; ++oh)
              for (size_t ow = 0; ow < Wo; ++ow) {
                const Real gv = g[oh * Wo + ow];
                for (size_t ki = 0; ki < kh; ++ki) {
                  const ptrdiff_t ih =
                      ptrdiff_t(oh * stride + ki) - ptrdiff_t(pad);
                  if (ih < 0 || ih >= ptrdiff_t(H)) continue;
                  for (size_t kj = 0; kj < kw; ++kj) {
                    const ptrdiff_t iw =
                        ptrdiff_t(ow * stride + kj) - ptrdiff_t(pad);
                    if (iw < 0 || iw >= ptrdiff_t(W)) continue;
                    const size_t xi = size_t(ih) * W + size_t(iw);
                    if (want_w) dws[ki * kw + kj] += gv * xs[xi];
                    if (want_x) dxs[xi] += gv * ws[ki * kw + kj];
                  }
                }
              }
          }
      } else {
        std::vector<Real> wt(want_x ? Cout * Rg : 0);
        std::vector<Real> dyt(want_w ? hw_out * Coutg : 0);
        std::vector<Real> dwt(want_w ? Coutg * Rg : 0);
        if (want_x) {
          // per-group W^T so dX = W^T dY runs through the row kernel
          const Real* pw = wn->value.data();
          for (size_t g = 0; g < groups; ++g) {
            Real* wtg = wt.data() + g * Rg * Coutg;
            for (size_t o = 0; o < Coutg; ++o)
              for (size_t r = 0; r < Rg; ++r)
                wtg[r * Coutg + o] = pw[(g * Coutg + o) * Rg + r];
          }
        }
        // dW^T = col dY^T, likewise in the row kernel
        auto accum_dw = [&](const Real* colg, const Real* dyg, size_t g) {
          for (size_t s = 0; s < hw_out; ++s)
            for (size_t o = 0; o < Coutg; ++o)
              dyt[s * Coutg + o] = dyg[o * hw_out + s];
          std::fill(dwt.begin(), dwt.end(), Real(0));
          detail::mm_nn_acc(colg, dyt.data(), dwt.data(), Rg, hw_out, Coutg);
          Real* dwg = wn->grad.data() + g * Coutg * Rg;
          for (size_t r = 0; r < Rg; ++r)
            for (size_t o = 0; o < Coutg; ++o)
              dwg[o * Rg + r] += dwt[r * Coutg + o];
        };
        if (pointwise) {
          for (size_t b = 0; b < B; ++b)
            for (size_t g = 0; g < groups; ++g) {
              const Real* dyg = dy + (b * Cout + g * Coutg) * hw_out;
              const size_t xoff = (b * Cin + g * Cing) * hw_out;
              if (want_w) accum_dw(xn->value.data() + xoff, dyg, g);
              if (want_x)
                detail::mm_nn_acc(wt.data() + g * Rg * Coutg, dyg,
                                  xn->grad.data() + xoff, Rg, Coutg, hw_out);
            }
        } else {
          std::vector<Real> col(Cin * kh * kw * hw_out);
          std::vector<Real> dcol(Cin * kh * kw * hw_out);
          for (size_t b = 0; b < B; ++b) {
            detail::im2col(xn->value.data() + b * Cin * H * W, Cin, H, W, kh,
                           kw, stride, pad, Ho, Wo, col.data());
            if (want_x) std::fill(dcol.begin(), dcol.end(), Real(0));
            for (size_t g = 0; g < groups; ++g) {
              const Real* dyg = dy + (b * Cout + g * Coutg) * hw_out;
              if (want_w) accum_dw(col.data() + g * Rg * hw_out, dyg, g);
              if (want_x)
                detail::mm_nn_acc(wt.data() + g * Rg * Coutg, dyg,
                                  dcol.data() + g * Rg * hw_out, Rg, Coutg,
                                  hw_out);
            }
            if (want_x)
              detail::col2im_acc(dcol.data(), Cin, H, W, kh, kw, stride, pad,
                                 Ho, Wo, xn->grad.data() + b * Cin * H * W);
          }
        }
      }
    });
  }
  return out;
}

// ==================== pooling / resampling ====================

// Non-overlapping window average; stride equals the window.
template <typename Real>
Tensor<Real> avg_pool2d(const Tensor<Real>& x, size_t window) {
  if (x.rank() != 4)
    throw DimError("avg_pool2d: expected rank-4 input, got " +
                   shape_str(x.shape()));
  const size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (window == 0 || H % window != 0 || W % window != 0)
    throw DimError("avg_pool2d: window " + std::to_string(window) +
                   " does not tile " + shape_str(x.shape()));
  const size_t Ho = H / window, Wo = W / window;
  const Real inv = Real(1) / Real(window * window);
  std::vector<Real> y(B * C * Ho * Wo);
  const Real* px = x.ptr();
  for (size_t bc = 0; bc < B * C; ++bc) {
    const Real* xs = px + bc * H * W;
    Real* ys = y.data() + bc * Ho * Wo;
    for (size_t oh = 0; oh < Ho; ++oh)
      for (size_t ow = 0; ow < Wo; ++ow) {
        Real acc = 0;
        for (size_t i = 0; i < window; ++i)
          for (size_t j = 0; j < window; ++j)
            acc += xs[(oh * window + i) * W + ow * window + j];
        ys[oh * Wo + ow] = acc * inv;
      }
  }
  Tensor<Real> out = Tensor<Real>::from({B, C, Ho, Wo}, std::move(y));
  auto* tape = Tape<Real>::current();
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xn = x.node();
    auto on = out.node();
    tape->record({xn, on}, [=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t bc = 0; bc < B * C; ++bc) {
        const Real* g = on->grad.data() + bc * Ho * Wo;
        Real* dx = xn->grad.data() + bc * H * W;
        for (size_t oh = 0; oh < Ho; ++oh)
          for (size_t ow = 0; ow < Wo; ++ow) {
            const Real gv = g[oh * Wo + ow] * inv;
            for (size_t i = 0; i < window; ++i)
              for (size_t j = 0; j < window; ++j)
                dx[(oh * window + i) * W + ow * window + j] += gv;
          }
      }
    });
  }
  return out;
}

// (B,C,H,W) -> (B,C) spatial mean.
template <typename Real>
Tensor<Real> global_avg_pool(const Tensor<Real>& x) {
  if (x.rank() != 4)
    throw DimError("global_avg_pool: expected rank-4 input, got " +
                   shape_str(x.shape()));
  const size_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  const Real inv = Real(1) / Real(hw);
  std::vector<Real> y(B * C);
  const Real* px = x.ptr();
  for (size_t bc = 0; bc < B * C; ++bc) {
    Real acc = 0;
    const Real* xs = px + bc * hw;
    for (size_t i = 0; i < hw; ++i) acc += xs[i];
    y[bc] = acc * inv;
  }
  Tensor<Real> out = Tensor<Real>::from({B, C}, std::move(y));
  auto* tape = Tape<Real>::current();
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xn = x.node();
    auto on = out.node();
    tape->record({xn, on}, [=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t bc = 0; bc < B * C; ++bc) {
        const Real gv = on->grad[bc] * inv;
        Real* dx = xn->grad.data() + bc * hw;
        for (size_t i = 0; i < hw; ++i) dx[i] += gv;
      }
    });
  }
  return out;
}

// Nearest-neighbour upsampling by an integer factor.
template <typename Real>
Tensor<Real> upsample_nearest(const Tensor<Real>& x, size_t factor) {
  if (x.rank() != 4)
    throw DimError("upsample_nearest: expected rank-4 input, got " +
                   shape_str(x.shape()));
  if (factor == 0) throw DimError("upsample_nearest: zero factor");
  const size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const size_t Ho = H * factor, Wo = W * factor;
  std::vector<Real> y(B * C * Ho * Wo);
  const Real* px = x.ptr();
  for (size_t bc = 0; bc < B * C; ++bc) {
    const Real* xs = px + bc * H * W;
    Real* ys = y.data() + bc * Ho * Wo;
    for (size_t oh = 0; oh < Ho; ++oh) {
      const Real* row = xs + (oh / factor) * W;
      for (size_t ow = 0; ow < Wo; ++ow) ys[oh * Wo + ow] = row[ow / factor];
    }
  }
  Tensor<Real> out = Tensor<Real>::from({B, C, Ho, Wo}, std::move(y));
  auto* tape = Tape<Real>::current();
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xn = x.node();
    auto on = out.node();
    tape->record({xn, on}, [=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t bc = 0; bc < B * C; ++bc) {
        const Real* g = on->grad.data() + bc * Ho * Wo;
        Real* dx = xn->grad.data() + bc * H * W;
        for (size_t oh = 0; oh < Ho; ++oh)
          for (size_t ow = 0; ow < Wo; ++ow)
            dx[(oh / factor) * W + ow / factor] += g[oh * Wo + ow];
      }
    });
  }
  return out;
}

// ==================== linear ====================

// y = x W^T + b with x (..., In), w (Out, In), b (Out) or empty.
template <typename Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w,
                    const Tensor<Real>& b) {
  if (x.rank() < 1 || w.rank() != 2 || x.dim(x.rank() - 1) != w.dim(1))
    throw DimError("linear: input " + shape_str(x.shape()) +
                   " incompatible with weight " + shape_str(w.shape()));
  const size_t In = w.dim(1), Out = w.dim(0);
  const size_t N = x.size() / In;
  const bool has_bias = b.size() > 0;
  if (has_bias && (b.rank() != 1 || b.dim(0) != Out))
    throw DimError("linear: bias " + shape_str(b.shape()) + " for " +
                   std::to_string(Out) + " outputs");
  std::vector<Real> y(N * Out, Real(0));
  // W^T once per call keeps the product in the vectorizable row kernel
  std::vector<Real> wt(In * Out);
  for (size_t o = 0; o < Out; ++o)
    for (size_t i = 0; i < In; ++i) wt[i * Out + o] = w.ptr()[o * In + i];
  detail::mm_nn_acc(x.ptr(), wt.data(), y.data(), N, In, Out);
  if (has_bias) {
    const Real* pb = b.ptr();
    for (size_t i = 0; i < N; ++i) {
      Real* row = y.data() + i * Out;
      for (size_t j = 0; j < Out; ++j) row[j] += pb[j];
    }
  }
  Shape out_shape = x.shape();
  out_shape.back() = Out;
  Tensor<Real> out = Tensor<Real>::from(out_shape, std::move(y));
  auto* tape = Tape<Real>::current();
  const bool need = tape && (x.requires_grad() || w.requires_grad() ||
                             (has_bias && b.requires_grad()));
  if (need) {
    out.set_requires_grad(true);
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    auto on = out.node();
    tape->record({xn, wn, bn, on}, [=]() {
      if (on->grad.empty()) return;
      const Real* dy = on->grad.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        // dX = dY W
        detail::mm_nn_acc(dy, wn->value.data(), xn->grad.data(), N, Out, In);
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        // dW = dY^T X
        detail::mm_tn_acc(dy, xn->value.data(), wn->grad.data(), Out, N, In);
      }
      if (has_bias && bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < N; ++i) {
          const Real* row = dy + i * Out;
          for (size_t j = 0; j < Out; ++j) bn->grad[j] += row[j];
        }
      }
    });
  }
  return out;
}

// ==================== normalization ====================

// Per-sample normalization pooled jointly over channels and spatial extent,
// with a learned scale and shift per channel. Batch-independent by
// construction. Pooling across channels keeps each channel's relative level
// in the output, so a following global average still sees the sample.
template <typename Real>
Tensor<Real> channel_norm(const Tensor<Real>& x, const Tensor<Real>& gamma,
                          const Tensor<Real>& beta, Real eps = Real(1e-5)) {
  if (x.rank() != 4)
    throw DimError("channel_norm: expected rank-4 input, got " +
                   shape_str(x.shape()));
  const size_t B = x.dim(0), C = x.dim(1), n = x.dim(2) * x.dim(3);
  if (gamma.size() != C || beta.size() != C)
    throw DimError("channel_norm: affine size " +
                   std::to_string(gamma.size()) + " for " + std::to_string(C) +
                   " channels");
  const size_t cn = C * n;
  std::vector<Real> y(x.size());
  std::vector<Real> mu(B), inv_std(B);
  const Real* px = x.ptr();
  const Real* pg = gamma.ptr();
  const Real* pb = beta.ptr();
  for (size_t b = 0; b < B; ++b) {
    const Real* xs = px + b * cn;
    Real m = 0;
    for (size_t i = 0; i < cn; ++i) m += xs[i];
    m /= Real(cn);
    Real var = 0;
    for (size_t i = 0; i < cn; ++i) {
      const Real d = xs[i] - m;
      var += d * d;
    }
    var /= Real(cn);
    const Real is = Real(1) / std::sqrt(var + eps);
    mu[b] = m;
    inv_std[b] = is;
    Real* ys = y.data() + b * cn;
    for (size_t c = 0; c < C; ++c)
      for (size_t i = 0; i < n; ++i)
        ys[c * n + i] = (xs[c * n + i] - m) * is * pg[c] + pb[c];
  }
  Tensor<Real> out = Tensor<Real>::from(x.shape(), std::move(y));
  auto* tape = Tape<Real>::current();
  const bool need = tape && (x.requires_grad() || gamma.requires_grad() ||
                             beta.requires_grad());
  if (need) {
    out.set_requires_grad(true);
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    auto on = out.node();
    auto mu_c = std::move(mu);
    auto is_c = std::move(inv_std);
    tape->record({xn, gn, bn, on}, [=]() {
      if (on->grad.empty()) return;
      if (xn->requires_grad) xn->ensure_grad();
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (size_t b = 0; b < B; ++b) {
        const Real* xs = xn->value.data() + b * cn;
        const Real* dy = on->grad.data() + b * cn;
        const Real is = is_c[b], m = mu_c[b];
        // dh = gamma * dy propagated through the shared standardization
        Real sum_dh = 0, sum_dh_xhat = 0;
        for (size_t c = 0; c < C; ++c) {
          const Real gam = gn->value[c];
          Real sum_dy = 0, sum_dy_xhat = 0;
          for (size_t i = 0; i < n; ++i) {
            const Real xh = (xs[c * n + i] - m) * is;
            sum_dy += dy[c * n + i];
            sum_dy_xhat += dy[c * n + i] * xh;
          }
          if (gn->requires_grad) gn->grad[c] += sum_dy_xhat;
          if (bn->requires_grad) bn->grad[c] += sum_dy;
          sum_dh += gam * sum_dy;
          sum_dh_xhat += gam * sum_dy_xhat;
        }
        if (xn->requires_grad) {
          Real* dx = xn->grad.data() + b * cn;
          for (size_t c = 0; c < C; ++c) {
            const Real k = gn->value[c] * is;
            for (size_t i = 0; i < n; ++i) {
              const Real xh = (xs[c * n + i] - m) * is;
              dx[c * n + i] += k * dy[c * n + i] -
                               is * (sum_dh + xh * sum_dh_xhat) / Real(cn);
            }
          }
        }
      }
    });
  }
  return out;
}

// Normalization over the trailing feature dimension with per-feature
// learned scale and shift; x (..., D), gamma/beta (D).
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gamma,
                        const Tensor<Real>& beta, Real eps = Real(1e-5)) {
  if (x.rank() < 1)
    throw DimError("layer_norm: scalar input");
  const size_t D = x.dim(x.rank() - 1);
  if (gamma.size() != D || beta.size() != D)
    throw DimError("layer_norm: affine size " + std::to_string(gamma.size()) +
                   " for feature dim " + std::to_string(D));
  const size_t groups = x.size() / D;
  std::vector<Real> y(x.size());
  std::vector<Real> mu(groups), inv_std(groups);
  const Real* px = x.ptr();
  const Real* pg = gamma.ptr();
  const Real* pb = beta.ptr();
  for (size_t g = 0; g < groups; ++g) {
    const Real* xs = px + g * D;
    Real m = 0;
    for (size_t i = 0; i < D; ++i) m += xs[i];
    m /= Real(D);
    Real var = 0;
    for (size_t i = 0; i < D; ++i) {
      const Real d = xs[i] - m;
      var += d * d;
    }
    var /= Real(D);
    const Real is = Real(1) / std::sqrt(var + eps);
    mu[g] = m;
    inv_std[g] = is;
    Real* ys = y.data() + g * D;
    for (size_t i = 0; i < D; ++i) ys[i] = (xs[i] - m) * is * pg[i] + pb[i];
  }
  Tensor<Real> out = Tensor<Real>::from(x.shape(), std::move(y));
  auto* tape = Tape<Real>::current();
  const bool need = tape && (x.requires_grad() || gamma.requires_grad() ||
                             beta.requires_grad());
  if (need) {
    out.set_requires_grad(true);
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    auto on = out.node();
    auto mu_c = std::move(mu);
    auto is_c = std::move(inv_std);
    tape->record({xn, gn, bn, on}, [=]() {
      if (on->grad.empty()) return;
      if (xn->requires_grad) xn->ensure_grad();
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (size_t g = 0; g < groups; ++g) {
        const Real* xs = xn->value.data() + g * D;
        const Real* dy = on->grad.data() + g * D;
        const Real is = is_c[g], m = mu_c[g];
        Real sum_t = 0, sum_t_xhat = 0;  // t = dy * gamma
        for (size_t i = 0; i < D; ++i) {
          const Real xh = (xs[i] - m) * is;
          const Real t = dy[i] * gn->value[i];
          sum_t += t;
          sum_t_xhat += t * xh;
          if (gn->requires_grad) gn->grad[i] += dy[i] * xh;
          if (bn->requires_grad) bn->grad[i] += dy[i];
        }
        if (xn->requires_grad) {
          Real* dx = xn->grad.data() + g * D;
          const Real k = is / Real(D);
          for (size_t i = 0; i < D; ++i) {
            const Real xh = (xs[i] - m) * is;
            const Real t = dy[i] * gn->value[i];
            dx[i] += k * (Real(D) * t - sum_t - xh * sum_t_xhat);
          }
        }
      }
    });
  }
  return out;
}

// ==================== parameter-owning layers ====================

// Fan-out normal init for conv kernels, truncated normal (std 0.02) for
// linear and embedding weights, zero biases, unit scales.

template <typename Real>
struct Conv2dLayer {
  Tensor<Real> weight;  // (out, in/groups, k, k)
  Tensor<Real> bias;    // (out); empty when the conv feeds a normalization
  size_t stride = 1, pad = 0, groups = 1;

  Conv2dLayer() = default;
  Conv2dLayer(Rng& rng, size_t in_ch, size_t out_ch, size_t k, size_t stride_,
              size_t pad_, size_t groups_, bool with_bias) {
    stride = stride_;
    pad = pad_;
    groups = groups_;
    weight = Tensor<Real>::zeros({out_ch, in_ch / groups_, k, k});
    const double fan_out = double(out_ch) * k * k;
    fill_normal(weight, rng, 0.0, std::sqrt(2.0 / fan_out));
    weight.set_requires_grad(true);
    if (with_bias) {
      bias = Tensor<Real>::zeros({out_ch});
      bias.set_requires_grad(true);
    }
  }

  Tensor<Real> forward(const Tensor<Real>& x) const {
    return conv2d(x, weight, bias, stride, pad, groups);
  }

  void collect(const std::string& p, std::vector<NamedParam<Real>>& out) {
    out.push_back({p + ".weight", weight});
    if (bias.size() > 0) out.push_back({p + ".bias", bias});
  }
};

template <typename Real>
struct LinearLayer {
  Tensor<Real> weight;  // (out, in)
  Tensor<Real> bias;    // (out)

  LinearLayer() = default;
  LinearLayer(Rng& rng, size_t in_dim, size_t out_dim) {
    weight = Tensor<Real>::zeros({out_dim, in_dim});
    fill_trunc_normal(weight, rng, 0.02);
    weight.set_requires_grad(true);
    bias = Tensor<Real>::zeros({out_dim});
    bias.set_requires_grad(true);
  }

  Tensor<Real> forward(const Tensor<Real>& x) const {
    return linear(x, weight, bias);
  }

  void collect(const std::string& p, std::vector<NamedParam<Real>>& out) {
    out.push_back({p + ".weight", weight});
    out.push_back({p + ".bias", bias});
  }
};

template <typename Real>
struct ChannelNormLayer {
  Tensor<Real> gamma, beta;

  ChannelNormLayer() = default;
  explicit ChannelNormLayer(size_t channels) {
    gamma = Tensor<Real>::ones({channels});
    beta = Tensor<Real>::zeros({channels});
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }

  Tensor<Real> forward(const Tensor<Real>& x) const {
    return channel_norm(x, gamma, beta);
  }

  void collect(const std::string& p, std::vector<NamedParam<Real>>& out) {
    out.push_back({p + ".scale", gamma});
    out.push_back({p + ".shift", beta});
  }
};

template <typename Real>
struct LayerNormLayer {
  Tensor<Real> gamma, beta;

  LayerNormLayer() = default;
  explicit LayerNormLayer(size_t dim) {
    gamma = Tensor<Real>::ones({dim});
    beta = Tensor<Real>::zeros({dim});
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
  }

  Tensor<Real> forward(const Tensor<Real>& x) const {
    return layer_norm(x, gamma, beta);
  }

  void collect(const std::string& p, std::vector<NamedParam<Real>>& out) {
    out.push_back({p + ".scale", gamma});
    out.push_back({p + ".shift", beta});
  }
};

}  // namespace fvit
