// Plain image-value operations on (C,H,W) tensors: geometry for the data
// pipeline, PPM serialization for mask visualization. None of these record
// gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include "fvit/errors.hpp"
#include "fvit/tensor.hpp"

namespace fvit {

namespace detail {
template <typename Real>
void check_chw(const Tensor<Real>& x, const char* op) {
  if (x.rank() != 3)
    throw DimError(std::string(op) + ": expected (C,H,W), got " +
                   shape_str(x.shape()));
}
}  // namespace detail

// Bilinear resampling with half-pixel centers; resizing to the source size
// reproduces it exactly.
template <typename Real>
Tensor<Real> bilinear_resize(const Tensor<Real>& x, size_t out_h,
                             size_t out_w) {
  detail::check_chw(x, "bilinear_resize");
  if (out_h == 0 || out_w == 0)
    throw DimError("bilinear_resize: empty output");
  const size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  auto y = Tensor<Real>::zeros({C, out_h, out_w});
  const Real* src = x.ptr();
  Real* dst = y.data().data();
  const double sh = double(H) / double(out_h), sw = double(W) / double(out_w);
  for (size_t i = 0; i < out_h; ++i) {
    double fy = (double(i) + 0.5) * sh - 0.5;
    fy = std::clamp(fy, 0.0, double(H - 1));
    const size_t y0 = size_t(fy), y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - double(y0);
    for (size_t j = 0; j < out_w; ++j) {
      double fx = (double(j) + 0.5) * sw - 0.5;
      fx = std::clamp(fx, 0.0, double(W - 1));
      const size_t x0 = size_t(fx), x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - double(x0);
      for (size_t c = 0; c < C; ++c) {
        const Real* p = src + c * H * W;
        const double top = double(p[y0 * W + x0]) * (1 - wx) +
                           double(p[y0 * W + x1]) * wx;
        const double bot = double(p[y1 * W + x0]) * (1 - wx) +
                           double(p[y1 * W + x1]) * wx;
        dst[(c * out_h + i) * out_w + j] = Real(top * (1 - wy) + bot * wy);
      }
    }
  }
  return y;
}

template <typename Real>
Tensor<Real> crop(const Tensor<Real>& x, size_t top, size_t left, size_t h,
                  size_t w) {
  detail::check_chw(x, "crop");
  if (h == 0 || w == 0 || top + h > x.dim(1) || left + w > x.dim(2))
    throw DimError("crop: window exceeds image bounds");
  const size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  auto y = Tensor<Real>::zeros({C, h, w});
  const Real* src = x.ptr();
  Real* dst = y.data().data();
  for (size_t c = 0; c < C; ++c)
    for (size_t i = 0; i < h; ++i)
      for (size_t j = 0; j < w; ++j)
        dst[(c * h + i) * w + j] = src[(c * H + top + i) * W + left + j];
  return y;
}

template <typename Real>
Tensor<Real> center_crop(const Tensor<Real>& x, size_t side) {
  detail::check_chw(x, "center_crop");
  if (side > x.dim(1) || side > x.dim(2))
    throw DimError("center_crop: side exceeds image");
  return crop(x, (x.dim(1) - side) / 2, (x.dim(2) - side) / 2, side, side);
}

template <typename Real>
Tensor<Real> flip_horizontal(const Tensor<Real>& x) {
  detail::check_chw(x, "flip_horizontal");
  const size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  auto y = Tensor<Real>::zeros({C, H, W});
  const Real* src = x.ptr();
  Real* dst = y.data().data();
  for (size_t c = 0; c < C; ++c)
    for (size_t i = 0; i < H; ++i)
      for (size_t j = 0; j < W; ++j)
        dst[(c * H + i) * W + j] = src[(c * H + i) * W + (W - 1 - j)];
  return y;
}

// Binary PPM (P6, maxval 255); values are clamped to [0,1] then rounded.
template <typename Real>
std::string encode_ppm(const Tensor<Real>& x) {
  detail::check_chw(x, "encode_ppm");
  if (x.dim(0) != 3) throw DimError("encode_ppm: expected 3 channels");
  const size_t H = x.dim(1), W = x.dim(2);
  std::ostringstream out(std::ios::binary);
  out << "P6\n" << W << " " << H << "\n255\n";
  const Real* p = x.ptr();
  for (size_t i = 0; i < H; ++i)
    for (size_t j = 0; j < W; ++j)
      for (size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(double(p[(c * H + i) * W + j]), 0.0, 1.0);
        out.put(char(uint8_t(std::lround(v * 255.0))));
      }
  return out.str();
}

template <typename Real>
void write_ppm(const std::string& path, const Tensor<Real>& x) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("ppm: cannot write " + path);
  const std::string bytes = encode_ppm(x);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw FormatError("ppm: write failed for " + path);
}

template <typename Real>
Tensor<Real> decode_ppm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  size_t w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  if (!in || magic != "P6" || maxv != 255 || w == 0 || h == 0)
    throw FormatError("ppm: unsupported header");
  in.get();  // single whitespace after maxval
  auto x = Tensor<Real>::zeros({3, h, w});
  Real* p = x.data().data();
  for (size_t i = 0; i < h; ++i)
    for (size_t j = 0; j < w; ++j)
      for (size_t c = 0; c < 3; ++c) {
        const int v = in.get();
        if (v < 0) throw FormatError("ppm: truncated pixel data");
        p[(c * h + i) * w + j] = Real(v) / Real(255);
      }
  return x;
}

template <typename Real>
Tensor<Real> read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("ppm: cannot open " + path);
  std::ostringstream buf(std::ios::binary);
  buf << in.rdbuf();
  return decode_ppm<Real>(buf.str());
}

}  // namespace fvit
