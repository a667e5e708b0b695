// Dataset ingestion and batching: CIFAR-10 binary files, a procedural
// dataset whose classes are localized textures, augmentation, and
// deterministic shuffled batches.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "fvit/config.hpp"
#include "fvit/errors.hpp"
#include "fvit/image.hpp"
#include "fvit/tensor.hpp"

namespace fvit {

template <typename Real>
struct LabeledImage {
  Tensor<Real> pixels;  // (3,H,W) in [0,1]
  int label = 0;
};

template <typename Real>
using Dataset = std::vector<LabeledImage<Real>>;

// CIFAR-10 binary batches: records of 1 label byte + 32*32 bytes per plane
// in R,G,B order.
template <typename Real>
Dataset<Real> load_cifar10_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cifar10: cannot open " + path);
  const auto bytes = std::filesystem::file_size(path);
  constexpr size_t kRecord = 1 + 3 * 32 * 32;
  if (bytes % kRecord != 0)
    throw FormatError("cifar10: " + path + " is not a whole number of " +
                      std::to_string(kRecord) + "-byte records");
  Dataset<Real> out;
  out.reserve(bytes / kRecord);
  std::vector<unsigned char> rec(kRecord);
  while (in.read(reinterpret_cast<char*>(rec.data()), kRecord)) {
    if (rec[0] > 9)
      throw FormatError("cifar10: label byte " + std::to_string(rec[0]) +
                        " in record " + std::to_string(out.size()));
    LabeledImage<Real> img;
    img.label = rec[0];
    img.pixels = Tensor<Real>::zeros({3, 32, 32});
    Real* p = img.pixels.data().data();
    for (size_t i = 0; i < 3 * 32 * 32; ++i)
      p[i] = Real(rec[1 + i]) / Real(255);
    out.push_back(std::move(img));
  }
  return out;
}

// Procedural classification set: each class is a distinct bright texture
// (disc, horizontal stripes, vertical stripes, ring) drawn in a quarter-size
// patch at a random location over pixel noise. Locating the texture is what
// makes the classes separable, so a model has to attend to the right region.
template <typename Real>
Dataset<Real> synth_dataset(size_t num_classes, size_t n, size_t image_size,
                            uint64_t seed) {
  if (num_classes < 2 || num_classes > 4)
    throw ContractError("synth: supports 2..4 texture classes");
  if (n < num_classes)
    throw ContractError("synth: need at least one sample per class");
  if (image_size < 8) throw ContractError("synth: image too small");
  const size_t S = image_size, patch = S / 4;
  const double r = double(patch) / 2.0;
  const double cx = r - 0.5;  // patch center in pixel coordinates

  Dataset<Real> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, i));
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const int label = int(i % num_classes);
    const double amp = 0.6 + 0.35 * uni(rng);
    const size_t top = size_t(uni(rng) * double(S - patch + 1));
    const size_t left = size_t(uni(rng) * double(S - patch + 1));

    LabeledImage<Real> img;
    img.label = label;
    img.pixels = Tensor<Real>::zeros({3, S, S});
    Real* p = img.pixels.data().data();
    for (size_t k = 0; k < 3 * S * S; ++k) p[k] = Real(0.4 * uni(rng));

    for (size_t y = 0; y < patch; ++y) {
      for (size_t x = 0; x < patch; ++x) {
        const double dy = double(y) - cx, dx = double(x) - cx;
        const double d = std::sqrt(dy * dy + dx * dx);
        bool lit = false;
        switch (label) {
          case 0: lit = d <= 0.65 * r; break;
          case 1: lit = y % 3 == 0; break;
          case 2: lit = x % 3 == 0; break;
          case 3: lit = d >= 0.55 * r && d <= 0.95 * r; break;
        }
        const double jitter = 0.1 * uni(rng);  // consumed for every pixel
        if (!lit) continue;
        const Real v = Real(std::min(1.0, amp + jitter));
        for (size_t c = 0; c < 3; ++c)
          p[(c * S + top + y) * S + left + x] = v;
      }
    }
    out.push_back(std::move(img));
  }
  return out;
}

template <typename Real>
Tensor<Real> normalize(const Tensor<Real>& x, const std::vector<double>& mean,
                       const std::vector<double>& stdev) {
  detail::check_chw(x, "normalize");
  if (mean.size() != x.dim(0) || stdev.size() != x.dim(0))
    throw DimError("normalize: need one mean/std per channel");
  auto y = Tensor<Real>::zeros(x.shape());
  const size_t hw = x.dim(1) * x.dim(2);
  const Real* src = x.ptr();
  Real* dst = y.data().data();
  for (size_t c = 0; c < x.dim(0); ++c)
    for (size_t k = 0; k < hw; ++k)
      dst[c * hw + k] = Real((double(src[c * hw + k]) - mean[c]) / stdev[c]);
  return y;
}

template <typename Real>
Tensor<Real> denormalize(const Tensor<Real>& x, const std::vector<double>& mean,
                         const std::vector<double>& stdev) {
  detail::check_chw(x, "denormalize");
  auto y = Tensor<Real>::zeros(x.shape());
  const size_t hw = x.dim(1) * x.dim(2);
  const Real* src = x.ptr();
  Real* dst = y.data().data();
  for (size_t c = 0; c < x.dim(0); ++c)
    for (size_t k = 0; k < hw; ++k)
      dst[c * hw + k] = Real(double(src[c * hw + k]) * stdev[c] + mean[c]);
  return y;
}

// Training transform: random square crop by area scale, bilinear resize to
// the model size, coin-flip mirror, then normalization. The rng stream
// advances identically whichever branches are taken.
template <typename Real>
Tensor<Real> augment(const LabeledImage<Real>& img, const AugmentConfig& aug,
                     size_t out_size, Rng& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const size_t H = img.pixels.dim(1), W = img.pixels.dim(2);
  Tensor<Real> x = img.pixels;
  if (aug.crop) {
    const double area =
        aug.scale_min + (aug.scale_max - aug.scale_min) * uni(rng);
    const size_t base = std::min(H, W);
    const size_t side = std::clamp<size_t>(
        size_t(std::lround(std::sqrt(area) * double(base))), 1, base);
    const size_t top = size_t(uni(rng) * double(H - side + 1));
    const size_t left = size_t(uni(rng) * double(W - side + 1));
    x = crop(x, top, left, side, side);
  }
  if (x.dim(1) != out_size || x.dim(2) != out_size)
    x = bilinear_resize(x, out_size, out_size);
  if (uni(rng) < aug.flip_prob) x = flip_horizontal(x);
  return normalize(x, aug.mean, aug.stdev);
}

// Evaluation transform: resize to 9/8 of the target, center crop, normalize.
template <typename Real>
Tensor<Real> eval_transform(const LabeledImage<Real>& img,
                            const AugmentConfig& aug, size_t out_size) {
  const size_t resize = size_t(std::lround(double(out_size) * 9.0 / 8.0));
  auto x = bilinear_resize(img.pixels, resize, resize);
  return normalize(center_crop(x, out_size), aug.mean, aug.stdev);
}

inline std::vector<uint32_t> shuffled_indices(size_t n, Rng& rng) {
  std::vector<uint32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0u);
  for (size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<size_t> pick(0, i - 1);
    std::swap(idx[i - 1], idx[pick(rng)]);
  }
  return idx;
}

// Shuffled index batches; the final partial batch is kept.
inline std::vector<std::vector<uint32_t>> index_batches(size_t n,
                                                        size_t batch_size,
                                                        Rng& rng) {
  if (batch_size == 0) throw ContractError("batches: batch_size must be >= 1");
  const auto idx = shuffled_indices(n, rng);
  std::vector<std::vector<uint32_t>> out;
  for (size_t start = 0; start < n; start += batch_size) {
    const size_t stop = std::min(n, start + batch_size);
    out.emplace_back(idx.begin() + long(start), idx.begin() + long(stop));
  }
  return out;
}

// Stacks transformed images into one (B,3,S,S) tensor. Training mode applies
// `augment` and needs an rng; eval mode applies the deterministic transform.
template <typename Real>
std::pair<Tensor<Real>, std::vector<int>> make_batch(
    const Dataset<Real>& ds, const std::vector<uint32_t>& indices,
    const AugmentConfig& aug, size_t out_size, bool training,
    Rng* rng = nullptr) {
  if (indices.empty()) throw ContractError("batch: no indices");
  if (training && !rng) throw ContractError("batch: training needs an rng");
  const size_t B = indices.size();
  auto xs = Tensor<Real>::zeros({B, 3, out_size, out_size});
  std::vector<int> labels(B);
  Real* dst = xs.data().data();
  const size_t stride = 3 * out_size * out_size;
  for (size_t b = 0; b < B; ++b) {
    if (indices[b] >= ds.size())
      throw IndexError("batch: index " + std::to_string(indices[b]) +
                       " outside dataset of " + std::to_string(ds.size()));
    const auto& img = ds[indices[b]];
    auto x = training ? augment(img, aug, out_size, *rng)
                      : eval_transform(img, aug, out_size);
    std::copy(x.ptr(), x.ptr() + stride, dst + b * stride);
    labels[b] = img.label;
  }
  return {std::move(xs), std::move(labels)};
}

}  // namespace fvit
