#pragma once

// Turns recorded selections into something a person can look at: the
// per-stage importance masks of a forward pass, heatmap overlays of those
// masks on the input image, and summary statistics of what got selected.

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fvit/image.hpp"
#include "fvit/model.hpp"

namespace fvit {

enum class Colormap { blue_red };

// blue_red maps 0 to pure blue (0,0,1) and 1 to pure red (1,0,0), linearly
// in between; out-of-range values are clamped.
inline std::array<double, 3> colormap_rgb(Colormap map, double v) {
  (void)map;
  v = std::min(1.0, std::max(0.0, v));
  return {v, 0.0, 1.0 - v};
}

// Nearest-neighbor resize of a (H,W) map; each output cell copies the source
// cell whose center is nearest, so no new values are invented.
template <typename Real>
Tensor<Real> nn_upsample(const Tensor<Real>& mask, size_t out_h, size_t out_w) {
  if (mask.rank() != 2)
    throw DimError("nn_upsample: expected (H,W), got " +
                   shape_str(mask.shape()));
  if (out_h == 0 || out_w == 0)
    throw DimError("nn_upsample: empty output");
  const size_t h = mask.dim(0), w = mask.dim(1);
  auto out = Tensor<Real>::zeros({out_h, out_w});
  const Real* src = mask.ptr();
  Real* dst = out.ptr();
  for (size_t i = 0; i < out_h; ++i) {
    const size_t si = std::min(h - 1, size_t((i + 0.5) * double(h) / out_h));
    for (size_t j = 0; j < out_w; ++j) {
      const size_t sj = std::min(w - 1, size_t((j + 0.5) * double(w) / out_w));
      dst[i * out_w + j] = src[si * w + sj];
    }
  }
  return out;
}

// (1-alpha)*image + alpha*colormap(mask), clamped and encoded as binary PPM.
// The mask is upsampled to the image size first.
template <typename Real>
std::string render_overlay(const Tensor<Real>& image, const Tensor<Real>& mask,
                           double alpha, Colormap map = Colormap::blue_red) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw DimError("render_overlay: expected (3,H,W) image, got " +
                   shape_str(image.shape()));
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ContractError("render_overlay: alpha " + std::to_string(alpha) +
                        " outside [0,1]");
  const size_t h = image.dim(1), w = image.dim(2);
  auto up = nn_upsample(mask, h, w);
  auto out = Tensor<Real>::zeros({3, h, w});
  const Real* img = image.ptr();
  const Real* m = up.ptr();
  Real* o = out.ptr();
  for (size_t i = 0; i < h * w; ++i) {
    const auto rgb = colormap_rgb(map, double(m[i]));
    for (size_t c = 0; c < 3; ++c) {
      const double v =
          (1.0 - alpha) * double(img[c * h * w + i]) + alpha * rgb[c];
      o[c * h * w + i] = Real(std::min(1.0, std::max(0.0, v)));
    }
  }
  return encode_ppm(out);
}

template <typename Real>
struct StageMask {
  size_t grid = 0;                 // mask is grid x grid
  Tensor<Real> mask;               // (grid,grid) sigmoid scores, detached
  std::vector<uint32_t> selected;  // flattened row-major positions
};

template <typename Real>
struct MaskExtraction {
  Tensor<Real> logits;  // (1, classes)
  std::vector<StageMask<Real>> stages;
};

// Runs one image through the model and collects each stage's importance map
// together with the positions its encoder actually saw. Pure observation:
// the logits are exactly those of an ordinary forward pass.
template <typename Real>
MaskExtraction<Real> extract_masks(FilterVit<Real>& model,
                                   const Tensor<Real>& image) {
  if (image.rank() != 3)
    throw DimError("extract_masks: expected (3,H,W) image, got " +
                   shape_str(image.shape()));
  auto batch = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
  MaskExtraction<Real> out;
  out.logits = model.forward(batch);
  for (const auto* rec : model.selections()) {
    if (rec->indices.empty())
      throw ContractError("extract_masks: no selection was recorded");
    StageMask<Real> s;
    s.grid = rec->importance.dim(2);
    s.mask = reshape(rec->importance, {s.grid, s.grid});
    s.selected = rec->indices[0];
    out.stages.push_back(std::move(s));
  }
  return out;
}

// Jaccard overlap of two selected sets living on (possibly different) square
// grids, compared at the finer of the two resolutions.
inline double selection_iou(const std::vector<uint32_t>& a, size_t grid_a,
                            const std::vector<uint32_t>& b, size_t grid_b) {
  const size_t g = std::max(grid_a, grid_b);
  auto blow_up = [g](const std::vector<uint32_t>& sel, size_t from) {
    if (from == 0) throw DimError("selection_iou: empty grid");
    std::vector<uint8_t> src(from * from, 0);
    for (uint32_t s : sel) {
      if (s >= from * from)
        throw IndexError("selection_iou: index " + std::to_string(s) +
                         " outside " + std::to_string(from * from) +
                         " positions");
      src[s] = 1;
    }
    std::vector<uint8_t> ind(g * g, 0);
    for (size_t i = 0; i < g; ++i) {
      const size_t si = std::min(from - 1, size_t((i + 0.5) * double(from) / g));
      for (size_t j = 0; j < g; ++j) {
        const size_t sj =
            std::min(from - 1, size_t((j + 0.5) * double(from) / g));
        ind[i * g + j] = src[si * from + sj];
      }
    }
    return ind;
  };
  const auto ia = blow_up(a, grid_a), ib = blow_up(b, grid_b);
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < g * g; ++i) {
    inter += size_t(ia[i] && ib[i]);
    uni += size_t(ia[i] || ib[i]);
  }
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

struct StageCoverage {
  size_t grid = 0;
  size_t selected_count = 0;
  double selected_fraction = 0;
  double selected_mean = 0;
  bool full = false;  // every position selected: no unselected mean exists
  double unselected_mean = 0;
  double overlap_next = -1;  // IoU with the next stage's selection; -1 at the end
};

// Per-stage selection statistics for aligned mask and index series.
template <typename Real>
std::vector<StageCoverage> selection_coverage(
    const std::vector<Tensor<Real>>& masks,
    const std::vector<std::vector<uint32_t>>& indices) {
  if (masks.size() != indices.size())
    throw ContractError("selection_coverage: " + std::to_string(masks.size()) +
                        " masks vs " + std::to_string(indices.size()) +
                        " selections");
  std::vector<StageCoverage> out;
  for (size_t s = 0; s < masks.size(); ++s) {
    const auto& m = masks[s];
    if (m.rank() != 2)
      throw DimError("selection_coverage: expected (H,W) masks");
    const size_t hw = m.dim(0) * m.dim(1);
    if (indices[s].empty())
      throw ContractError("selection_coverage: empty selection in stage " +
                          std::to_string(s));
    std::vector<uint8_t> picked(hw, 0);
    for (uint32_t i : indices[s]) {
      if (i >= hw)
        throw IndexError("selection_coverage: index " + std::to_string(i) +
                         " outside " + std::to_string(hw) + " positions");
      if (picked[i])
        throw ContractError("selection_coverage: duplicate index " +
                            std::to_string(i));
      picked[i] = 1;
    }
    StageCoverage c;
    c.grid = m.dim(0);
    c.selected_count = indices[s].size();
    c.selected_fraction = double(c.selected_count) / double(hw);
    c.full = c.selected_count == hw;
    double sel = 0, rest = 0;
    for (size_t i = 0; i < hw; ++i)
      (picked[i] ? sel : rest) += double(m.ptr()[i]);
    c.selected_mean = sel / double(c.selected_count);
    if (!c.full) c.unselected_mean = rest / double(hw - c.selected_count);
    out.push_back(c);
  }
  for (size_t s = 0; s + 1 < out.size(); ++s)
    out[s].overlap_next =
        selection_iou(indices[s], out[s].grid, indices[s + 1], out[s + 1].grid);
  return out;
}

template <typename Real>
std::vector<StageCoverage> selection_coverage(
    const std::vector<StageMask<Real>>& stages) {
  std::vector<Tensor<Real>> masks;
  std::vector<std::vector<uint32_t>> indices;
  for (const auto& s : stages) {
    masks.push_back(s.mask);
    indices.push_back(s.selected);
  }
  return selection_coverage(masks, indices);
}

}  // namespace fvit
