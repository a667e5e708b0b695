// Classifier assembly: convolutional stem, inverted-residual stages,
// importance-filtered attention at three resolutions, pooled global
// attention, and a linear head.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "fvit/config.hpp"
#include "fvit/errors.hpp"
#include "fvit/filter_attention.hpp"
#include "fvit/nn.hpp"
#include "fvit/tensor.hpp"

namespace fvit {

template <typename Real>
struct InvertedResidual {
  size_t in_ch = 0, out_ch = 0, stride = 1, ratio = 1;
  Conv2dLayer<Real> expand;  // absent when ratio == 1
  ChannelNormLayer<Real> expand_norm;
  Conv2dLayer<Real> dw;
  ChannelNormLayer<Real> dw_norm;
  Conv2dLayer<Real> project;
  ChannelNormLayer<Real> project_norm;

  InvertedResidual() = default;
  InvertedResidual(Rng& rng, size_t in, size_t out, size_t stride_,
                   size_t ratio_) {
    if (stride_ != 1 && stride_ != 2)
      throw ConfigError("inverted residual: stride must be 1 or 2");
    if (ratio_ == 0)
      throw ConfigError("inverted residual: expand ratio must be >= 1");
    in_ch = in;
    out_ch = out;
    stride = stride_;
    ratio = ratio_;
    const size_t mid = in * ratio;
    if (ratio > 1) {
      expand = Conv2dLayer<Real>(rng, in, mid, 1, 1, 0, 1, false);
      expand_norm = ChannelNormLayer<Real>(mid);
    }
    dw = Conv2dLayer<Real>(rng, mid, mid, 3, stride, 1, mid, false);
    dw_norm = ChannelNormLayer<Real>(mid);
    project = Conv2dLayer<Real>(rng, mid, out, 1, 1, 0, 1, false);
    project_norm = ChannelNormLayer<Real>(out);
  }

  Tensor<Real> forward(const Tensor<Real>& x) const {
    auto h = x;
    if (ratio > 1) h = relu6(expand_norm.forward(expand.forward(h)));
    h = relu6(dw_norm.forward(dw.forward(h)));
    h = project_norm.forward(project.forward(h));
    if (stride == 1 && in_ch == out_ch) h = add(x, h);
    return h;
  }

  void collect(const std::string& p, std::vector<NamedParam<Real>>& out) {
    if (ratio > 1) {
      expand.collect(p + ".expand", out);
      expand_norm.collect(p + ".expand_norm", out);
    }
    dw.collect(p + ".dw", out);
    dw_norm.collect(p + ".dw_norm", out);
    project.collect(p + ".project", out);
    project_norm.collect(p + ".project_norm", out);
  }
};

template <typename Real>
struct FilterVit {
  ModelConfig cfg;
  Conv2dLayer<Real> stem;
  ChannelNormLayer<Real> stem_norm;
  InvertedResidual<Real> ir1, ir2, ir3, ir4;
  FilterAttentionBlock<Real> fa1, fa2, fa3;
  PooledAttentionBlock<Real> pooled;
  LinearLayer<Real> head;

  FilterVit() = default;
  // Same seed => bitwise-identical parameters for both variants, since the
  // variants differ only in selection policy, never in parameter inventory.
  FilterVit(const ModelConfig& cfg_, uint64_t seed) : cfg(cfg_) {
    validate_model(cfg);
    Rng rng(seed);
    const auto& ch = cfg.channels;
    const SelectionMode mode = cfg.variant == "dropout" ? SelectionMode::random
                                                        : SelectionMode::topk;
    const size_t s1 = stage_grid(cfg, 0), s2 = stage_grid(cfg, 1),
                 s3 = stage_grid(cfg, 2);

    stem = Conv2dLayer<Real>(rng, cfg.in_channels, ch[0], 3, 2, 1, 1, false);
    stem_norm = ChannelNormLayer<Real>(ch[0]);
    ir1 = InvertedResidual<Real>(rng, ch[0], ch[1], 1, cfg.expand_ratio);
    fa1 = FilterAttentionBlock<Real>(rng, ch[1], s1, s1, stage_k(cfg, 0),
                                     cfg.scorer_kernel, cfg.encoder_depth,
                                     cfg.heads, cfg.mlp_ratio, mode,
                                     cfg.residual_scatter);
    ir2 = InvertedResidual<Real>(rng, ch[1], ch[2], 2, cfg.expand_ratio);
    fa2 = FilterAttentionBlock<Real>(rng, ch[2], s2, s2, stage_k(cfg, 1),
                                     cfg.scorer_kernel, cfg.encoder_depth,
                                     cfg.heads, cfg.mlp_ratio, mode,
                                     cfg.residual_scatter);
    ir3 = InvertedResidual<Real>(rng, ch[2], ch[3], 2, cfg.expand_ratio);
    fa3 = FilterAttentionBlock<Real>(rng, ch[3], s3, s3, stage_k(cfg, 2),
                                     cfg.scorer_kernel, cfg.encoder_depth,
                                     cfg.heads, cfg.mlp_ratio, mode,
                                     cfg.residual_scatter);
    pooled = PooledAttentionBlock<Real>(rng, ch[3], s3, s3, cfg.pool_window,
                                        cfg.encoder_depth, cfg.heads,
                                        cfg.mlp_ratio);
    ir4 = InvertedResidual<Real>(rng, ch[3], ch[4], 1, cfg.expand_ratio);
    head = LinearLayer<Real>(rng, ch[4], cfg.num_classes);
  }

  // rng drives random token selection; required only for the dropout
  // variant in training mode.
  Tensor<Real> forward(const Tensor<Real>& x, bool training = false,
                       Rng* rng = nullptr) {
    if (x.rank() != 4 || x.dim(1) != cfg.in_channels ||
        x.dim(2) != cfg.image_size || x.dim(3) != cfg.image_size)
      throw DimError("model: expected input (B," +
                     std::to_string(cfg.in_channels) + "," +
                     std::to_string(cfg.image_size) + "," +
                     std::to_string(cfg.image_size) + ")");
    auto h = relu6(stem_norm.forward(stem.forward(x)));
    h = ir1.forward(h);
    h = fa1.forward(h, training, rng);
    h = ir2.forward(h);
    h = fa2.forward(h, training, rng);
    h = ir3.forward(h);
    h = fa3.forward(h, training, rng);
    h = pooled.forward(h);
    h = ir4.forward(h);
    return head.forward(global_avg_pool(h));
  }

  // Selection made by each filter stage during the most recent forward.
  std::array<const SelectionRecord<Real>*, 3> selections() const {
    return {&fa1.last, &fa2.last, &fa3.last};
  }
  std::array<const FilterAttentionBlock<Real>*, 3> filter_blocks() const {
    return {&fa1, &fa2, &fa3};
  }

  void collect(std::vector<NamedParam<Real>>& out) {
    stem.collect("stem", out);
    stem_norm.collect("stem_norm", out);
    ir1.collect("ir1", out);
    fa1.collect("fa1", out);
    ir2.collect("ir2", out);
    fa2.collect("fa2", out);
    ir3.collect("ir3", out);
    fa3.collect("fa3", out);
    pooled.collect("pooled", out);
    ir4.collect("ir4", out);
    head.collect("head", out);
  }

  std::vector<NamedParam<Real>> params() {
    std::vector<NamedParam<Real>> out;
    collect(out);
    return out;
  }

  size_t param_count() {
    size_t n = 0;
    for (const auto& p : params()) n += p.tensor.size();
    return n;
  }
};

}  // namespace fvit
