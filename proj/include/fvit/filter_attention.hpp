#pragma once

// Sparse token attention: a small scorer convolution rates every spatial
// position, the feature map is gated by the resulting importance mask, and
// only the K selected positions are routed through a transformer encoder
// before being written back into the map.
//
// Selection is discrete, so no gradient flows through the index choice
// itself; the scorer trains through the importance-mask product. The
// random selection mode keeps that product (and the parameter shapes)
// identical and differs only in how the K positions are picked; at
// evaluation time it falls back to the learned top-K ranking.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "fvit/errors.hpp"
#include "fvit/nn.hpp"
#include "fvit/tensor.hpp"

namespace fvit {

enum class SelectionMode { topk, random };

// Per-sample indices of the K highest scores, each list ordered by
// descending score with ties broken toward the smaller flattened index.
template <typename Real>
SelectionIndex top_k_select(const Tensor<Real>& importance, size_t k) {
  if (importance.rank() != 4 || importance.dim(1) != 1)
    throw DimError("top_k_select: expected (B,1,H,W) importance, got " +
                   shape_str(importance.shape()));
  const size_t B = importance.dim(0);
  const size_t hw = importance.dim(2) * importance.dim(3);
  if (k == 0) throw EmptySelectionError("top_k_select: K must be at least 1");
  if (k > hw)
    throw IndexError("top_k_select: K=" + std::to_string(k) + " exceeds " +
                     std::to_string(hw) + " positions");
  if (!all_finite(importance))
    throw ContractError("top_k_select: non-finite importance scores");
  SelectionIndex out(B);
  const Real* p = importance.ptr();
  for (size_t b = 0; b < B; ++b) {
    const Real* s = p + b * hw;
    std::vector<uint32_t> order(hw);
    std::iota(order.begin(), order.end(), 0u);
    std::partial_sort(order.begin(), order.begin() + ptrdiff_t(k), order.end(),
                      [s](uint32_t a, uint32_t c) {
                        return s[a] > s[c] || (s[a] == s[c] && a < c);
                      });
    out[b].assign(order.begin(), order.begin() + ptrdiff_t(k));
  }
  return out;
}

// K distinct positions per sample, drawn uniformly; each list is returned
// in ascending position order.
inline SelectionIndex random_select(size_t batch, size_t positions, size_t k,
                                    Rng& rng) {
  if (k == 0) throw EmptySelectionError("random_select: K must be at least 1");
  if (k > positions)
    throw IndexError("random_select: K=" + std::to_string(k) + " exceeds " +
                     std::to_string(positions) + " positions");
  SelectionIndex out(batch);
  std::vector<uint32_t> pool(positions);
  for (size_t b = 0; b < batch; ++b) {
    std::iota(pool.begin(), pool.end(), 0u);
    for (size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<size_t> d(i, positions - 1);
      std::swap(pool[i], pool[d(rng)]);
    }
    out[b].assign(pool.begin(), pool.begin() + ptrdiff_t(k));
    std::sort(out[b].begin(), out[b].end());
  }
  return out;
}

// ==================== transformer encoder ====================

template <typename Real>
struct MultiHeadSelfAttention {
  size_t heads = 1;
  LinearLayer<Real> wq, wk, wv, wo;

  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(Rng& rng, size_t channels, size_t heads_) {
    if (heads_ == 0 || channels % heads_ != 0)
      throw ConfigError("attention: " + std::to_string(heads_) +
                        " heads do not divide " + std::to_string(channels) +
                        " channels");
    heads = heads_;
    wq = LinearLayer<Real>(rng, channels, channels);
    wk = LinearLayer<Real>(rng, channels, channels);
    wv = LinearLayer<Real>(rng, channels, channels);
    wo = LinearLayer<Real>(rng, channels, channels);
  }

  Tensor<Real> forward(const Tensor<Real>& x) const {
    if (x.rank() != 3)
      throw DimError("attention: expected (B,N,C) tokens, got " +
                     shape_str(x.shape()));
    const size_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
    if (N == 0)
      throw EmptySelectionError("attention: empty token set");
    const size_t dh = C / heads;
    auto split = [&](const Tensor<Real>& t) {
      return reshape(permute(reshape(t, {B, N, heads, dh}), {0, 2, 1, 3}),
                     {B * heads, N, dh});
    };
    // scaling q instead of the (N,N) score matrix touches C/N-th the data
    auto q = mul_scalar(split(wq.forward(x)), Real(1.0 / std::sqrt(double(dh))));
    auto kk = split(wk.forward(x));
    auto v = split(wv.forward(x));
    auto scores = bmm(q, permute(kk, {0, 2, 1}));
    auto ctx = bmm(softmax(scores, -1), v);
    auto merged =
        reshape(permute(reshape(ctx, {B, heads, N, dh}), {0, 2, 1, 3}),
                {B, N, C});
    return wo.forward(merged);
  }

  void collect(const std::string& p, std::vector<NamedParam<Real>>& out) {
    wq.collect(p + ".wq", out);
    wk.collect(p + ".wk", out);
    wv.collect(p + ".wv", out);
    wo.collect(p + ".wo", out);
  }
};

// Pre-norm layer: x += attn(ln1(x)); x += mlp(ln2(x)).
template <typename Real>
struct EncoderLayer {
  LayerNormLayer<Real> ln1, ln2;
  MultiHeadSelfAttention<Real> attn;
  LinearLayer<Real> fc1, fc2;

  EncoderLayer() = default;
  EncoderLayer(Rng& rng, size_t channels, size_t heads, size_t mlp_ratio) {
    if (mlp_ratio == 0) throw ConfigError("encoder: mlp_ratio must be >= 1");
    ln1 = LayerNormLayer<Real>(channels);
    attn = MultiHeadSelfAttention<Real>(rng, channels, heads);
    ln2 = LayerNormLayer<Real>(channels);
    fc1 = LinearLayer<Real>(rng, channels, channels * mlp_ratio);
    fc2 = LinearLayer<Real>(rng, channels * mlp_ratio, channels);
  }

  Tensor<Real> forward(const Tensor<Real>& x) const {
    auto h = add(x, attn.forward(ln1.forward(x)));
    return add(h, fc2.forward(gelu(fc1.forward(ln2.forward(h)))));
  }

  void collect(const std::string& p, std::vector<NamedParam<Real>>& out) {
    ln1.collect(p + ".ln1", out);
    attn.collect(p + ".attn", out);
    ln2.collect(p + ".ln2", out);
    fc1.collect(p + ".fc1", out);
    fc2.collect(p + ".fc2", out);
  }
};

template <typename Real>
struct TransformerEncoder {
  std::vector<EncoderLayer<Real>> layers;

  TransformerEncoder() = default;
  TransformerEncoder(Rng& rng, size_t depth, size_t channels, size_t heads,
                     size_t mlp_ratio) {
    layers.reserve(depth);
    for (size_t i = 0; i < depth; ++i)
      layers.emplace_back(rng, channels, heads, mlp_ratio);
  }

  Tensor<Real> forward(Tensor<Real> x) const {
    for (const auto& l : layers) x = l.forward(x);
    return x;
  }

  void collect(const std::string& p, std::vector<NamedParam<Real>>& out) {
    for (size_t i = 0; i < layers.size(); ++i)
      layers[i].collect(p + ".layers." + std::to_string(i), out);
  }
};

// ==================== filtered attention block ====================

template <typename Real>
struct SelectionRecord {
  SelectionIndex indices;
  Tensor<Real> importance;  // (B,1,H,W) mask values, detached
};

template <typename Real>
struct FilterAttentionBlock {
  size_t channels = 0, height = 0, width = 0, k = 0;
  SelectionMode mode = SelectionMode::topk;
  bool residual_scatter = false;
  Conv2dLayer<Real> scorer;
  Tensor<Real> pos_table;  // (H*W, C), looked up per selected position
  TransformerEncoder<Real> encoder;
  SelectionRecord<Real> last;  // refreshed on every forward

  FilterAttentionBlock() = default;
  FilterAttentionBlock(Rng& rng, size_t channels_, size_t height_,
                       size_t width_, size_t k_, size_t scorer_kernel,
                       size_t depth, size_t heads, size_t mlp_ratio,
                       SelectionMode mode_, bool residual_scatter_) {
    channels = channels_;
    height = height_;
    width = width_;
    k = k_;
    mode = mode_;
    residual_scatter = residual_scatter_;
    const size_t hw = height * width;
    if (k == 0 || k > hw)
      throw ConfigError("filter block: K=" + std::to_string(k) +
                        " outside [1," + std::to_string(hw) + "]");
    if (scorer_kernel % 2 == 0)
      throw ConfigError("filter block: scorer kernel must be odd");
    scorer = Conv2dLayer<Real>(rng, channels, 1, scorer_kernel, 1,
                               scorer_kernel / 2, 1, true);
    pos_table = Tensor<Real>::zeros({hw, channels});
    fill_trunc_normal(pos_table, rng, 0.02);
    pos_table.set_requires_grad(true);
    encoder = TransformerEncoder<Real>(rng, depth, channels, heads, mlp_ratio);
  }

  // training with random mode draws indices from `rng`; every other
  // combination ranks the learned importance map.
  Tensor<Real> forward(const Tensor<Real>& x, bool training, Rng* rng) {
    if (x.rank() != 4 || x.dim(1) != channels || x.dim(2) != height ||
        x.dim(3) != width)
      throw DimError("filter block: input " + shape_str(x.shape()) +
                     " does not match configured (" +
                     std::to_string(channels) + "," + std::to_string(height) +
                     "," + std::to_string(width) + ")");
    auto imp = sigmoid(scorer.forward(x));
    SelectionIndex sel;
    if (mode == SelectionMode::random && training) {
      if (!rng)
        throw ContractError("filter block: random selection needs an rng");
      sel = random_select(x.dim(0), height * width, k, *rng);
    } else {
      sel = top_k_select(imp, k);
    }
    auto masked = mul(x, imp);
    auto tok = add(gather(masked, sel), take_rows(pos_table, sel));
    auto enc = encoder.forward(tok);
    if (residual_scatter) enc = add(enc, gather(masked, sel));
    auto out = scatter(masked, enc, sel);
    last.indices = std::move(sel);
    last.importance = imp.detach();
    return out;
  }

  void collect(const std::string& p, std::vector<NamedParam<Real>>& out) {
    scorer.collect(p + ".scorer", out);
    out.push_back({p + ".pos", pos_table});
    encoder.collect(p + ".encoder", out);
  }
};

// ==================== pooled global attention ====================

// Cheap full-image attention for the deepest stage: average-pool to a
// coarse token grid, run the encoder over every coarse token, upsample the
// result and add it back onto the input map.
template <typename Real>
struct PooledAttentionBlock {
  size_t channels = 0, window = 1;
  Tensor<Real> pos_table;  // (pooled_h * pooled_w, C)
  TransformerEncoder<Real> encoder;

  PooledAttentionBlock() = default;
  PooledAttentionBlock(Rng& rng, size_t channels_, size_t height,
                       size_t width, size_t window_, size_t depth,
                       size_t heads, size_t mlp_ratio) {
    channels = channels_;
    window = window_;
    if (window == 0 || height % window != 0 || width % window != 0)
      throw ConfigError("pooled attention: window " + std::to_string(window) +
                        " does not tile " + std::to_string(height) + "x" +
                        std::to_string(width));
    if (depth > 0) {
      // a zero-depth block is pure pool/upsample and carries no positions
      pos_table = Tensor<Real>::zeros(
          {(height / window) * (width / window), channels});
      fill_trunc_normal(pos_table, rng, 0.02);
      pos_table.set_requires_grad(true);
    }
    encoder = TransformerEncoder<Real>(rng, depth, channels, heads, mlp_ratio);
  }

  Tensor<Real> forward(const Tensor<Real>& x) const {
    auto pooled = avg_pool2d(x, window);
    const size_t B = pooled.dim(0), C = pooled.dim(1), h = pooled.dim(2),
                 w = pooled.dim(3);
    if (encoder.layers.empty())
      return add(x, upsample_nearest(pooled, window));
    if (h * w != pos_table.dim(0))
      throw DimError("pooled attention: input " + shape_str(x.shape()) +
                     " does not match positional table of " +
                     std::to_string(pos_table.dim(0)) + " tokens");
    auto tok = permute(reshape(pooled, {B, C, h * w}), {0, 2, 1});
    auto enc = encoder.forward(add(tok, pos_table));
    auto map = reshape(permute(enc, {0, 2, 1}), {B, C, h, w});
    return add(x, upsample_nearest(map, window));
  }

  void collect(const std::string& p, std::vector<NamedParam<Real>>& out) {
    if (pos_table.size() > 0) out.push_back({p + ".pos", pos_table});
    encoder.collect(p + ".encoder", out);
  }
};

}  // namespace fvit
