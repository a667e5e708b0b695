#pragma once

// Analytic multiply-accumulate counts for the attention blocks and convs.
// Head count never appears: splitting C channels across h heads leaves
// N*N*C score work and N*C*C projection work unchanged.

#include <cstdint>
#include <cstddef>

namespace fvit {

inline uint64_t conv2d_macs(size_t in_ch, size_t out_ch, size_t kernel,
                            size_t out_h, size_t out_w, size_t groups = 1) {
  return uint64_t(out_ch) * (in_ch / groups) * kernel * kernel * out_h * out_w;
}

// q k^T over all token pairs
inline uint64_t attention_score_macs(size_t tokens, size_t channels) {
  return uint64_t(tokens) * tokens * channels;
}

// attention-weighted sum of values
inline uint64_t attention_value_macs(size_t tokens, size_t channels) {
  return uint64_t(tokens) * tokens * channels;
}

// q, k, v and output projections
inline uint64_t attention_proj_macs(size_t tokens, size_t channels) {
  return uint64_t(4) * tokens * channels * channels;
}

inline uint64_t mlp_macs(size_t tokens, size_t channels, size_t mlp_ratio) {
  return uint64_t(2) * tokens * channels * channels * mlp_ratio;
}

inline uint64_t encoder_layer_macs(size_t tokens, size_t channels,
                                   size_t mlp_ratio) {
  return attention_score_macs(tokens, channels) +
         attention_value_macs(tokens, channels) +
         attention_proj_macs(tokens, channels) +
         mlp_macs(tokens, channels, mlp_ratio);
}

inline uint64_t encoder_macs(size_t depth, size_t tokens, size_t channels,
                             size_t mlp_ratio) {
  return uint64_t(depth) * encoder_layer_macs(tokens, channels, mlp_ratio);
}

// scorer conv over the full map plus the encoder over K selected tokens
inline uint64_t filter_block_macs(size_t channels, size_t height, size_t width,
                                  size_t k, size_t scorer_kernel, size_t depth,
                                  size_t mlp_ratio) {
  return conv2d_macs(channels, 1, scorer_kernel, height, width) +
         encoder_macs(depth, k, channels, mlp_ratio);
}

// the same encoder applied to every position, no scorer
inline uint64_t dense_block_macs(size_t channels, size_t height, size_t width,
                                 size_t depth, size_t mlp_ratio) {
  return encoder_macs(depth, height * width, channels, mlp_ratio);
}

// window-averaged tokens through the encoder; the pool itself costs one
// scale per pooled value
inline uint64_t pooled_block_macs(size_t channels, size_t height, size_t width,
                                  size_t window, size_t depth,
                                  size_t mlp_ratio) {
  const uint64_t tokens = uint64_t(height / window) * (width / window);
  return tokens * channels + encoder_macs(depth, tokens, channels, mlp_ratio);
}

}  // namespace fvit
