#pragma once

#include <array>
#include <string>
#include <vector>

#include "odg/autodiff.hpp"
#include "odg/params.hpp"

namespace odg {

// Small layer helpers shared by the detector and the frozen style encoder.

inline void init_conv(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k, Rng& rng) {
  ps.create_he_normal(name + ".w", {out_ch, in_ch, k, k}, in_ch * k * k, rng);
  ps.create(name + ".b", {out_ch});
}

inline void init_linear(ParamStore& ps, const std::string& name, int in_dim, int out_dim, Rng& rng) {
  ps.create_he_normal(name + ".w", {in_dim, out_dim}, in_dim, rng);
  ps.create(name + ".b", {out_dim});
}

/// Near-zero init for prediction heads: every anchor/RoI starts from a flat
/// score map and zero deltas instead of whatever a full-variance random
/// projection happens to prefer.
inline void init_conv_head(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int k,
                           Rng& rng) {
  Tensor& w = ps.create(name + ".w", {out_ch, in_ch, k, k});
  for (double& v : w.data) v = rng.normal(0.0, 0.01);
  ps.create(name + ".b", {out_ch});
}

inline void init_linear_head(ParamStore& ps, const std::string& name, int in_dim, int out_dim,
                             Rng& rng) {
  Tensor& w = ps.create(name + ".w", {in_dim, out_dim});
  for (double& v : w.data) v = rng.normal(0.0, 0.01);
  ps.create(name + ".b", {out_dim});
}

inline Var conv_layer(Tape& t, ParamStore& ps, const std::string& name, Var x, int stride, int pad) {
  return conv2d(x, t.param(ps, name + ".w"), t.param(ps, name + ".b"), stride, pad);
}

inline Var linear_layer(Tape& t, ParamStore& ps, const std::string& name, Var x) {
  return add_rowvec(matmul(x, t.param(ps, name + ".w")), t.param(ps, name + ".b"));
}

/// Four 3x3 conv blocks at strides 1,2,2,1 -> feature maps at strides 1,2,4,4
/// relative to the input image.
inline void init_backbone(ParamStore& ps, const std::string& prefix, int in_ch,
                          const std::vector<int>& widths, Rng& rng) {
  if (widths.size() != 4) throw ConfigError("backbone expects 4 block widths");
  int c = in_ch;
  for (int i = 0; i < 4; ++i) {
    init_conv(ps, prefix + ".block" + std::to_string(i + 1), c, widths[static_cast<std::size_t>(i)],
              3, rng);
    c = widths[static_cast<std::size_t>(i)];
  }
}

inline std::array<Var, 4> backbone_forward(Tape& t, ParamStore& ps, const std::string& prefix,
                                           Var image) {
  static constexpr int kStride[4] = {1, 2, 2, 1};
  std::array<Var, 4> blocks;
  Var x = image;
  for (int i = 0; i < 4; ++i) {
    x = relu(conv_layer(t, ps, prefix + ".block" + std::to_string(i + 1), x, kStride[i], 1));
    blocks[static_cast<std::size_t>(i)] = x;
  }
  return blocks;
}

}  // namespace odg
