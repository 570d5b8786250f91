#pragma once

#include <random>

#include "lfdepth/ops.hpp"
#include "lfdepth/params.hpp"

namespace lfd {

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) from the top 53 bits of one draw.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

enum class Padding { Same, Valid };
enum class Mode { Train, Eval };

struct Conv2Spec {
  Index in_channels = 1;
  Index out_channels = 1;
  Index kh = 3;
  Index kw = 3;
  Index stride = 1;
  Index dilation = 1;
  Padding padding = Padding::Same;

  /// Throws ConfigError on even kernels with "same" padding or dilation < 1.
  void validate() const;
};

/// 3-D convolution over (slice, H, W). Padding is chosen separately for the
/// slice axis and the two spatial axes.
struct Conv3Spec {
  Index in_channels = 1;
  Index out_channels = 1;
  Index kd = 3;
  Index kh = 3;
  Index kw = 3;
  Padding slice_padding = Padding::Same;
  Padding spatial_padding = Padding::Same;

  void validate() const;
};

struct FcSpec {
  Index in_features = 1;
  Index out_features = 1;
};

/// Kaiming fan-in normal weights and zero biases under entries "weight"/"bias".
void init_conv2d(ModuleParams& p, const Conv2Spec& spec, Rng& rng);
void init_conv3d(ModuleParams& p, const Conv3Spec& spec, Rng& rng);
void init_fc(ModuleParams& p, const FcSpec& spec, Rng& rng);

/// Cross-correlation of x [S,C,H,W] with p.weight [C',C,kh,kw] plus p.bias [C'],
/// applied independently to each slice.
Tensor conv2d(const Tensor& x, const Conv2Spec& spec, const ModuleParams& p);
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Index stride,
              Index dilation, Padding padding);

/// Cross-correlation of x [B,C,S,H,W] with p.weight [C',C,kd,kh,kw] plus bias.
Tensor conv3d(const Tensor& x, const Conv3Spec& spec, const ModuleParams& p);

/// Affine map over the last axis: x W^T + b, W [L,K].
Tensor fc(const Tensor& x, const ModuleParams& p);

/// Mean over H and W: [S,C,H,W] -> [S,C].
Tensor global_avg_pool(const Tensor& x);

/// Non-overlapping max pooling with window = stride = `size`.
Tensor max_pool2d(const Tensor& x, Index size);

/// Inverted dropout. Eval mode (or rate 0) returns `x` itself.
Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng);

/// Bilinear upsampling by an integer factor, half-pixel centres (align_corners=false).
Tensor upsample_bilinear(const Tensor& x, Index factor);

}  // namespace lfd
