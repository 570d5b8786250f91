#pragma once

#include <utility>

#include "lfdepth/nn.hpp"

namespace lfd {

struct CmfaConfig {
  Index channels = 16;
  /// Output channels of the final fusion conv; 0 keeps `channels`.
  Index out_channels = 0;
  /// Slice extent of the focal-to-rgb 3-D kernel. 1 makes enhancement slice-symmetric.
  Index focal_slice_kernel = 3;
  double dropout = 0.5;

  Index fused_channels() const { return out_channels > 0 ? out_channels : channels; }
  void validate() const;
};

/// Cross-modal fusion of a focal feature stack [S,C,H,W] with one RGB feature
/// [1,C,H,W]. Parameter entries:
///   focal_to_rgb (3-D conv), rgb_to_focal (3x3), post_rgb / post_focal (1x1),
///   gamma (fc C->1), lambda (fc 2C->1), fuse (3x3, 2C->C2).
class Cmfa {
 public:
  Cmfa(const CmfaConfig& config, ModuleParams& params, Rng& rng);

  const CmfaConfig& config() const { return config_; }

  /// Returns (focal'', rgb'').
  std::pair<Tensor, Tensor> enhance(const Tensor& focal, const Tensor& rgb) const;
  /// gamma_j for each slice of bundle [N,C,H,W]; shape [N].
  Tensor self_attention(const Tensor& bundle, Mode mode, Rng& rng) const;
  /// lambda_j from the pair (f_j, F_f1); shape [N].
  Tensor relation_attention(const Tensor& bundle, const Tensor& global, Mode mode, Rng& rng) const;
  Tensor forward(const Tensor& focal, const Tensor& rgb, Mode mode, Rng& rng) const;

 private:
  CmfaConfig config_;
  const ModuleParams* params_;
};

/// Weighted mean over the slice axis: sum_j w_j f_j / sum_j w_j, keeping a unit slice axis.
Tensor weighted_slice_mean(const Tensor& family, const Tensor& weights);
/// Convex combination of the slices of `bundle` weighted by gamma.
Tensor global_aggregate(const Tensor& bundle, const Tensor& gamma);
/// Channel concat of every slice with the broadcast global feature: [N,2C,H,W].
Tensor pair_with_global(const Tensor& bundle, const Tensor& global);
/// Convex combination of the pairs C(f_j, F_f1) weighted by gamma * lambda.
Tensor relation_aggregate(const Tensor& bundle, const Tensor& global, const Tensor& gamma,
                          const Tensor& lambda);

}  // namespace lfd
