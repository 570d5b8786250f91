#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "lfdepth/cmfa.hpp"
#include "lfdepth/cru.hpp"

namespace lfd {

struct NetworkConfig {
  Index height = 64;
  Index width = 64;
  Index slices = 12;
  /// Output channels of the five backbone stages; the last three are side-outs.
  std::vector<Index> stage_channels = {16, 32, 64, 64, 64};
  Index decoder_channels = 64;

  bool use_rgb_stream = true;
  bool use_focal_stream = true;
  bool use_cru = true;
  bool use_cru_md = true;
  bool use_cru_mg = true;
  bool use_cmfa = true;

  Index cru_reduced_channels = 0;
  bool cru_normalize_projection = true;
  bool cru_normalize_reprojection = true;
  Index cmfa_focal_slice_kernel = 3;
  /// Depth of the plain conv stack that stands in for a disabled CRU.
  Index plain_stack_layers = 6;
  double dropout = 0.5;

  double w_l1 = 1.0;
  double w_grad = 1.0;
  double w_normal = 1.0;
  bool deep_supervision = false;
  double aux_weight = 0.5;

  void validate() const;
};

/// Ablation ladder entry: identifier, table label and the switches it sets.
struct LadderEntry {
  std::string id;
  std::string label;
};

const std::vector<LadderEntry>& ablation_ladder();
/// Applies the ladder switches for `id` on top of `base`. Unknown ids are usage errors.
NetworkConfig ladder_config(const std::string& id, NetworkConfig base);
const LadderEntry& ladder_entry(const std::string& id);

struct SceneInput {
  Tensor rgb;    // [1,3,H,W]
  Tensor focal;  // [S,3,H,W]
};

struct Prediction {
  Tensor depth;             // [1,1,H,W], in (0,1)
  std::vector<Tensor> aux;  // deep-supervision maps at full size, if enabled
};

class DepthNet {
 public:
  /// Builds every parameter, including the resolution-dependent CRU graphs for
  /// the configured input size, drawing from `rng` in a fixed order.
  DepthNet(const NetworkConfig& config, Rng& rng);
  DepthNet(const DepthNet&) = delete;
  DepthNet& operator=(const DepthNet&) = delete;

  const NetworkConfig& config() const { return config_; }
  ModuleParams& params() { return params_; }
  const ModuleParams& params() const { return params_; }

  /// Stage-3/4/5 features of x [S,3,H,W] through the named backbone.
  std::array<Tensor, 3> backbone(const Tensor& x, const std::string& stream) const;
  Prediction forward(const SceneInput& input, Mode mode, Rng& rng) const;

 private:
  Tensor context(const Tensor& x, const std::string& stream, int stage) const;
  Tensor fuse(const Tensor& focal, const Tensor& rgb, int stage, Mode mode, Rng& rng) const;

  NetworkConfig config_;
  ModuleParams params_;
  // Indexed [stage - 3].
  std::vector<std::unique_ptr<Cru>> cru_rgb_;
  std::vector<std::unique_ptr<Cru>> cru_focal_;
  std::vector<std::unique_ptr<Cmfa>> cmfa_;
};

struct LossTerms {
  Tensor total;
  double l1 = 0.0;
  double grad = 0.0;
  double normal = 0.0;
};

/// w1 mean|d-g| + w2 mean(|dx d - dx g| + |dy d - dy g|) + w3 mean(1 - cos(n_d, n_g)).
/// Forward differences; the last row and column are dropped from the gradient
/// and normal terms. n = (-dx, -dy, 1) / |(-dx, -dy, 1)|.
LossTerms depth_loss(const Tensor& pred, const Tensor& gt, double w_l1, double w_grad,
                     double w_normal);
/// Loss of a prediction under the config's weights, including auxiliary maps.
LossTerms prediction_loss(const Prediction& pred, const Tensor& gt, const NetworkConfig& config);

}  // namespace lfd
