#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lfdepth/nn.hpp"

namespace lfd {

/// Number of graph nodes for branch `branch` (1-based) at spatial size W x H:
/// floor(W*H / (4 * 2^(branch-1))), clamped to at least 1.
Index node_count(Index width, Index height, int branch);

struct CruConfig {
  Index channels = 16;
  /// Reduced channels per graph branch; 0 selects channels / 4 (at least 1).
  Index reduced_channels = 0;
  std::vector<Index> dilations = {3, 5, 7};
  int graph_branches = 3;
  /// 3x3 convolution applied after X + sum(Y_i).
  bool graph_tail_conv = true;
  /// Scales the projected node features by 1/(H*W).
  bool normalize_projection = true;
  /// Scales the reprojected pixel features by 1/N_i.
  bool normalize_reprojection = true;
  bool use_dilated = true;
  bool use_graph = true;

  Index graph_channels() const;
  void validate() const;
};

/// Context reasoning block: identity skip plus a fused pair of context branches,
/// a dilated-convolution pyramid and a set of projected graph convolutions.
///
/// Parameters live in the ModuleParams passed at construction:
///   graph.b{i}.psi / expand / channel          shared across resolutions
///   graph.b{i}.r{H}x{W}.phi / node              built per spatial size
///   graph.tail, dilated.cross, dilated.d{rate}, dilated.fuse, fuse
/// All tensors are [S,C,H,W] with the slice axis treated as a batch.
class Cru {
 public:
  Cru(const CruConfig& config, ModuleParams& params, Rng& rng);

  const CruConfig& config() const { return config_; }
  ModuleParams& params() { return *params_; }

  /// Builds the resolution-dependent projections for H x W if absent.
  void prepare(Index height, Index width);
  /// After freeze(), an unseen resolution is a usage error instead of a build.
  void freeze() { frozen_ = true; }

  /// V_i = phi_i(X) psi_i(X): returns (V [S,N,C_i], B [S,N,H*W]).
  std::pair<Tensor, Tensor> graph_project(const Tensor& x, int branch);
  /// M_i = (V - A V) W_i, with A and W_i as kernel-1 convolutions.
  Tensor graph_reason(const Tensor& v, int branch, Index height, Index width) const;
  /// Y_i = expand(B^T M) as [S,C,H,W].
  Tensor graph_reproject(const Tensor& m, const Tensor& b, int branch, Index height,
                         Index width) const;
  Tensor multi_graph(const Tensor& x);
  Tensor multi_dilated(const Tensor& x) const;
  Tensor forward(const Tensor& x);

 private:
  ModuleParams& branch_params(int branch) const;
  ModuleParams& resolution_params(int branch, Index height, Index width) const;
  void check_input(const Tensor& x) const;

  CruConfig config_;
  ModuleParams* params_;
  Rng lazy_rng_;
  bool frozen_ = false;
};

std::string resolution_key(Index height, Index width);

}  // namespace lfd
