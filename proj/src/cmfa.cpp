#include "lfdepth/cmfa.hpp"

#include "lfdepth/errors.hpp"

namespace lfd {

void CmfaConfig::validate() const {
  if (channels < 1) throw ConfigError("cmfa: channels must be >= 1");
  if (out_channels < 0) throw ConfigError("cmfa: out_channels must be >= 0");
  if (focal_slice_kernel < 1 || focal_slice_kernel % 2 == 0) {
    throw ConfigError("cmfa: focal slice kernel must be odd and positive");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("cmfa: dropout must lie in [0,1)");
}

namespace {

Conv3Spec focal_spec(const CmfaConfig& c) {
  return Conv3Spec{c.channels, c.channels, c.focal_slice_kernel, 3, 3};
}
Conv2Spec rgb_spec(const CmfaConfig& c) { return Conv2Spec{c.channels, c.channels, 3, 3}; }
Conv2Spec point_spec(const CmfaConfig& c) { return Conv2Spec{c.channels, c.channels, 1, 1}; }
Conv2Spec fuse_spec(const CmfaConfig& c) {
  return Conv2Spec{2 * c.channels, c.fused_channels(), 3, 3};
}

void check_bundle(const Tensor& bundle, Index channels, const char* what) {
  if (bundle.rank() != 4 || bundle.dim(1) != channels) {
    throw ShapeError(std::string(what) + ": expected [N," + std::to_string(channels) +
                     ",H,W], got " + to_string(bundle.shape()));
  }
}

Tensor as_weights(const Tensor& w, Index n) {
  if (w.rank() != 1 || w.dim(0) != n) {
    throw ShapeError("attention weights " + to_string(w.shape()) + " do not match " +
                     std::to_string(n) + " slices");
  }
  return reshape(w, {n, 1, 1, 1});
}

}  // namespace

Cmfa::Cmfa(const CmfaConfig& config, ModuleParams& params, Rng& rng)
    : config_(config), params_(&params) {
  config_.validate();
  const Index C = config_.channels;
  init_conv3d(params.sub("focal_to_rgb"), focal_spec(config_), rng);
  init_conv2d(params.sub("rgb_to_focal"), rgb_spec(config_), rng);
  init_conv2d(params.sub("post_rgb"), point_spec(config_), rng);
  init_conv2d(params.sub("post_focal"), point_spec(config_), rng);
  init_fc(params.sub("gamma"), FcSpec{C, 1}, rng);
  init_fc(params.sub("lambda"), FcSpec{2 * C, 1}, rng);
  init_conv2d(params.sub("fuse"), fuse_spec(config_), rng);
}

std::pair<Tensor, Tensor> Cmfa::enhance(const Tensor& focal, const Tensor& rgb) const {
  const Index C = config_.channels;
  check_bundle(focal, C, "cmfa focal");
  check_bundle(rgb, C, "cmfa rgb");
  if (rgb.dim(0) != 1 || rgb.dim(2) != focal.dim(2) || rgb.dim(3) != focal.dim(3)) {
    throw ShapeError("cmfa: focal " + to_string(focal.shape()) + " and rgb " +
                     to_string(rgb.shape()) + " are not paired");
  }
  const Index S = focal.dim(0), H = focal.dim(2), W = focal.dim(3);
  const ModuleParams& p = *params_;

  Tensor volume = reshape(permute(focal, {1, 0, 2, 3}), {1, C, S, H, W});
  Tensor to_rgb = mean(conv3d(volume, focal_spec(config_), p.child("focal_to_rgb")), {2});
  Tensor rgb2 = conv2d(add(rgb, to_rgb), point_spec(config_), p.child("post_rgb"));

  Tensor to_focal = conv2d(rgb, rgb_spec(config_), p.child("rgb_to_focal"));
  Tensor focal2 = conv2d(add(focal, to_focal), point_spec(config_), p.child("post_focal"));
  return {focal2, rgb2};
}

Tensor Cmfa::self_attention(const Tensor& bundle, Mode mode, Rng& rng) const {
  check_bundle(bundle, config_.channels, "self_attention");
  const Index N = bundle.dim(0);
  Tensor pooled = dropout(global_avg_pool(bundle), config_.dropout, mode, rng);
  return reshape(sigmoid(fc(pooled, params_->child("gamma"))), {N});
}

Tensor Cmfa::relation_attention(const Tensor& bundle, const Tensor& global, Mode mode,
                                Rng& rng) const {
  const Index N = bundle.dim(0);
  Tensor pairs = pair_with_global(bundle, global);
  if (pairs.dim(1) != 2 * config_.channels) {
    throw ShapeError("relation_attention: pair extent does not match the lambda head");
  }
  Tensor pooled = dropout(global_avg_pool(pairs), config_.dropout, mode, rng);
  return reshape(sigmoid(fc(pooled, params_->child("lambda"))), {N});
}

Tensor Cmfa::forward(const Tensor& focal, const Tensor& rgb, Mode mode, Rng& rng) const {
  auto [focal2, rgb2] = enhance(focal, rgb);
  Tensor bundle = concat({focal2, rgb2}, 0);
  Tensor gamma = self_attention(bundle, mode, rng);
  Tensor global = global_aggregate(bundle, gamma);
  Tensor lambda = relation_attention(bundle, global, mode, rng);
  Tensor refined = relation_aggregate(bundle, global, gamma, lambda);
  return conv2d(refined, fuse_spec(config_), params_->child("fuse"));
}

Tensor weighted_slice_mean(const Tensor& family, const Tensor& weights) {
  if (family.rank() != 4) throw ShapeError("weighted_slice_mean expects [N,C,H,W]");
  Tensor w = as_weights(weights, family.dim(0));
  return div(sum(mul(family, w), {0}, true), sum(weights));
}

Tensor global_aggregate(const Tensor& bundle, const Tensor& gamma) {
  if (bundle.rank() != 4 || bundle.dim(0) < 2) {
    throw ShapeError("global_aggregate: bundle needs at least 2 slices, got " +
                     to_string(bundle.shape()));
  }
  return weighted_slice_mean(bundle, gamma);
}

Tensor pair_with_global(const Tensor& bundle, const Tensor& global) {
  if (bundle.rank() != 4 || global.rank() != 4 || global.dim(0) != 1 ||
      global.dim(1) != bundle.dim(1) || global.dim(2) != bundle.dim(2) ||
      global.dim(3) != bundle.dim(3)) {
    throw ShapeError("pair_with_global: " + to_string(bundle.shape()) + " vs " +
                     to_string(global.shape()));
  }
  Shape s = bundle.shape();
  return concat({bundle, expand(global, s)}, 1);
}

Tensor relation_aggregate(const Tensor& bundle, const Tensor& global, const Tensor& gamma,
                          const Tensor& lambda) {
  return weighted_slice_mean(pair_with_global(bundle, global), mul(gamma, lambda));
}

}  // namespace lfd
