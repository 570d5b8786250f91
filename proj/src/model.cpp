#include "lfdepth/model.hpp"

#include <algorithm>

#include "lfdepth/errors.hpp"

namespace lfd {

void NetworkConfig::validate() const {
  if (!use_rgb_stream && !use_focal_stream) throw ConfigError("network: at least one stream required");
  if (height < 16 || width < 16 || height % 16 != 0 || width % 16 != 0) {
    throw ConfigError("network: input size " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be positive multiples of 16");
  }
  if (slices < 2) throw ConfigError("network: slice count must be >= 2");
  if (stage_channels.size() != 5) throw ConfigError("network: stage_channels needs 5 entries");
  for (Index c : stage_channels) {
    if (c < 1) throw ConfigError("network: stage channels must be positive");
  }
  if (decoder_channels < 1) throw ConfigError("network: decoder_channels must be positive");
  if (use_cru) {
    if (!use_cru_md && !use_cru_mg) throw ConfigError("network: CRU enabled with both branches off");
    if (use_cru_md) {
      for (int k = 2; k < 5; ++k) {
        if (stage_channels[static_cast<std::size_t>(k)] % 2 != 0) {
          throw ConfigError("network: side-out channels must be even for the dilated CRU branch");
        }
      }
    }
  }
  if (plain_stack_layers < 1) throw ConfigError("network: plain_stack_layers must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("network: dropout must lie in [0,1)");
  if (w_l1 < 0.0 || w_grad < 0.0 || w_normal < 0.0 || aux_weight < 0.0) {
    throw ConfigError("network: loss weights must be non-negative");
  }
  if (cmfa_focal_slice_kernel < 1 || cmfa_focal_slice_kernel % 2 == 0) {
    throw ConfigError("network: cmfa_focal_slice_kernel must be odd and positive");
  }
  if (cru_reduced_channels < 0) throw ConfigError("network: cru_reduced_channels must be >= 0");
}

const std::vector<LadderEntry>& ablation_ladder() {
  static const std::vector<LadderEntry> ladder = {
      {"rgb", "rgb"},
      {"focal", "focal stack"},
      {"baseline", "Baseline"},
      {"cru", "+CRU"},
      {"cmfa", "+CMFA"},
      {"cru_md_cmfa", "+CRU(md)+CMFA"},
      {"cru_mg_cmfa", "+CRU(mg)+CMFA"},
      {"full", "+CRU+CMFA"},
  };
  return ladder;
}

const LadderEntry& ladder_entry(const std::string& id) {
  for (const auto& e : ablation_ladder()) {
    if (e.id == id) return e;
  }
  throw UsageError("unknown ablation configuration '" + id +
                   "' (expected rgb, focal, baseline, cru, cmfa, cru_md_cmfa, cru_mg_cmfa, full)");
}

NetworkConfig ladder_config(const std::string& id, NetworkConfig c) {
  ladder_entry(id);
  c.use_rgb_stream = id != "focal";
  c.use_focal_stream = id != "rgb";
  c.use_cru = id == "cru" || id == "full" || id == "cru_md_cmfa" || id == "cru_mg_cmfa";
  c.use_cru_md = id != "cru_mg_cmfa";
  c.use_cru_mg = id != "cru_md_cmfa";
  c.use_cmfa = id == "cmfa" || id == "full" || id == "cru_md_cmfa" || id == "cru_mg_cmfa";
  return c;
}

namespace {

Conv2Spec conv3x3(Index in, Index out) { return Conv2Spec{in, out, 3, 3}; }
Conv2Spec conv1x1(Index in, Index out) { return Conv2Spec{in, out, 1, 1}; }

Index stage_channels(const NetworkConfig& c, int stage) {
  return c.stage_channels[static_cast<std::size_t>(stage - 1)];
}

Index stage_in_channels(const NetworkConfig& c, int stage) {
  return stage == 1 ? 3 : stage_channels(c, stage - 1);
}

std::string stage_key(int stage) { return "s" + std::to_string(stage); }

}  // namespace

DepthNet::DepthNet(const NetworkConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const NetworkConfig& c = config_;
  std::vector<std::string> streams;
  if (c.use_rgb_stream) streams.emplace_back("rgb");
  if (c.use_focal_stream) streams.emplace_back("focal");

  for (const auto& stream : streams) {
    ModuleParams& bb = params_.sub("backbone").sub(stream);
    for (int s = 1; s <= 5; ++s) {
      ModuleParams& st = bb.sub(stage_key(s));
      init_conv2d(st.sub("c1"), conv3x3(stage_in_channels(c, s), stage_channels(c, s)), rng);
      init_conv2d(st.sub("c2"), conv3x3(stage_channels(c, s), stage_channels(c, s)), rng);
    }
  }

  for (const auto& stream : streams) {
    auto& crus = stream == "rgb" ? cru_rgb_ : cru_focal_;
    for (int s = 3; s <= 5; ++s) {
      ModuleParams& ctx = params_.sub("context").sub(stream).sub(stage_key(s));
      const Index C = stage_channels(c, s);
      if (c.use_cru) {
        CruConfig cc{.channels = C, .reduced_channels = c.cru_reduced_channels};
        cc.normalize_projection = c.cru_normalize_projection;
        cc.normalize_reprojection = c.cru_normalize_reprojection;
        cc.use_dilated = c.use_cru_md;
        cc.use_graph = c.use_cru_mg;
        auto cru = std::make_unique<Cru>(cc, ctx, rng);
        const Index f = Index{1} << (s - 1);
        cru->prepare(c.height / f, c.width / f);
        cru->freeze();
        crus.push_back(std::move(cru));
      } else {
        for (Index l = 1; l <= c.plain_stack_layers; ++l) {
          init_conv2d(ctx.sub("l" + std::to_string(l)), conv3x3(C, C), rng);
        }
      }
    }
  }

  for (int s = 3; s <= 5; ++s) {
    const Index C = stage_channels(c, s);
    if (c.use_rgb_stream && c.use_focal_stream && c.use_cmfa) {
      CmfaConfig mc{.channels = C, .focal_slice_kernel = c.cmfa_focal_slice_kernel, .dropout = c.dropout};
      cmfa_.push_back(std::make_unique<Cmfa>(mc, params_.sub("fusion").sub(stage_key(s)), rng));
    } else if (c.use_focal_stream) {
      const Index in = c.slices * C + (c.use_rgb_stream ? C : 0);
      init_conv2d(params_.sub("fusion").sub(stage_key(s)), conv3x3(in, C), rng);
    }
  }

  const Index D = c.decoder_channels;
  ModuleParams& dec = params_.sub("decoder");
  init_conv2d(dec.sub("p5"), conv3x3(stage_channels(c, 5), D), rng);
  init_conv2d(dec.sub("p4"), conv3x3(D + stage_channels(c, 4), D), rng);
  init_conv2d(dec.sub("p3"), conv3x3(D + stage_channels(c, 3), D), rng);
  init_conv2d(dec.sub("head"), conv1x1(D, 1), rng);
  if (c.deep_supervision) {
    init_conv2d(dec.sub("aux4"), conv1x1(D, 1), rng);
    init_conv2d(dec.sub("aux5"), conv1x1(D, 1), rng);
  }
}

std::array<Tensor, 3> DepthNet::backbone(const Tensor& x, const std::string& stream) const {
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) % 16 != 0 || x.dim(3) % 16 != 0) {
    throw ConfigError("backbone expects [S,3,H,W] with H, W divisible by 16, got " +
                      to_string(x.shape()));
  }
  const ModuleParams& bb = params_.child("backbone").child(stream);
  std::array<Tensor, 3> side;
  Tensor h = x;
  for (int s = 1; s <= 5; ++s) {
    if (s > 1) h = max_pool2d(h, 2);
    const ModuleParams& st = bb.child(stage_key(s));
    const Index in = stage_in_channels(config_, s), C = stage_channels(config_, s);
    h = relu(conv2d(h, conv3x3(in, C), st.child("c1")));
    h = relu(conv2d(h, conv3x3(C, C), st.child("c2")));
    if (s >= 3) side[static_cast<std::size_t>(s - 3)] = h;
  }
  return side;
}

Tensor DepthNet::context(const Tensor& x, const std::string& stream, int stage) const {
  if (config_.use_cru) {
    const auto& crus = stream == "rgb" ? cru_rgb_ : cru_focal_;
    return crus[static_cast<std::size_t>(stage - 3)]->forward(x);
  }
  const ModuleParams& ctx = params_.child("context").child(stream).child(stage_key(stage));
  const Index C = stage_channels(config_, stage);
  Tensor h = x;
  for (Index l = 1; l <= config_.plain_stack_layers; ++l) {
    h = relu(conv2d(h, conv3x3(C, C), ctx.child("l" + std::to_string(l))));
  }
  return h;
}

Tensor DepthNet::fuse(const Tensor& focal, const Tensor& rgb, int stage, Mode mode, Rng& rng) const {
  if (!config_.use_focal_stream) return rgb;
  if (config_.use_rgb_stream && config_.use_cmfa) {
    return cmfa_[static_cast<std::size_t>(stage - 3)]->forward(focal, rgb, mode, rng);
  }
  const Index S = focal.dim(0), C = focal.dim(1), h = focal.dim(2), w = focal.dim(3);
  Tensor flat = reshape(focal, {1, S * C, h, w});
  const Index in = config_.use_rgb_stream ? S * C + C : S * C;
  if (config_.use_rgb_stream) flat = concat({flat, rgb}, 1);
  return conv2d(flat, conv3x3(in, C), params_.child("fusion").child(stage_key(stage)));
}

Prediction DepthNet::forward(const SceneInput& input, Mode mode, Rng& rng) const {
  const NetworkConfig& c = config_;
  const Shape rgb_shape{1, 3, c.height, c.width};
  const Shape focal_shape{c.slices, 3, c.height, c.width};
  std::array<Tensor, 3> rgb_side, focal_side;
  if (c.use_rgb_stream) {
    if (!input.rgb.defined()) throw UsageError("model: RGB stream enabled but no RGB input given");
    if (input.rgb.shape() != rgb_shape) {
      throw ShapeError("model: rgb input " + to_string(input.rgb.shape()) + ", expected " +
                       to_string(rgb_shape));
    }
    rgb_side = backbone(add_scalar(input.rgb, -0.5), "rgb");
    for (int s = 3; s <= 5; ++s) {
      auto& f = rgb_side[static_cast<std::size_t>(s - 3)];
      f = context(f, "rgb", s);
    }
  }
  if (c.use_focal_stream) {
    if (!input.focal.defined()) throw UsageError("model: focal stream enabled but no focal stack given");
    if (input.focal.shape() != focal_shape) {
      throw ShapeError("model: focal input " + to_string(input.focal.shape()) + ", expected " +
                       to_string(focal_shape));
    }
    focal_side = backbone(add_scalar(input.focal, -0.5), "focal");
    for (int s = 3; s <= 5; ++s) {
      auto& f = focal_side[static_cast<std::size_t>(s - 3)];
      f = context(f, "focal", s);
    }
  }
  std::array<Tensor, 3> fused;
  for (int s = 3; s <= 5; ++s) {
    const auto k = static_cast<std::size_t>(s - 3);
    fused[k] = fuse(focal_side[k], rgb_side[k], s, mode, rng);
  }

  const ModuleParams& dec = params_.child("decoder");
  const Index D = c.decoder_channels;
  Tensor p5 = relu(conv2d(fused[2], conv3x3(stage_channels(c, 5), D), dec.child("p5")));
  Tensor p4 = relu(conv2d(concat({upsample_bilinear(p5, 2), fused[1]}, 1),
                          conv3x3(D + stage_channels(c, 4), D), dec.child("p4")));
  Tensor p3 = relu(conv2d(concat({upsample_bilinear(p4, 2), fused[0]}, 1),
                          conv3x3(D + stage_channels(c, 3), D), dec.child("p3")));
  Prediction out;
  out.depth = upsample_bilinear(sigmoid(conv2d(p3, conv1x1(D, 1), dec.child("head"))), 4);
  if (c.deep_supervision) {
    out.aux.push_back(upsample_bilinear(sigmoid(conv2d(p4, conv1x1(D, 1), dec.child("aux4"))), 8));
    out.aux.push_back(upsample_bilinear(sigmoid(conv2d(p5, conv1x1(D, 1), dec.child("aux5"))), 16));
  }
  return out;
}

LossTerms depth_loss(const Tensor& pred, const Tensor& gt, double w_l1, double w_grad,
                     double w_normal) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("loss: prediction " + to_string(pred.shape()) + " vs ground truth " +
                     to_string(gt.shape()));
  }
  if (pred.rank() != 4 || pred.dim(2) < 2 || pred.dim(3) < 2) {
    throw ShapeError("loss expects [1,1,H,W] with H, W >= 2, got " + to_string(pred.shape()));
  }
  const Index H = pred.dim(2), W = pred.dim(3);
  auto dx = [&](const Tensor& t) {
    return slice(sub(slice(t, 3, 1, W - 1), slice(t, 3, 0, W - 1)), 2, 0, H - 1);
  };
  auto dy = [&](const Tensor& t) {
    return slice(sub(slice(t, 2, 1, H - 1), slice(t, 2, 0, H - 1)), 3, 0, W - 1);
  };
  Tensor l1 = mean(abs(sub(pred, gt)));
  const Tensor gx = dx(gt), gy = dy(gt);
  Tensor px = dx(pred), py = dy(pred);
  Tensor grad = mean(add(abs(sub(px, gx)), abs(sub(py, gy))));
  Tensor dot = add_scalar(add(mul(px, gx), mul(py, gy)), 1.0);
  Tensor np2 = add_scalar(add(square(px), square(py)), 1.0);
  Tensor ng2 = add_scalar(add(square(gx), square(gy)), 1.0);
  Tensor normal = mean(sub(Tensor::scalar(1.0), div(dot, sqrt(mul(np2, ng2)))));

  LossTerms t;
  t.l1 = l1.item();
  t.grad = grad.item();
  t.normal = normal.item();
  t.total = add(add(mul_scalar(l1, w_l1), mul_scalar(grad, w_grad)), mul_scalar(normal, w_normal));
  return t;
}

LossTerms prediction_loss(const Prediction& pred, const Tensor& gt, const NetworkConfig& c) {
  LossTerms t = depth_loss(pred.depth, gt, c.w_l1, c.w_grad, c.w_normal);
  for (const Tensor& aux : pred.aux) {
    LossTerms a = depth_loss(aux, gt, c.w_l1, c.w_grad, c.w_normal);
    t.total = add(t.total, mul_scalar(a.total, c.aux_weight));
  }
  return t;
}

}  // namespace lfd
