#include "lfdepth/cru.hpp"

#include "lfdepth/errors.hpp"

namespace lfd {

Index node_count(Index width, Index height, int branch) {
  if (branch < 1 || branch > 3) throw UsageError("graph branch index must be 1, 2 or 3");
  if (width < 1 || height < 1) throw UsageError("spatial extents must be >= 1");
  const Index n = (width * height) / (Index{4} << (branch - 1));
  return n < 1 ? 1 : n;
}

std::string resolution_key(Index height, Index width) {
  return "r" + std::to_string(height) + "x" + std::to_string(width);
}

Index CruConfig::graph_channels() const {
  if (reduced_channels > 0) return reduced_channels;
  return channels / 4 < 1 ? 1 : channels / 4;
}

void CruConfig::validate() const {
  if (channels < 1) throw ConfigError("cru: channels must be >= 1");
  if (!use_dilated && !use_graph) throw ConfigError("cru: at least one context branch required");
  if (use_dilated) {
    if (channels % 2 != 0) throw ConfigError("cru: channel count must be even for the dilated pyramid");
    if (dilations.empty()) throw ConfigError("cru: dilation rates must not be empty");
    for (Index d : dilations) {
      if (d < 1) throw ConfigError("cru: dilation rates must be positive");
    }
  }
  if (graph_branches < 1 || graph_branches > 3) throw ConfigError("cru: 1..3 graph branches");
}

namespace {

Conv2Spec pointwise(Index in, Index out) { return Conv2Spec{in, out, 1, 1}; }

}  // namespace

Cru::Cru(const CruConfig& config, ModuleParams& params, Rng& rng)
    : config_(config), params_(&params), lazy_rng_(rng()) {
  config_.validate();
  const Index C = config_.channels;
  if (config_.use_graph) {
    const Index Ci = config_.graph_channels();
    ModuleParams& g = params.sub("graph");
    for (int i = 1; i <= config_.graph_branches; ++i) {
      ModuleParams& b = g.sub("b" + std::to_string(i));
      init_conv2d(b.sub("psi"), pointwise(C, Ci), rng);
      init_fc(b.sub("channel"), FcSpec{Ci, Ci}, rng);
      init_conv2d(b.sub("expand"), pointwise(Ci, C), rng);
    }
    if (config_.graph_tail_conv) init_conv2d(g.sub("tail"), Conv2Spec{C, C, 3, 3}, rng);
  }
  Index fused_in = 0;
  if (config_.use_dilated) {
    ModuleParams& d = params.sub("dilated");
    init_conv2d(d.sub("cross"), pointwise(C, C), rng);
    for (Index rate : config_.dilations) {
      init_conv2d(d.sub("d" + std::to_string(rate)), Conv2Spec{C, C / 2, 3, 3, 1, rate}, rng);
    }
    const Index pyramid = static_cast<Index>(config_.dilations.size()) * (C / 2);
    init_conv2d(d.sub("fuse"), pointwise(pyramid, C), rng);
    fused_in += C;
  }
  if (config_.use_graph) fused_in += C;
  init_conv2d(params.sub("fuse"), pointwise(fused_in, C), rng);
}

ModuleParams& Cru::branch_params(int branch) const {
  if (!config_.use_graph) throw UsageError("cru: graph branch disabled");
  if (branch < 1 || branch > config_.graph_branches) throw UsageError("cru: bad graph branch index");
  return params_->sub("graph").sub("b" + std::to_string(branch));
}

ModuleParams& Cru::resolution_params(int branch, Index height, Index width) const {
  ModuleParams& b = branch_params(branch);
  const std::string key = resolution_key(height, width);
  if (!b.has_sub(key)) {
    throw UsageError("cru: no graph projection built for " + key + "; call prepare() first");
  }
  return b.sub(key);
}

void Cru::prepare(Index height, Index width) {
  if (!config_.use_graph) return;
  const std::string key = resolution_key(height, width);
  for (int i = 1; i <= config_.graph_branches; ++i) {
    ModuleParams& b = branch_params(i);
    if (b.has_sub(key)) continue;
    if (frozen_) throw UsageError("cru: resolution " + key + " not prepared before freeze()");
    const Index N = node_count(width, height, i);
    ModuleParams& r = b.sub(key);
    init_conv2d(r.sub("phi"), pointwise(config_.channels, N), lazy_rng_);
    init_fc(r.sub("node"), FcSpec{N, N}, lazy_rng_);
  }
}

void Cru::check_input(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != config_.channels) {
    throw ShapeError("cru expects [S," + std::to_string(config_.channels) + ",H,W], got " +
                     to_string(x.shape()));
  }
}

std::pair<Tensor, Tensor> Cru::graph_project(const Tensor& x, int branch) {
  check_input(x);
  const Index S = x.dim(0), H = x.dim(2), W = x.dim(3);
  prepare(H, W);
  const ModuleParams& b = branch_params(branch);
  const ModuleParams& r = resolution_params(branch, H, W);
  const Index Ci = config_.graph_channels();
  const Index N = node_count(W, H, branch);
  Tensor proj = reshape(conv2d(x, pointwise(config_.channels, N), r.child("phi")), {S, N, H * W});
  Tensor reduced = reshape(conv2d(x, pointwise(config_.channels, Ci), b.child("psi")), {S, Ci, H * W});
  Tensor v = matmul(proj, transpose_last(reduced));
  if (config_.normalize_projection) v = mul_scalar(v, 1.0 / static_cast<double>(H * W));
  return {v, proj};
}

Tensor Cru::graph_reason(const Tensor& v, int branch, Index height, Index width) const {
  const ModuleParams& b = branch_params(branch);
  const ModuleParams& node = resolution_params(branch, height, width).child("node");
  const Index N = node.get("weight").dim(0);
  if (v.rank() != 3 || v.dim(1) != N || v.dim(2) != config_.graph_channels()) {
    throw ShapeError("graph_reason: node features " + to_string(v.shape()) + " do not match branch");
  }
  // Node-axis kernel-1 convolution: (A V)[n', c] = sum_n A[n', n] V[n, c] + a[n'].
  Tensor av = add(matmul(node.get("weight"), v), reshape(node.get("bias"), {N, 1}));
  // Channel-axis kernel-1 convolution on (V - A V).
  return fc(sub(v, av), b.child("channel"));
}

Tensor Cru::graph_reproject(const Tensor& m, const Tensor& b, int branch, Index height,
                            Index width) const {
  if (m.rank() != 3 || b.rank() != 3 || m.dim(1) != b.dim(1) || m.dim(0) != b.dim(0)) {
    throw ShapeError("graph_reproject: node extents differ " + to_string(m.shape()) + " vs " +
                     to_string(b.shape()));
  }
  if (b.dim(2) != height * width) throw ShapeError("graph_reproject: pixel extent mismatch");
  const Index S = m.dim(0), Ci = m.dim(2);
  Tensor pix = matmul(transpose_last(b), m);  // [S, HW, Ci]
  if (config_.normalize_reprojection) pix = mul_scalar(pix, 1.0 / static_cast<double>(m.dim(1)));
  Tensor y = reshape(transpose_last(pix), {S, Ci, height, width});
  return conv2d(y, pointwise(Ci, config_.channels), branch_params(branch).child("expand"));
}

Tensor Cru::multi_graph(const Tensor& x) {
  check_input(x);
  if (!config_.use_graph) throw UsageError("cru: graph branch disabled");
  const Index H = x.dim(2), W = x.dim(3);
  Tensor acc = x;
  for (int i = 1; i <= config_.graph_branches; ++i) {
    auto [v, b] = graph_project(x, i);
    Tensor m = graph_reason(v, i, H, W);
    acc = add(acc, graph_reproject(m, b, i, H, W));
  }
  if (!config_.graph_tail_conv) return acc;
  const Index C = config_.channels;
  return conv2d(acc, Conv2Spec{C, C, 3, 3}, params_->child("graph").child("tail"));
}

Tensor Cru::multi_dilated(const Tensor& x) const {
  check_input(x);
  if (!config_.use_dilated) throw UsageError("cru: dilated branch disabled");
  const Index C = config_.channels;
  const ModuleParams& d = params_->child("dilated");
  Tensor cross = relu(conv2d(x, pointwise(C, C), d.child("cross")));
  std::vector<Tensor> pyramid;
  for (Index rate : config_.dilations) {
    pyramid.push_back(relu(conv2d(cross, Conv2Spec{C, C / 2, 3, 3, 1, rate},
                                  d.child("d" + std::to_string(rate)))));
  }
  const Index width = static_cast<Index>(pyramid.size()) * (C / 2);
  return conv2d(concat(pyramid, 1), pointwise(width, C), d.child("fuse"));
}

Tensor Cru::forward(const Tensor& x) {
  check_input(x);
  std::vector<Tensor> branches;
  if (config_.use_dilated) branches.push_back(multi_dilated(x));
  if (config_.use_graph) branches.push_back(multi_graph(x));
  const Index C = config_.channels;
  Tensor joined = branches.size() == 1 ? branches.front() : concat(branches, 1);
  const Index width = static_cast<Index>(branches.size()) * C;
  return add(x, conv2d(joined, pointwise(width, C), params_->child("fuse")));
}

}  // namespace lfd
