#include "lfdepth/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "lfdepth/errors.hpp"

namespace lfd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

struct Axis {
  Index in = 1, kernel = 1, stride = 1, dilation = 1, pad = 0, out = 1;
};

Axis make_axis(Index in, Index kernel, Index stride, Index dilation, Padding padding) {
  Axis a{in, kernel, stride, dilation, 0, 0};
  if (padding == Padding::Same) a.pad = dilation * (kernel - 1) / 2;
  const Index span = dilation * (kernel - 1) + 1;
  if (in + 2 * a.pad < span) {
    throw ShapeError("extent " + std::to_string(in) + " smaller than kernel span " +
                     std::to_string(span));
  }
  a.out = (in + 2 * a.pad - span) / stride + 1;
  return a;
}

/// Three spatial axes (depth, height, width); 2-D convolution uses depth = 1.
struct Geometry {
  Axis d, h, w;
  Index rows(Index channels) const { return channels * d.kernel * h.kernel * w.kernel; }
  Index cols() const { return d.out * h.out * w.out; }
  Index in_plane() const { return d.in * h.in * w.in; }
  bool pointwise() const {
    auto trivial = [](const Axis& a) { return a.kernel == 1 && a.stride == 1 && a.pad == 0; };
    return trivial(d) && trivial(h) && trivial(w);
  }
};

/// Unrolls one batch item x [C, D, H, W] into col [C*kd*kh*kw, Do*Ho*Wo].
void im2col(const double* x, Index channels, const Geometry& g, double* col) {
  const Index P = g.cols();
  Index row = 0;
  for (Index c = 0; c < channels; ++c) {
    const double* xc = x + c * g.in_plane();
    for (Index a = 0; a < g.d.kernel; ++a) {
      for (Index b = 0; b < g.h.kernel; ++b) {
        for (Index e = 0; e < g.w.kernel; ++e, ++row) {
          double* dst = col + row * P;
          for (Index od = 0; od < g.d.out; ++od) {
            const Index id = od * g.d.stride - g.d.pad + a * g.d.dilation;
            for (Index oh = 0; oh < g.h.out; ++oh) {
              const Index ih = oh * g.h.stride - g.h.pad + b * g.h.dilation;
              double* out = dst + (od * g.h.out + oh) * g.w.out;
              if (id < 0 || id >= g.d.in || ih < 0 || ih >= g.h.in) {
                std::fill_n(out, g.w.out, 0.0);
                continue;
              }
              const double* src = xc + (id * g.h.in + ih) * g.w.in;
              for (Index ow = 0; ow < g.w.out; ++ow) {
                const Index iw = ow * g.w.stride - g.w.pad + e * g.w.dilation;
                out[ow] = (iw >= 0 && iw < g.w.in) ? src[iw] : 0.0;
              }
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters col back into gx [C, D, H, W].
void col2im(const double* col, Index channels, const Geometry& g, double* gx) {
  const Index P = g.cols();
  Index row = 0;
  for (Index c = 0; c < channels; ++c) {
    double* xc = gx + c * g.in_plane();
    for (Index a = 0; a < g.d.kernel; ++a) {
      for (Index b = 0; b < g.h.kernel; ++b) {
        for (Index e = 0; e < g.w.kernel; ++e, ++row) {
          const double* src_row = col + row * P;
          for (Index od = 0; od < g.d.out; ++od) {
            const Index id = od * g.d.stride - g.d.pad + a * g.d.dilation;
            if (id < 0 || id >= g.d.in) continue;
            for (Index oh = 0; oh < g.h.out; ++oh) {
              const Index ih = oh * g.h.stride - g.h.pad + b * g.h.dilation;
              if (ih < 0 || ih >= g.h.in) continue;
              const double* in = src_row + (od * g.h.out + oh) * g.w.out;
              double* dst = xc + (id * g.h.in + ih) * g.w.in;
              for (Index ow = 0; ow < g.w.out; ++ow) {
                const Index iw = ow * g.w.stride - g.w.pad + e * g.w.dilation;
                if (iw >= 0 && iw < g.w.in) dst[iw] += in[ow];
              }
            }
          }
        }
      }
    }
  }
}

/// x [B, C, D, H, W], weight [C', C*kd*kh*kw] (any shape of that size), bias [C'].
Tensor conv_core(const Tensor& x, const Tensor& weight, const Tensor& bias, const Geometry& g,
                 Shape out_shape) {
  const Index B = x.dim(0);
  const Index C = x.dim(1);
  const Index Co = weight.dim(0);
  const Index R = g.rows(C);
  const Index P = g.cols();
  if (weight.numel() != Co * R) throw ShapeError("conv weight size mismatch");
  if (bias.numel() != Co) throw ShapeError("conv bias size mismatch");

  const double* xd = x.data().data();
  ConstMatMap Wm(weight.data().data(), Co, R);
  Eigen::Map<const Eigen::VectorXd> bv(bias.data().data(), Co);
  Buffer out(static_cast<std::size_t>(B * Co * P));
  Buffer col;
  if (!g.pointwise()) col.resize(static_cast<std::size_t>(R * P));
  const Index x_item = C * g.in_plane();
  for (Index b = 0; b < B; ++b) {
    const double* cb = xd + b * x_item;
    if (!g.pointwise()) {
      im2col(cb, C, g, col.data());
      cb = col.data();
    }
    MatMap O(out.data() + b * Co * P, Co, P);
    O.noalias() = Wm * ConstMatMap(cb, R, P);
    O.colwise() += bv;
  }

  auto xi = x.impl();
  auto wi = weight.impl();
  return make_result(
      std::move(out_shape), std::move(out), {x, weight, bias},
      [xi, wi, g, B, C, Co, R, P, x_item](std::span<const double> grad,
                                          std::span<Buffer*> gin) {
        ConstMatMap Wm(wi->data.data(), Co, R);
        Buffer col;
        Buffer gcol;
        const bool pw = g.pointwise();
        if (!pw) col.resize(static_cast<std::size_t>(R * P));
        if (!pw && gin[0]) gcol.resize(static_cast<std::size_t>(R * P));
        for (Index b = 0; b < B; ++b) {
          ConstMatMap G(grad.data() + b * Co * P, Co, P);
          if (gin[2]) VecMap(gin[2]->data(), Co) += G.rowwise().sum();
          if (gin[1]) {
            const double* cb = xi->data.data() + b * x_item;
            if (!pw) {
              im2col(cb, C, g, col.data());
              cb = col.data();
            }
            MatMap(gin[1]->data(), Co, R).noalias() += G * ConstMatMap(cb, R, P).transpose();
          }
          if (gin[0]) {
            if (pw) {
              MatMap(gin[0]->data() + b * x_item, R, P).noalias() += Wm.transpose() * G;
            } else {
              MatMap(gcol.data(), R, P).noalias() = Wm.transpose() * G;
              col2im(gcol.data(), C, g, gin[0]->data() + b * x_item);
            }
          }
        }
      });
}

void check_same_odd(Index k, Padding p, const char* what) {
  if (p == Padding::Same && k % 2 == 0) {
    throw ConfigError(std::string(what) + ": 'same' padding needs an odd kernel extent");
  }
}

Tensor kaiming(const Shape& shape, Index fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Buffer v(static_cast<std::size_t>(numel(shape)));
  for (double& x : v) x = dist(rng);
  return Tensor(shape, std::move(v));
}

}  // namespace

void Conv2Spec::validate() const {
  if (in_channels < 1 || out_channels < 1) throw ConfigError("conv2d: channels must be >= 1");
  if (kh < 1 || kw < 1) throw ConfigError("conv2d: kernel extents must be >= 1");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (dilation < 1) throw ConfigError("conv2d: dilation must be >= 1");
  check_same_odd(kh, padding, "conv2d");
  check_same_odd(kw, padding, "conv2d");
}

void Conv3Spec::validate() const {
  if (in_channels < 1 || out_channels < 1) throw ConfigError("conv3d: channels must be >= 1");
  if (kd < 1 || kh < 1 || kw < 1) throw ConfigError("conv3d: kernel extents must be >= 1");
  check_same_odd(kd, slice_padding, "conv3d");
  check_same_odd(kh, spatial_padding, "conv3d");
  check_same_odd(kw, spatial_padding, "conv3d");
}

void init_conv2d(ModuleParams& p, const Conv2Spec& spec, Rng& rng) {
  spec.validate();
  p.add("weight", kaiming({spec.out_channels, spec.in_channels, spec.kh, spec.kw},
                          spec.in_channels * spec.kh * spec.kw, rng));
  p.add("bias", Tensor::zeros({spec.out_channels}));
}

void init_conv3d(ModuleParams& p, const Conv3Spec& spec, Rng& rng) {
  spec.validate();
  p.add("weight", kaiming({spec.out_channels, spec.in_channels, spec.kd, spec.kh, spec.kw},
                          spec.in_channels * spec.kd * spec.kh * spec.kw, rng));
  p.add("bias", Tensor::zeros({spec.out_channels}));
}

void init_fc(ModuleParams& p, const FcSpec& spec, Rng& rng) {
  if (spec.in_features < 1 || spec.out_features < 1) throw ConfigError("fc: extents must be >= 1");
  p.add("weight", kaiming({spec.out_features, spec.in_features}, spec.in_features, rng));
  p.add("bias", Tensor::zeros({spec.out_features}));
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Index stride,
              Index dilation, Padding padding) {
  if (x.rank() != 4) throw ShapeError("conv2d expects [S,C,H,W], got " + to_string(x.shape()));
  if (weight.rank() != 4) throw ShapeError("conv2d weight must be [C',C,kh,kw]");
  if (weight.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(x.dim(1)) +
                     ", kernel expects " + std::to_string(weight.dim(1)));
  }
  check_same_odd(weight.dim(2), padding, "conv2d");
  check_same_odd(weight.dim(3), padding, "conv2d");
  Geometry g{make_axis(1, 1, 1, 1, Padding::Valid),
             make_axis(x.dim(2), weight.dim(2), stride, dilation, padding),
             make_axis(x.dim(3), weight.dim(3), stride, dilation, padding)};
  return conv_core(x, weight, bias, g, {x.dim(0), weight.dim(0), g.h.out, g.w.out});
}

Tensor conv2d(const Tensor& x, const Conv2Spec& spec, const ModuleParams& p) {
  spec.validate();
  if (x.rank() == 4 && x.dim(1) != spec.in_channels) {
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(x.dim(1)) +
                     ", spec expects " + std::to_string(spec.in_channels));
  }
  return conv2d(x, p.get("weight"), p.get("bias"), spec.stride, spec.dilation, spec.padding);
}

Tensor conv3d(const Tensor& x, const Conv3Spec& spec, const ModuleParams& p) {
  spec.validate();
  if (x.rank() != 5) throw ShapeError("conv3d expects [B,C,S,H,W], got " + to_string(x.shape()));
  if (x.dim(1) != spec.in_channels) {
    throw ShapeError("conv3d channel mismatch: input has " + std::to_string(x.dim(1)) +
                     ", spec expects " + std::to_string(spec.in_channels));
  }
  if (spec.slice_padding == Padding::Valid && x.dim(2) < spec.kd) {
    throw ShapeError("conv3d: slice extent " + std::to_string(x.dim(2)) +
                     " smaller than kernel " + std::to_string(spec.kd));
  }
  const Tensor& w = p.get("weight");
  if (w.shape() != Shape{spec.out_channels, spec.in_channels, spec.kd, spec.kh, spec.kw}) {
    throw ShapeError("conv3d weight shape " + to_string(w.shape()) + " does not match spec");
  }
  Geometry g{make_axis(x.dim(2), spec.kd, 1, 1, spec.slice_padding),
             make_axis(x.dim(3), spec.kh, 1, 1, spec.spatial_padding),
             make_axis(x.dim(4), spec.kw, 1, 1, spec.spatial_padding)};
  return conv_core(x, w, p.get("bias"), g,
                   {x.dim(0), spec.out_channels, g.d.out, g.h.out, g.w.out});
}

Tensor fc(const Tensor& x, const ModuleParams& p) {
  const Tensor& w = p.get("weight");
  const Tensor& b = p.get("bias");
  const Index K = w.dim(1);
  if (x.rank() < 1 || x.shape().back() != K) {
    throw ShapeError("fc expects last extent " + std::to_string(K) + ", got " +
                     to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(0);
  const Tensor flat = reshape(x, {x.numel() / K, K});
  return reshape(add(matmul(flat, transpose_last(w)), b), out_shape);
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool expects [S,C,H,W]");
  return mean(x, {2, 3});
}

Tensor max_pool2d(const Tensor& x, Index size) {
  if (x.rank() != 4) throw ShapeError("max_pool2d expects [S,C,H,W]");
  if (size < 1) throw ConfigError("max_pool2d: window must be >= 1");
  const Index S = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index Ho = H / size, Wo = W / size;
  if (Ho < 1 || Wo < 1) throw ShapeError("max_pool2d window larger than input");
  auto d = x.data();
  Buffer out(static_cast<std::size_t>(S * C * Ho * Wo));
  std::vector<Index> arg(out.size());
  std::size_t o = 0;
  for (Index p = 0; p < S * C; ++p) {
    const Index base = p * H * W;
    for (Index i = 0; i < Ho; ++i) {
      for (Index j = 0; j < Wo; ++j, ++o) {
        Index best = base + (i * size) * W + j * size;
        for (Index a = 0; a < size; ++a) {
          for (Index b = 0; b < size; ++b) {
            const Index k = base + (i * size + a) * W + j * size + b;
            if (d[static_cast<std::size_t>(k)] > d[static_cast<std::size_t>(best)]) best = k;
          }
        }
        arg[o] = best;
        out[o] = d[static_cast<std::size_t>(best)];
      }
    }
  }
  if (auto* h = detail::branch_trace()) {
    for (Index a : arg) detail::trace_branch(h, static_cast<std::uint64_t>(a));
  }
  return make_result({S, C, Ho, Wo}, std::move(out), {x},
                     [arg = std::move(arg)](std::span<const double> g,
                                            std::span<Buffer*> gin) {
                       auto& gx = *gin[0];
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         gx[static_cast<std::size_t>(arg[i])] += g[i];
                       }
                     });
}

Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw UsageError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (mode == Mode::Eval || rate == 0.0) return x;
  const double keep = 1.0 / (1.0 - rate);
  Buffer mask(static_cast<std::size_t>(x.numel()));
  for (double& m : mask) m = uniform01(rng) < rate ? 0.0 : keep;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

namespace {

struct Tap {
  Index i0, i1;
  double w0, w1;
};

std::vector<Tap> bilinear_taps(Index in, Index factor) {
  std::vector<Tap> taps(static_cast<std::size_t>(in * factor));
  for (Index o = 0; o < in * factor; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0.0) src = 0.0;
    Index i0 = static_cast<Index>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const Index i1 = std::min(i0 + 1, in - 1);
    const double w1 = src - static_cast<double>(i0);
    taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - w1, w1};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, Index factor) {
  if (x.rank() != 4) throw ShapeError("upsample_bilinear expects [S,C,H,W]");
  if (factor < 1) throw ConfigError("upsample factor must be >= 1");
  if (factor == 1) return x;
  const Index P = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index Ho = H * factor, Wo = W * factor;
  const auto ty = bilinear_taps(H, factor);
  const auto tx = bilinear_taps(W, factor);
  auto d = x.data();
  Buffer out(static_cast<std::size_t>(P * Ho * Wo));
  for (Index p = 0; p < P; ++p) {
    const double* src = d.data() + p * H * W;
    double* dst = out.data() + p * Ho * Wo;
    for (Index i = 0; i < Ho; ++i) {
      const Tap& a = ty[static_cast<std::size_t>(i)];
      for (Index j = 0; j < Wo; ++j) {
        const Tap& b = tx[static_cast<std::size_t>(j)];
        dst[i * Wo + j] = a.w0 * (b.w0 * src[a.i0 * W + b.i0] + b.w1 * src[a.i0 * W + b.i1]) +
                          a.w1 * (b.w0 * src[a.i1 * W + b.i0] + b.w1 * src[a.i1 * W + b.i1]);
      }
    }
  }
  return make_result({x.dim(0), x.dim(1), Ho, Wo}, std::move(out), {x},
                     [ty, tx, P, H, W, Ho, Wo](std::span<const double> g,
                                               std::span<Buffer*> gin) {
                       auto& gx = *gin[0];
                       for (Index p = 0; p < P; ++p) {
                         double* dst = gx.data() + p * H * W;
                         const double* src = g.data() + p * Ho * Wo;
                         for (Index i = 0; i < Ho; ++i) {
                           const Tap& a = ty[static_cast<std::size_t>(i)];
                           for (Index j = 0; j < Wo; ++j) {
                             const Tap& b = tx[static_cast<std::size_t>(j)];
                             const double v = src[i * Wo + j];
                             dst[a.i0 * W + b.i0] += a.w0 * b.w0 * v;
                             dst[a.i0 * W + b.i1] += a.w0 * b.w1 * v;
                             dst[a.i1 * W + b.i0] += a.w1 * b.w0 * v;
                             dst[a.i1 * W + b.i1] += a.w1 * b.w1 * v;
                           }
                         }
                       }
                     });
}

}  // namespace lfd
