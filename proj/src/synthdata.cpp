#include "lfdepth/synthdata.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <mutex>
#include <numbers>
#include <thread>

#include "json.hpp"

#include "lfdepth/errors.hpp"
#include "lfdepth/pnm.hpp"

namespace lfd {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

const char* depth_style_name(DepthStyle s) {
  switch (s) {
    case DepthStyle::Planes: return "planes";
    case DepthStyle::Slanted: return "slanted";
    case DepthStyle::Blobs: return "blobs";
    case DepthStyle::Random: return "random";
  }
  return "?";
}

const char* texture_style_name(TextureStyle s) {
  switch (s) {
    case TextureStyle::Checker: return "checker";
    case TextureStyle::Noise: return "noise";
    case TextureStyle::Random: return "random";
  }
  return "?";
}

DepthStyle parse_depth_style(const std::string& s) {
  for (DepthStyle d : {DepthStyle::Planes, DepthStyle::Slanted, DepthStyle::Blobs, DepthStyle::Random}) {
    if (s == depth_style_name(d)) return d;
  }
  throw ConfigError("unknown depth style '" + s + "' (planes, slanted, blobs, random)");
}

TextureStyle parse_texture_style(const std::string& s) {
  for (TextureStyle t : {TextureStyle::Checker, TextureStyle::Noise, TextureStyle::Random}) {
    if (s == texture_style_name(t)) return t;
  }
  throw ConfigError("unknown texture style '" + s + "' (checker, noise, random)");
}

void GenSpec::validate() const {
  if (height < 16 || width < 16 || height % 16 != 0 || width % 16 != 0) {
    throw ConfigError("scene size " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be positive multiples of 16");
  }
  if (slices < 2) throw ConfigError("scene needs at least 2 focal slices");
  if (!(blur_gain >= 0.0) || !std::isfinite(blur_gain)) throw ConfigError("blur gain must be finite and >= 0");
}

SceneInput Scene::input() const {
  const Index H = height(), W = width();
  std::vector<double> stack;
  stack.reserve(static_cast<std::size_t>(slices() * 3 * H * W));
  for (const Tensor& f : focal) stack.insert(stack.end(), f.data().begin(), f.data().end());
  return {reshape(rgb, {1, 3, H, W}), Tensor({slices(), 3, H, W}, std::move(stack))};
}

Tensor Scene::target() const { return reshape(depth, {1, 1, height(), width()}); }

std::vector<double> focus_depths(Index slices) {
  std::vector<double> f(static_cast<std::size_t>(slices));
  for (Index s = 0; s < slices; ++s) f[static_cast<std::size_t>(s)] = (static_cast<double>(s) + 0.5) / slices;
  return f;
}

namespace {

constexpr double kDepthLo = 0.05;
constexpr double kDepthHi = 0.95;

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

Index uniform_index(Rng& rng, Index n) { return static_cast<Index>(rng() % static_cast<std::uint64_t>(n)); }

void fill_rect(std::vector<double>& d, Index H, Index W, Rng& rng, double depth) {
  const Index h = std::max<Index>(H / 5, 1) + uniform_index(rng, H / 2);
  const Index w = std::max<Index>(W / 5, 1) + uniform_index(rng, W / 2);
  const Index y0 = uniform_index(rng, H - h + 1);
  const Index x0 = uniform_index(rng, W - w + 1);
  for (Index y = y0; y < y0 + h; ++y)
    for (Index x = x0; x < x0 + w; ++x) d[static_cast<std::size_t>(y * W + x)] = depth;
}

double bilinear_clamped(const std::vector<double>& g, Index gh, Index gw, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(gh - 1));
  x = std::clamp(x, 0.0, static_cast<double>(gw - 1));
  const auto y0 = static_cast<Index>(std::floor(y));
  const auto x0 = static_cast<Index>(std::floor(x));
  const Index y1 = std::min(y0 + 1, gh - 1), x1 = std::min(x0 + 1, gw - 1);
  const double ty = y - y0, tx = x - x0;
  auto at = [&](Index a, Index b) { return g[static_cast<std::size_t>(a * gw + b)]; };
  return (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1));
}

/// Smooth random field in [0,1]: random lattice with spacing `cell`, bilinear interpolation.
std::vector<double> value_noise(Index H, Index W, Index cell, Rng& rng) {
  const Index gh = H / cell + 2, gw = W / cell + 2;
  std::vector<double> grid(static_cast<std::size_t>(gh * gw));
  for (double& v : grid) v = uniform01(rng);
  std::vector<double> out(static_cast<std::size_t>(H * W));
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      out[static_cast<std::size_t>(y * W + x)] =
          bilinear_clamped(grid, gh, gw, static_cast<double>(y) / cell, static_cast<double>(x) / cell);
  return out;
}

}  // namespace

Tensor generate_depth(Index H, Index W, DepthStyle style, Rng& rng) {
  if (style == DepthStyle::Random) style = static_cast<DepthStyle>(uniform_index(rng, 3));
  std::vector<double> d(static_cast<std::size_t>(H * W));
  switch (style) {
    case DepthStyle::Planes: {
      std::fill(d.begin(), d.end(), uniform(rng, kDepthLo, kDepthHi));
      const Index n = 1 + uniform_index(rng, 3);
      for (Index k = 0; k < n; ++k) fill_rect(d, H, W, rng, uniform(rng, kDepthLo, kDepthHi));
      break;
    }
    case DepthStyle::Slanted: {
      const double base = uniform(rng, 0.3, 0.7);
      const double gx = uniform(rng, -0.8, 0.8), gy = uniform(rng, -0.8, 0.8);
      for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
          const double v = base + gx * (static_cast<double>(x) / (W - 1) - 0.5) + gy * (static_cast<double>(y) / (H - 1) - 0.5);
          d[static_cast<std::size_t>(y * W + x)] = std::clamp(v, kDepthLo, kDepthHi);
        }
      fill_rect(d, H, W, rng, uniform(rng, kDepthLo, kDepthHi));
      break;
    }
    case DepthStyle::Blobs: {
      const Index n = 2 + uniform_index(rng, 3);
      std::vector<double> cy(n), cx(n), s(n), a(n);
      for (Index k = 0; k < n; ++k) {
        cy[k] = uniform(rng, 0.0, H - 1.0);
        cx[k] = uniform(rng, 0.0, W - 1.0);
        s[k] = uniform(rng, 0.1, 0.3) * std::min(H, W);
        a[k] = uniform(rng, -1.0, 1.0);
      }
      for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
          double v = 0.0;
          for (Index k = 0; k < n; ++k) {
            const double r2 = (y - cy[k]) * (y - cy[k]) + (x - cx[k]) * (x - cx[k]);
            v += a[k] * std::exp(-r2 / (2 * s[k] * s[k]));
          }
          d[static_cast<std::size_t>(y * W + x)] = v;
        }
      const auto [mn, mx] = std::minmax_element(d.begin(), d.end());
      const double lo = *mn, span = *mx - *mn;
      for (double& v : d) v = span > 1e-12 ? kDepthLo + (kDepthHi - kDepthLo) * (v - lo) / span : 0.5;
      break;
    }
    case DepthStyle::Random: break;
  }
  return Tensor({1, H, W}, std::move(d));
}

Tensor generate_texture(Index H, Index W, TextureStyle style, Rng& rng) {
  if (style == TextureStyle::Random) style = static_cast<TextureStyle>(uniform_index(rng, 2));
  const Index plane = H * W;
  std::vector<double> rgb(static_cast<std::size_t>(3 * plane));
  if (style == TextureStyle::Checker) {
    const Index cell = 2 + uniform_index(rng, 7);
    const Index oy = uniform_index(rng, cell), ox = uniform_index(rng, cell);
    double col[2][3];
    for (auto& c : col)
      for (double& v : c) v = uniform(rng, 0.05, 0.95);
    const Index gh = H / cell + 2, gw = W / cell + 2;
    std::vector<double> shade(static_cast<std::size_t>(gh * gw));
    for (double& v : shade) v = uniform(rng, 0.75, 1.0);
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        const Index cy = (y + oy) / cell, cx = (x + ox) / cell;
        const int parity = static_cast<int>((cy + cx) % 2);
        const double sh = shade[static_cast<std::size_t>(cy * gw + cx)];
        for (Index c = 0; c < 3; ++c) rgb[static_cast<std::size_t>(c * plane + y * W + x)] = col[parity][c] * sh;
      }
  } else {
    for (Index c = 0; c < 3; ++c) {
      const auto coarse = value_noise(H, W, 8, rng);
      const auto fine = value_noise(H, W, 2, rng);
      for (Index p = 0; p < plane; ++p) {
        rgb[static_cast<std::size_t>(c * plane + p)] = 0.05 + 0.9 * (0.6 * coarse[p] + 0.4 * fine[p]);
      }
    }
  }
  return Tensor({3, H, W}, std::move(rgb));
}

Tensor defocus(const Tensor& rgb, const Tensor& depth, double focus, double k) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3 || depth.rank() != 3 || depth.dim(0) != 1 ||
      rgb.dim(1) != depth.dim(1) || rgb.dim(2) != depth.dim(2)) {
    throw ShapeError("defocus: rgb " + to_string(rgb.shape()) + " and depth " + to_string(depth.shape()) +
                     " are not registered");
  }
  if (!(k >= 0.0)) throw DomainError("defocus: blur gain must be >= 0");
  const Index H = rgb.dim(1), W = rgb.dim(2), plane = H * W;
  auto src = rgb.data();
  auto dep = depth.data();
  std::vector<double> out(static_cast<std::size_t>(3 * plane));
  std::vector<double> wy, wx;
  for (Index y = 0; y < H; ++y) {
    for (Index x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y * W + x);
      const double sigma = k * std::abs(dep[p] - focus);
      if (sigma == 0.0) {
        for (Index c = 0; c < 3; ++c) out[c * plane + p] = src[c * plane + p];
        continue;
      }
      const auto r = static_cast<Index>(std::ceil(3.0 * sigma));
      wy.assign(static_cast<std::size_t>(2 * r + 1), 0.0);
      wx.assign(static_cast<std::size_t>(2 * r + 1), 0.0);
      for (Index u = -r; u <= r; ++u) {
        const double w = std::exp(-static_cast<double>(u * u) / (2.0 * sigma * sigma));
        wy[static_cast<std::size_t>(u + r)] = w;
        wx[static_cast<std::size_t>(u + r)] = w;
      }
      double acc[3] = {0.0, 0.0, 0.0};
      double norm = 0.0;
      for (Index u = -r; u <= r; ++u) {
        const Index yy = std::clamp(y + u, Index{0}, H - 1);
        for (Index v = -r; v <= r; ++v) {
          const Index xx = std::clamp(x + v, Index{0}, W - 1);
          const double w = wy[static_cast<std::size_t>(u + r)] * wx[static_cast<std::size_t>(v + r)];
          const std::size_t q = static_cast<std::size_t>(yy * W + xx);
          norm += w;
          for (Index c = 0; c < 3; ++c) acc[c] += w * src[c * plane + q];
        }
      }
      for (Index c = 0; c < 3; ++c) out[c * plane + p] = acc[c] / norm;
    }
  }
  return Tensor({3, H, W}, std::move(out));
}

Scene generate_scene(const GenSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Scene s;
  s.seed = spec.seed;
  s.depth = generate_depth(spec.height, spec.width, spec.depth_style, rng);
  s.rgb = generate_texture(spec.height, spec.width, spec.texture_style, rng);
  s.focus_depths = focus_depths(spec.slices);
  for (double f : s.focus_depths) s.focal.push_back(defocus(s.rgb, s.depth, f, spec.blur_gain));
  return s;
}

namespace {

Tensor requantize(const Tensor& t, double levels) {
  std::vector<double> d(t.data().begin(), t.data().end());
  for (double& v : d) v = static_cast<double>(std::lround(std::clamp(v, 0.0, 1.0) * levels)) / levels;
  return Tensor(t.shape(), std::move(d));
}

std::string focal_file(Index s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "focal_%02ld.ppm", static_cast<long>(s));
  return buf;
}

json parse_json_file(const std::string& path) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError(path, e.byte, "invalid JSON");
  }
}

}  // namespace

Scene quantize_scene(const Scene& scene) {
  Scene q = scene;
  q.rgb = requantize(scene.rgb, 255.0);
  for (auto& f : q.focal) f = requantize(f, 255.0);
  q.depth = requantize(scene.depth, 65535.0);
  return q;
}

void write_depth_pgm(const Tensor& depth, const std::string& path) { write_pnm(path, depth_to_pnm(depth)); }

Tensor read_depth_pgm(const std::string& path) {
  PnmImage img = read_pnm(path);
  if (img.channels != 1) throw FormatError(path, 0, "depth map must be a P5 (grayscale) image");
  return pnm_to_tensor(img);
}

void write_scene(const Scene& scene, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
  const fs::path root(dir);
  write_pnm((root / "rgb.ppm").string(), rgb_to_pnm(scene.rgb));
  for (Index s = 0; s < scene.slices(); ++s) {
    write_pnm((root / focal_file(s)).string(), rgb_to_pnm(scene.focal[static_cast<std::size_t>(s)]));
  }
  write_depth_pgm(scene.depth, (root / "depth.pgm").string());
  json meta;
  meta["S"] = scene.slices();
  meta["focus_depths"] = scene.focus_depths;
  meta["seed"] = scene.seed;
  const std::string text = meta.dump(2) + "\n";
  write_file((root / "meta.json").string(), std::vector<std::uint8_t>(text.begin(), text.end()));
}

Scene read_scene(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw IoError("scene directory '" + dir + "' does not exist");
  const std::string meta_path = (root / "meta.json").string();
  const json meta = parse_json_file(meta_path);
  Scene s;
  try {
    const Index S = meta.at("S").get<Index>();
    s.focus_depths = meta.at("focus_depths").get<std::vector<double>>();
    s.seed = meta.at("seed").get<std::uint64_t>();
    if (S < 2 || static_cast<Index>(s.focus_depths.size()) != S) {
      throw FormatError(meta_path, 0, "S and focus_depths disagree");
    }
  } catch (const json::exception& e) {
    throw FormatError(meta_path, 0, std::string("bad meta.json: ") + e.what());
  }
  for (std::size_t i = 1; i < s.focus_depths.size(); ++i) {
    if (!(s.focus_depths[i] > s.focus_depths[i - 1])) throw FormatError(meta_path, 0, "focus depths not increasing");
  }
  auto load_rgb = [&](const std::string& name) {
    const std::string path = (root / name).string();
    PnmImage img = read_pnm(path);
    if (img.channels != 3) throw FormatError(path, 0, "expected a P6 colour image");
    return pnm_to_tensor(img);
  };
  s.rgb = load_rgb("rgb.ppm");
  for (Index k = 0; k < static_cast<Index>(s.focus_depths.size()); ++k) {
    Tensor f = load_rgb(focal_file(k));
    if (f.shape() != s.rgb.shape()) {
      throw FormatError((root / focal_file(k)).string(), 0, "slice size differs from rgb.ppm");
    }
    s.focal.push_back(f);
  }
  const std::string depth_path = (root / "depth.pgm").string();
  s.depth = read_depth_pgm(depth_path);
  if (s.depth.dim(1) != s.height() || s.depth.dim(2) != s.width()) {
    throw FormatError(depth_path, 0, "depth size differs from rgb.ppm");
  }
  return s;
}

Scene flip_horizontal(const Scene& scene) {
  auto flip = [](const Tensor& t) {
    const Index C = t.dim(0), H = t.dim(1), W = t.dim(2);
    std::vector<double> d(static_cast<std::size_t>(t.numel()));
    auto src = t.data();
    for (Index c = 0; c < C; ++c)
      for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x)
          d[static_cast<std::size_t>((c * H + y) * W + x)] = src[static_cast<std::size_t>((c * H + y) * W + (W - 1 - x))];
    return Tensor(t.shape(), std::move(d));
  };
  Scene out = scene;
  out.rgb = flip(scene.rgb);
  for (auto& f : out.focal) f = flip(f);
  out.depth = flip(scene.depth);
  return out;
}

namespace {

double reflect(double x, Index n) {
  if (n == 1) return 0.0;
  const double period = 2.0 * static_cast<double>(n - 1);
  x = std::fmod(std::abs(x), period);
  return x > n - 1 ? period - x : x;
}

Tensor rotate_image(const Tensor& t, double radians) {
  const Index C = t.dim(0), H = t.dim(1), W = t.dim(2);
  const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
  const double cs = std::cos(radians), sn = std::sin(radians);
  auto src = t.data();
  std::vector<double> d(static_cast<std::size_t>(t.numel()));
  for (Index y = 0; y < H; ++y) {
    for (Index x = 0; x < W; ++x) {
      // Inverse map of the output pixel into the source image.
      const double dx = x - cx, dy = y - cy;
      const double sx = reflect(cs * dx + sn * dy + cx, W);
      const double sy = reflect(-sn * dx + cs * dy + cy, H);
      const auto x0 = static_cast<Index>(std::floor(sx));
      const auto y0 = static_cast<Index>(std::floor(sy));
      const Index x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      const double tx = sx - x0, ty = sy - y0;
      for (Index c = 0; c < C; ++c) {
        auto at = [&](Index a, Index b) { return src[static_cast<std::size_t>((c * H + a) * W + b)]; };
        d[static_cast<std::size_t>((c * H + y) * W + x)] =
            (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1));
      }
    }
  }
  return Tensor(t.shape(), std::move(d));
}

Tensor jitter_image(const Tensor& t, double b, double c, double s) {
  const Index H = t.dim(1), W = t.dim(2), plane = H * W;
  std::vector<double> d(t.data().begin(), t.data().end());
  auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
  auto gray = [&](Index p) { return 0.299 * d[p] + 0.587 * d[plane + p] + 0.114 * d[2 * plane + p]; };
  for (double& v : d) v = clamp01(v * b);
  double m = 0.0;
  for (Index p = 0; p < plane; ++p) m += gray(p);
  m /= static_cast<double>(plane);
  for (double& v : d) v = clamp01((v - m) * c + m);
  for (Index p = 0; p < plane; ++p) {
    const double g = gray(p);
    for (Index ch = 0; ch < 3; ++ch) {
      double& v = d[static_cast<std::size_t>(ch * plane + p)];
      v = clamp01((v - g) * s + g);
    }
  }
  return Tensor(t.shape(), std::move(d));
}

}  // namespace

Scene rotate(const Scene& scene, double degrees) {
  const double rad = degrees * std::numbers::pi / 180.0;
  Scene out = scene;
  out.rgb = rotate_image(scene.rgb, rad);
  for (auto& f : out.focal) f = rotate_image(f, rad);
  out.depth = rotate_image(scene.depth, rad);
  return out;
}

Scene color_jitter(const Scene& scene, double brightness, double contrast, double saturation) {
  Scene out = scene;
  out.rgb = jitter_image(scene.rgb, brightness, contrast, saturation);
  for (auto& f : out.focal) f = jitter_image(f, brightness, contrast, saturation);
  return out;
}

Scene augment(const Scene& scene, Rng& rng, const AugmentPolicy& policy) {
  const double coin = uniform01(rng);
  const double angle = uniform(rng, -policy.max_rotation_deg, policy.max_rotation_deg);
  const double b = uniform(rng, policy.jitter_low, policy.jitter_high);
  const double c = uniform(rng, policy.jitter_low, policy.jitter_high);
  const double s = uniform(rng, policy.jitter_low, policy.jitter_high);
  Scene out = scene;
  if (policy.force_flip.value_or(coin < policy.flip_probability)) out = flip_horizontal(out);
  const double deg = policy.force_rotation_deg.value_or(angle);
  if (deg != 0.0) out = rotate(out, deg);
  if (policy.color_jitter) out = color_jitter(out, b, c, s);
  return out;
}

std::uint64_t scene_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finaliser over (seed, index).
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::string scene_name(Index index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04ld", static_cast<long>(index));
  return buf;
}

int worker_threads() {
  if (const char* env = std::getenv("LFDEPTH_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("LFDEPTH_THREADS must be a positive integer");
    return static_cast<int>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void write_manifest(const std::string& dir, const Manifest& m) {
  json j;
  j["train"] = m.train;
  j["test"] = m.test;
  const std::string text = j.dump(2) + "\n";
  write_file((fs::path(dir) / "manifest.json").string(), std::vector<std::uint8_t>(text.begin(), text.end()));
}

Manifest read_manifest(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory '" + dir + "' does not exist");
  const std::string path = (fs::path(dir) / "manifest.json").string();
  const json j = parse_json_file(path);
  Manifest m;
  try {
    m.train = j.at("train").get<std::vector<std::string>>();
    m.test = j.at("test").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(path, 0, std::string("bad manifest: ") + e.what());
  }
  return m;
}

const std::vector<std::string>& split_names(const Manifest& m, const std::string& split) {
  if (split == "train") return m.train;
  if (split == "test") return m.test;
  throw UsageError("unknown split '" + split + "' (train or test)");
}

Manifest generate_dataset(const std::string& dir, Index count, const GenSpec& base, int threads) {
  base.validate();
  if (count < 1) throw ConfigError("dataset needs at least one scene");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());

  std::atomic<Index> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (Index i = next++; i < count; i = next++) {
      try {
        GenSpec spec = base;
        spec.seed = scene_seed(base.seed, static_cast<std::uint64_t>(i));
        write_scene(quantize_scene(generate_scene(spec)), (fs::path(dir) / scene_name(i)).string());
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(count)));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  std::vector<Index> order(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(scene_seed(base.seed, ~std::uint64_t{0}));
  for (Index i = count - 1; i > 0; --i) std::swap(order[i], order[uniform_index(rng, i + 1)]);
  const Index n_test = count / 5;
  std::vector<Index> train(order.begin(), order.end() - n_test), test(order.end() - n_test, order.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  Manifest m;
  for (Index i : train) m.train.push_back(scene_name(i));
  for (Index i : test) m.test.push_back(scene_name(i));
  write_manifest(dir, m);
  return m;
}

}  // namespace lfd
