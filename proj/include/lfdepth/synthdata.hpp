#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lfdepth/model.hpp"

namespace lfd {

enum class DepthStyle { Planes, Slanted, Blobs, Random };
enum class TextureStyle { Checker, Noise, Random };

const char* depth_style_name(DepthStyle s);
const char* texture_style_name(TextureStyle s);
DepthStyle parse_depth_style(const std::string& s);
TextureStyle parse_texture_style(const std::string& s);

struct GenSpec {
  Index height = 64;
  Index width = 64;
  Index slices = 12;
  /// Blur sigma in pixels per unit of depth offset.
  double blur_gain = 4.0;
  DepthStyle depth_style = DepthStyle::Random;
  TextureStyle texture_style = TextureStyle::Random;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Scene {
  Tensor rgb;                        // [3,H,W] in [0,1]
  std::vector<Tensor> focal;         // S x [3,H,W]
  Tensor depth;                      // [1,H,W] in [0,1]
  std::vector<double> focus_depths;  // strictly increasing in (0,1)
  std::uint64_t seed = 0;

  Index height() const { return rgb.dim(1); }
  Index width() const { return rgb.dim(2); }
  Index slices() const { return static_cast<Index>(focal.size()); }
  /// Network input view: rgb [1,3,H,W], focal [S,3,H,W].
  SceneInput input() const;
  /// Ground truth as [1,1,H,W].
  Tensor target() const;
};

/// Midpoints of S equal bins of [0,1].
std::vector<double> focus_depths(Index slices);

Tensor generate_depth(Index height, Index width, DepthStyle style, Rng& rng);
Tensor generate_texture(Index height, Index width, TextureStyle style, Rng& rng);
/// Per-pixel Gaussian gather with sigma(x) = k |depth(x) - focus|, radius ceil(3 sigma),
/// normalised weights, clamp-to-edge sampling. Zero sigma copies the pixel.
Tensor defocus(const Tensor& rgb, const Tensor& depth, double focus, double blur_gain);
/// Pure function of the spec (seed included).
Scene generate_scene(const GenSpec& spec);

/// Rounds images to 8-bit and depth to 16-bit levels, as stored on disk.
Scene quantize_scene(const Scene& scene);

void write_scene(const Scene& scene, const std::string& dir);
Scene read_scene(const std::string& dir);
/// Reads a depth PGM as [1,H,W] in [0,1].
Tensor read_depth_pgm(const std::string& path);
void write_depth_pgm(const Tensor& depth, const std::string& path);

struct AugmentPolicy {
  double flip_probability = 0.5;
  double max_rotation_deg = 5.0;
  double jitter_low = 0.6;
  double jitter_high = 1.4;
  /// Overrides the coin flip when set.
  std::optional<bool> force_flip;
  std::optional<double> force_rotation_deg;
  bool color_jitter = true;
};

Scene flip_horizontal(const Scene& scene);
/// Rotation about the image centre, bilinear, reflect padding; applied to every image and depth.
Scene rotate(const Scene& scene, double degrees);
/// Brightness, then contrast, then saturation; rgb and slices only, clamped to [0,1].
Scene color_jitter(const Scene& scene, double brightness, double contrast, double saturation);
/// Draws flip, angle and the three jitter factors from `rng` in that order, always.
Scene augment(const Scene& scene, Rng& rng, const AugmentPolicy& policy);

struct Manifest {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

std::uint64_t scene_seed(std::uint64_t seed, std::uint64_t index);
std::string scene_name(Index index);
/// Writes `count` scenes plus manifest.json into `dir`; the last count/5 scenes
/// of a seeded shuffle form the test split. `threads` caps generation workers.
Manifest generate_dataset(const std::string& dir, Index count, const GenSpec& base, int threads);
Manifest read_manifest(const std::string& dir);
void write_manifest(const std::string& dir, const Manifest& manifest);
const std::vector<std::string>& split_names(const Manifest& m, const std::string& split);

/// Worker count from LFDEPTH_THREADS (default: hardware concurrency, at least 1).
int worker_threads();

}  // namespace lfd
