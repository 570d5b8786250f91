#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lfdepth/tensor.hpp"

namespace lfd {

/// Raw PNM raster: samples in row-major, channel-interleaved order.
struct PnmImage {
  Index width = 0;
  Index height = 0;
  Index channels = 0;  // 1 for P5, 3 for P6
  std::uint32_t maxval = 255;
  std::vector<std::uint16_t> samples;
};

/// Parses binary P5/P6 bytes. Errors carry `source` and the byte offset.
PnmImage decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& source);
std::vector<std::uint8_t> encode_pnm(const PnmImage& image);

PnmImage read_pnm(const std::string& path);
void write_pnm(const std::string& path, const PnmImage& image);

/// [3,H,W] in [0,1] <-> 8-bit P6 (round(v*255), clamped).
PnmImage rgb_to_pnm(const Tensor& rgb);
/// [1,H,W] in [0,1] <-> 16-bit P5 (round(v*65535), clamped).
PnmImage depth_to_pnm(const Tensor& depth);
/// Samples divided by maxval, as [channels,H,W].
Tensor pnm_to_tensor(const PnmImage& image);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace lfd
