#include "lfdepth/pnm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "lfdepth/errors.hpp"

namespace lfd {

namespace {

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

class HeaderReader {
 public:
  HeaderReader(const std::vector<std::uint8_t>& b, const std::string& src) : bytes_(b), source_(src) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (is_space(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::uint64_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::uint64_t v = 0;
    while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
      v = v * 10 + static_cast<std::uint64_t>(bytes_[pos_] - '0');
      if (v > 0xFFFFFFFFull) throw FormatError(source_, start, std::string(what) + " out of range");
      ++pos_;
    }
    if (pos_ == start) {
      if (pos_ >= bytes_.size()) throw FormatError(source_, pos_, std::string("truncated header, expected ") + what);
      throw FormatError(source_, pos_, std::string("expected ") + what);
    }
    return v;
  }

  void single_whitespace() {
    if (pos_ >= bytes_.size()) throw FormatError(source_, pos_, "truncated header");
    if (!is_space(bytes_[pos_])) throw FormatError(source_, pos_, "expected whitespace after maxval");
    ++pos_;
  }

  std::size_t pos() const { return pos_; }
  void advance(std::size_t n) { pos_ += n; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  const std::string& source_;
  std::size_t pos_ = 0;
};

}  // namespace

PnmImage decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  if (bytes.size() < 2) throw FormatError(source, 0, "truncated header, missing magic");
  if (bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError(source, 0, "unsupported magic (expected P5 or P6)");
  }
  PnmImage img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  HeaderReader h(bytes, source);
  h.advance(2);
  const std::size_t wpos = h.pos();
  const std::uint64_t w = h.number("width");
  const std::uint64_t ht = h.number("height");
  const std::size_t mpos = h.pos();
  const std::uint64_t maxval = h.number("maxval");
  if (w == 0 || ht == 0) throw FormatError(source, wpos, "zero image extent");
  if (maxval == 0 || maxval > 65535) throw FormatError(source, mpos, "maxval must lie in 1..65535");
  h.single_whitespace();
  img.width = static_cast<Index>(w);
  img.height = static_cast<Index>(ht);
  img.maxval = static_cast<std::uint32_t>(maxval);
  const std::size_t bps = maxval > 255 ? 2 : 1;
  const std::size_t count = static_cast<std::size_t>(w * ht) * static_cast<std::size_t>(img.channels);
  const std::size_t start = h.pos();
  const std::size_t need = count * bps;
  if (bytes.size() - start < need) {
    throw FormatError(source, bytes.size(), "truncated raster: expected " + std::to_string(need) +
                                                " bytes after offset " + std::to_string(start) + ", found " +
                                                std::to_string(bytes.size() - start));
  }
  if (bytes.size() - start > need) throw FormatError(source, start + need, "trailing bytes after raster");
  img.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint16_t v = bps == 2 ? static_cast<std::uint16_t>((bytes[start + 2 * i] << 8) | bytes[start + 2 * i + 1])
                               : bytes[start + i];
    if (v > maxval) throw FormatError(source, start + i * bps, "sample exceeds maxval");
    img.samples[i] = v;
  }
  return img;
}

std::vector<std::uint8_t> encode_pnm(const PnmImage& img) {
  if (img.channels != 1 && img.channels != 3) throw UsageError("pnm: 1 or 3 channels");
  if (img.maxval == 0 || img.maxval > 65535) throw UsageError("pnm: maxval must lie in 1..65535");
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(img.width) +
                             " " + std::to_string(img.height) + "\n" + std::to_string(img.maxval) + "\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const bool wide = img.maxval > 255;
  out.reserve(out.size() + img.samples.size() * (wide ? 2 : 1));
  for (std::uint16_t v : img.samples) {
    if (wide) out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  }
  return out;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for '" + path + "'");
  return bytes;
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

PnmImage read_pnm(const std::string& path) { return decode_pnm(read_file(path), path); }

void write_pnm(const std::string& path, const PnmImage& image) { write_file(path, encode_pnm(image)); }

namespace {

PnmImage quantize(const Tensor& t, Index channels, std::uint32_t maxval) {
  if (t.rank() != 3 || t.dim(0) != channels) {
    throw ShapeError("pnm: expected [" + std::to_string(channels) + ",H,W], got " + to_string(t.shape()));
  }
  PnmImage img;
  img.channels = channels;
  img.height = t.dim(1);
  img.width = t.dim(2);
  img.maxval = maxval;
  const Index plane = img.height * img.width;
  img.samples.resize(static_cast<std::size_t>(plane * channels));
  auto d = t.data();
  for (Index c = 0; c < channels; ++c) {
    for (Index p = 0; p < plane; ++p) {
      const double v = std::clamp(d[static_cast<std::size_t>(c * plane + p)], 0.0, 1.0);
      img.samples[static_cast<std::size_t>(p * channels + c)] =
          static_cast<std::uint16_t>(std::lround(v * maxval));
    }
  }
  return img;
}

}  // namespace

PnmImage rgb_to_pnm(const Tensor& rgb) { return quantize(rgb, 3, 255); }
PnmImage depth_to_pnm(const Tensor& depth) { return quantize(depth, 1, 65535); }

Tensor pnm_to_tensor(const PnmImage& img) {
  const Index plane = img.height * img.width;
  Buffer data(static_cast<std::size_t>(plane * img.channels));
  const double maxval = static_cast<double>(img.maxval);
  for (Index c = 0; c < img.channels; ++c) {
    for (Index p = 0; p < plane; ++p) {
      data[static_cast<std::size_t>(c * plane + p)] =
          img.samples[static_cast<std::size_t>(p * img.channels + c)] / maxval;
    }
  }
  return Tensor({img.channels, img.height, img.width}, std::move(data));
}

}  // namespace lfd
