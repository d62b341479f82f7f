#ifndef COUNTERSEG_RENDER_HPP
#define COUNTERSEG_RENDER_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "counterseg/seg.hpp"

namespace counterseg {

// Palette-indexed 2D image. Indices 0..249 form a grayscale ramp; the last
// entries are the contour/overlay colors.
struct IndexedImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> idx;

  std::uint8_t& at(int x, int y) { return idx[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return idx[static_cast<std::size_t>(y) * width + x]; }
};

constexpr std::uint8_t kGrayLevels = 250;
constexpr std::uint8_t kColorKidney = 250;  // red
constexpr std::uint8_t kColorCyst = 251;    // blue
constexpr std::uint8_t kColorAccent = 252;  // orange

inline std::array<std::uint8_t, 768> gif_palette() {
  std::array<std::uint8_t, 768> pal{};
  for (int i = 0; i < kGrayLevels; ++i) {
    std::uint8_t g = static_cast<std::uint8_t>(i * 255 / (kGrayLevels - 1));
    pal[static_cast<std::size_t>(3 * i)] = g;
    pal[static_cast<std::size_t>(3 * i + 1)] = g;
    pal[static_cast<std::size_t>(3 * i + 2)] = g;
  }
  auto set = [&](int slot, int r, int g, int b) {
    pal[static_cast<std::size_t>(3 * slot)] = static_cast<std::uint8_t>(r);
    pal[static_cast<std::size_t>(3 * slot + 1)] = static_cast<std::uint8_t>(g);
    pal[static_cast<std::size_t>(3 * slot + 2)] = static_cast<std::uint8_t>(b);
  };
  set(kColorKidney, 220, 40, 40);
  set(kColorCyst, 50, 90, 230);
  set(kColorAccent, 240, 150, 40);
  set(253, 0, 0, 0);
  set(254, 0, 0, 0);
  set(255, 0, 0, 0);
  return pal;
}

inline std::uint8_t gray_index(double v, double lo, double hi) {
  if (hi <= lo) return 0;
  double t = (v - lo) / (hi - lo);
  t = std::min(std::max(t, 0.0), 1.0);
  return static_cast<std::uint8_t>(std::llround(t * (kGrayLevels - 1)));
}

// A voxel is a contour pixel when it carries the label and a 4-neighbor in the
// slice does not.
inline bool is_contour(const MaskPatch& m, int x, int y, int z, std::uint8_t label) {
  if (m.lab[m.idx(x, y, z)] != label) return false;
  const int nx = m.dims[0], ny = m.dims[1];
  const int offs[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
  for (const auto& o : offs) {
    int qx = x + o[0], qy = y + o[1];
    if (qx < 0 || qy < 0 || qx >= nx || qy >= ny) return true;
    if (m.lab[m.idx(qx, qy, z)] != label) return true;
  }
  return false;
}

// One animation frame: image slice with kidney/cyst contours on the left,
// uncertainty slice (white = high) on the right.
inline IndexedImage render_frame(const Patch& image, const MaskPatch& labels,
                                 const std::vector<double>& uncertainty, int slice_z,
                                 double img_lo, double img_hi) {
  CSEG_CHECK(image.dims == labels.dims, "render_frame: image/label dims differ");
  CSEG_CHECK(uncertainty.size() == image.vox.size(), "render_frame: uncertainty size mismatch");
  CSEG_CHECK(slice_z >= 0 && slice_z < image.dims[2], "render_frame: slice index out of range");
  const int w = image.dims[0], h = image.dims[1];
  const int gap = 2;
  IndexedImage out;
  out.width = 2 * w + gap;
  out.height = h;
  out.idx.assign(static_cast<std::size_t>(out.width) * out.height, 253);  // black background

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      out.at(x, y) = gray_index(image.vox[image.idx(x, y, slice_z)], img_lo, img_hi);
      // uncertainty panel: std of a probability is bounded by 0.5
      out.at(w + gap + x, y) = gray_index(uncertainty[image.idx(x, y, slice_z)], 0.0, 0.5);
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (is_contour(labels, x, y, slice_z, kKidney)) out.at(x, y) = kColorKidney;
      if (is_contour(labels, x, y, slice_z, kCyst)) out.at(x, y) = kColorCyst;
    }
  return out;
}

// ----- PGM (indices are written verbatim; the GIF carries the colors) -----

inline void write_pgm(const IndexedImage& img, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  CSEG_RUNTIME_CHECK(f.good(), "cannot write pgm: " + path.string());
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.idx.data()), static_cast<std::streamsize>(img.idx.size()));
}

// ----- GIF89a -----

namespace detail {
class GifLzw {
 public:
  explicit GifLzw(std::vector<std::uint8_t>& out) : out_(out) {}

  void encode(const std::vector<std::uint8_t>& data) {
    const int min_code_size = 8;
    out_.push_back(static_cast<std::uint8_t>(min_code_size));
    const int clear = 1 << min_code_size;
    const int eoi = clear + 1;
    reset_table();
    code_size_ = min_code_size + 1;
    emit(clear);
    int prefix = -1;
    for (std::uint8_t pixel : data) {
      if (prefix < 0) {
        prefix = pixel;
        continue;
      }
      const std::int64_t key = (static_cast<std::int64_t>(prefix) << 8) | pixel;
      auto it = table_.find(key);
      if (it != table_.end()) {
        prefix = it->second;
      } else {
        emit(prefix);
        if (next_code_ < 4096) {
          table_[key] = next_code_++;
          if (next_code_ - 1 == (1 << code_size_) && code_size_ < 12) ++code_size_;
        } else {
          emit(clear);
          reset_table();
          code_size_ = min_code_size + 1;
        }
        prefix = pixel;
      }
    }
    if (prefix >= 0) emit(prefix);
    emit(eoi);
    flush_bits();
    flush_block();
    out_.push_back(0);  // block terminator
  }

 private:
  void reset_table() {
    table_.clear();
    next_code_ = (1 << 8) + 2;
  }

  void emit(int code) {
    bitbuf_ |= static_cast<std::uint32_t>(code) << bits_;
    bits_ += code_size_;
    while (bits_ >= 8) {
      block_.push_back(static_cast<std::uint8_t>(bitbuf_ & 0xFF));
      bitbuf_ >>= 8;
      bits_ -= 8;
      if (block_.size() == 255) flush_block();
    }
  }

  void flush_bits() {
    if (bits_ > 0) {
      block_.push_back(static_cast<std::uint8_t>(bitbuf_ & 0xFF));
      bitbuf_ = 0;
      bits_ = 0;
      if (block_.size() == 255) flush_block();
    }
  }

  void flush_block() {
    if (block_.empty()) return;
    out_.push_back(static_cast<std::uint8_t>(block_.size()));
    out_.insert(out_.end(), block_.begin(), block_.end());
    block_.clear();
  }

  std::vector<std::uint8_t>& out_;
  std::map<std::int64_t, int> table_;
  int next_code_ = 0;
  int code_size_ = 9;
  std::uint32_t bitbuf_ = 0;
  int bits_ = 0;
  std::vector<std::uint8_t> block_;
};

inline void push_u16(std::vector<std::uint8_t>& v, int x) {
  v.push_back(static_cast<std::uint8_t>(x & 0xFF));
  v.push_back(static_cast<std::uint8_t>((x >> 8) & 0xFF));
}
}  // namespace detail

// Looping animated GIF with the shared 256-color palette, one frame per image.
inline void write_gif89a(const std::vector<IndexedImage>& frames, const std::filesystem::path& path,
                         int delay_cs = 40) {
  CSEG_CHECK(!frames.empty(), "write_gif89a: no frames");
  const int w = frames[0].width, h = frames[0].height;
  for (const auto& f : frames)
    CSEG_CHECK(f.width == w && f.height == h, "write_gif89a: frame dims differ");

  std::vector<std::uint8_t> out;
  const char* magic = "GIF89a";
  out.insert(out.end(), magic, magic + 6);
  detail::push_u16(out, w);
  detail::push_u16(out, h);
  out.push_back(0xF7);  // global color table, 256 entries, 8 bits
  out.push_back(0);     // background color index
  out.push_back(0);     // aspect
  auto pal = gif_palette();
  out.insert(out.end(), pal.begin(), pal.end());

  // NETSCAPE looping extension
  out.push_back(0x21);
  out.push_back(0xFF);
  out.push_back(11);
  const char* ns = "NETSCAPE2.0";
  out.insert(out.end(), ns, ns + 11);
  out.push_back(3);
  out.push_back(1);
  detail::push_u16(out, 0);  // loop forever
  out.push_back(0);

  for (const auto& frame : frames) {
    out.push_back(0x21);  // graphic control extension
    out.push_back(0xF9);
    out.push_back(4);
    out.push_back(0);
    detail::push_u16(out, delay_cs);
    out.push_back(0);
    out.push_back(0);

    out.push_back(0x2C);  // image descriptor
    detail::push_u16(out, 0);
    detail::push_u16(out, 0);
    detail::push_u16(out, w);
    detail::push_u16(out, h);
    out.push_back(0);  // no local color table

    detail::GifLzw lzw(out);
    lzw.encode(frame.idx);
  }
  out.push_back(0x3B);  // trailer

  std::ofstream f(path, std::ios::binary);
  CSEG_RUNTIME_CHECK(f.good(), "cannot write gif: " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

}  // namespace counterseg

#endif
