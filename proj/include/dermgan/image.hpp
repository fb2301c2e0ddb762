#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace dermgan {

/// 8-bit interleaved RGB, row-major.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}

  [[nodiscard]] uint8_t& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  [[nodiscard]] uint8_t at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// H x W x 3 real image with values in [-1, 1], interleaved like RgbImage.
struct ImageTensor {
  int width = 0;
  int height = 0;
  std::vector<float> values;

  ImageTensor() = default;
  ImageTensor(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h * 3, 0.0f) {}

  [[nodiscard]] float& at(int x, int y, int c) { return values[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  [[nodiscard]] float at(int x, int y, int c) const {
    return values[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
};

/// v / 127.5 - 1
[[nodiscard]] ImageTensor to_image_tensor(const RgbImage& img);
/// Inverse map, rounded to nearest and clamped to [0, 255].
[[nodiscard]] RgbImage to_rgb_image(const ImageTensor& t);

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads any PNG libpng can decode, converted to 8-bit RGB.
[[nodiscard]] RgbImage read_png(const std::filesystem::path& path);
/// Writes 8-bit RGB with fixed compression settings (byte-stable output).
void write_png(const std::filesystem::path& path, const RgbImage& img);
/// Width and height from the IHDR chunk without decoding pixels.
[[nodiscard]] std::pair<int, int> read_png_size(const std::filesystem::path& path);

/// Row-major grid of equally sized tiles, `columns` per row, with a gap.
[[nodiscard]] RgbImage contact_sheet(const std::vector<RgbImage>& tiles, int columns, int gap = 2);

}  // namespace dermgan
