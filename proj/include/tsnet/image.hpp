#pragma once

#include <Eigen/Core>

#include <array>
#include <filesystem>

namespace tsnet {

/// Row-major 2-D array; rows index y (downwards), columns index x (rightwards).
template <typename Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Single-channel image with intensities on the 0..255 scale.
using GrayImage = Plane<double>;

/// R, G, B planes on the 0..255 scale.
struct ColorImage {
  std::array<GrayImage, 3> channels;

  ColorImage() = default;
  ColorImage(Eigen::Index height, Eigen::Index width);

  Eigen::Index height() const { return channels[0].rows(); }
  Eigen::Index width() const { return channels[0].cols(); }
  GrayImage& operator[](std::size_t c) { return channels[c]; }
  const GrayImage& operator[](std::size_t c) const { return channels[c]; }

  bool operator==(const ColorImage& other) const;
};

/// Luma: 0.299 R + 0.587 G + 0.114 B.
GrayImage rgb_to_gray(const ColorImage& frame);

template <typename Derived>
auto flip_horizontal(const Eigen::DenseBase<Derived>& plane) {
  return plane.rowwise().reverse();
}

ColorImage flip_horizontal(const ColorImage& image);

/// Round and clamp every channel to integers in [0, 255].
ColorImage quantize(const ColorImage& image);

/// Binary PPM (P6, maxval 255). Values are rounded and clamped.
void write_ppm(const std::filesystem::path& path, const ColorImage& image);
void write_png(const std::filesystem::path& path, const ColorImage& image);

/// Reads .ppm (P6) or .png (8-bit RGB/RGBA/gray) based on the extension.
ColorImage read_image(const std::filesystem::path& path);

}  // namespace tsnet
