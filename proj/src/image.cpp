#include "tsnet/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "tsnet/error.hpp"

namespace tsnet {

namespace {

std::uint8_t to_byte(double v) {
  const double r = std::round(v);
  return static_cast<std::uint8_t>(r < 0.0 ? 0.0 : (r > 255.0 ? 255.0 : r));
}

std::vector<std::uint8_t> interleave(const ColorImage& image) {
  const auto h = image.height(), w = image.width();
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(h * w * 3));
  std::size_t k = 0;
  for (Eigen::Index y = 0; y < h; ++y) {
    for (Eigen::Index x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) bytes[k++] = to_byte(image[c](y, x));
    }
  }
  return bytes;
}

ColorImage deinterleave(const std::uint8_t* bytes, Eigen::Index h, Eigen::Index w) {
  ColorImage image(h, w);
  for (Eigen::Index y = 0; y < h; ++y) {
    for (Eigen::Index x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) image[c](y, x) = *bytes++;
    }
  }
  return image;
}

// Reads the next whitespace-delimited PPM header token, skipping comments.
std::string ppm_token(std::istream& in) {
  std::string token;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string ignored;
      std::getline(in, ignored);
    } else if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!token.empty()) break;
    } else {
      token.push_back(ch);
    }
  }
  return token;
}

ColorImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  if (ppm_token(in) != "P6") throw DataError(path.string() + ": not a binary PPM (P6)");
  long w = 0, h = 0, maxval = 0;
  try {
    w = std::stol(ppm_token(in));
    h = std::stol(ppm_token(in));
    maxval = std::stol(ppm_token(in));
  } catch (const std::exception&) {
    throw DataError(path.string() + ": malformed PPM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) {
    throw DataError(path.string() + ": unsupported PPM geometry or maxval");
  }
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w * h * 3));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw DataError(path.string() + ": truncated PPM payload");
  }
  return deinterleave(bytes.data(), h, w);
}

ColorImage read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw DataError(path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataError(path.string() + ": " + img.message);
  }
  return deinterleave(bytes.data(), img.height, img.width);
}

}  // namespace

ColorImage::ColorImage(Eigen::Index height, Eigen::Index width) {
  for (auto& c : channels) c = GrayImage::Zero(height, width);
}

bool ColorImage::operator==(const ColorImage& other) const {
  for (std::size_t c = 0; c < 3; ++c) {
    if (channels[c].rows() != other[c].rows() || channels[c].cols() != other[c].cols()) return false;
    if ((channels[c] != other[c]).any()) return false;
  }
  return true;
}

GrayImage rgb_to_gray(const ColorImage& frame) {
  return 0.299 * frame[0] + 0.587 * frame[1] + 0.114 * frame[2];
}

ColorImage flip_horizontal(const ColorImage& image) {
  ColorImage out;
  for (std::size_t c = 0; c < 3; ++c) out[c] = flip_horizontal(image[c]);
  return out;
}

ColorImage quantize(const ColorImage& image) {
  ColorImage out;
  for (std::size_t c = 0; c < 3; ++c) out[c] = image[c].round().max(0.0).min(255.0);
  return out;
}

void write_ppm(const std::filesystem::path& path, const ColorImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write image " + path.string());
  out << "P6\n" << image.width() << ' ' << image.height() << "\n255\n";
  const auto bytes = interleave(image);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing image " + path.string());
}

void write_png(const std::filesystem::path& path, const ColorImage& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width());
  img.height = static_cast<png_uint_32>(image.height());
  img.format = PNG_FORMAT_RGB;
  const auto bytes = interleave(image);
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw DataError("cannot write png " + path.string() + ": " + img.message);
  }
}

ColorImage read_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".ppm") return read_ppm(path);
  if (ext == ".png") return read_png(path);
  throw DataError("unsupported image extension: " + path.string());
}

}  // namespace tsnet
