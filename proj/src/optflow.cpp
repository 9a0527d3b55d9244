#include "tsnet/optflow.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <cmath>
#include <vector>

#include "tsnet/error.hpp"

namespace tsnet {

namespace {

using Eigen::Index;

// Added to det(G) so textureless pixels relax to zero flow.
constexpr double kDetRegularizer = 1e-3;
// Coarser levels are skipped: periodic texture aliases below this size.
constexpr Index kMinLevelSide = 32;

Index clamp_index(Index i, Index n) { return std::clamp<Index>(i, 0, n - 1); }

// out(y, x) = sum_t k[t] * in(y, x + t - r), replicated borders.
GrayImage correlate_rows(const GrayImage& in, const std::vector<double>& k) {
  const Index r = static_cast<Index>(k.size() / 2);
  GrayImage out(in.rows(), in.cols());
  for (Index y = 0; y < in.rows(); ++y) {
    for (Index x = 0; x < in.cols(); ++x) {
      double s = 0.0;
      for (Index t = 0; t < static_cast<Index>(k.size()); ++t) {
        s += k[static_cast<std::size_t>(t)] * in(y, clamp_index(x + t - r, in.cols()));
      }
      out(y, x) = s;
    }
  }
  return out;
}

GrayImage correlate_cols(const GrayImage& in, const std::vector<double>& k) {
  const Index r = static_cast<Index>(k.size() / 2);
  GrayImage out = GrayImage::Zero(in.rows(), in.cols());
  for (Index t = 0; t < static_cast<Index>(k.size()); ++t) {
    const double kt = k[static_cast<std::size_t>(t)];
    for (Index y = 0; y < in.rows(); ++y) out.row(y) += kt * in.row(clamp_index(y + t - r, in.rows()));
  }
  return out;
}

GrayImage separable(const GrayImage& in, const std::vector<double>& kx, const std::vector<double>& ky) {
  return correlate_cols(correlate_rows(in, kx), ky);
}

std::vector<double> gaussian_kernel(double sigma, int radius) {
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int t = -radius; t <= radius; ++t) {
    const double w = std::exp(-(t * t) / (2.0 * sigma * sigma));
    k[static_cast<std::size_t>(t + radius)] = w;
    total += w;
  }
  for (double& w : k) w /= total;
  return k;
}

GrayImage gaussian_blur(const GrayImage& in, double sigma) {
  if (sigma <= 0.0) return in;
  const auto k = gaussian_kernel(sigma, std::max(1, static_cast<int>(std::ceil(3.0 * sigma))));
  return separable(in, k, k);
}

GrayImage box_mean(const GrayImage& in, int side) {
  const std::vector<double> k(static_cast<std::size_t>(side), 1.0 / side);
  return separable(in, k, k);
}

// Bilinear resample with pixel-centre alignment.
GrayImage resize(const GrayImage& in, Index rows, Index cols) {
  GrayImage out(rows, cols);
  const double sy = static_cast<double>(in.rows()) / static_cast<double>(rows);
  const double sx = static_cast<double>(in.cols()) / static_cast<double>(cols);
  for (Index y = 0; y < rows; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(in.rows() - 1));
    const Index y0 = static_cast<Index>(fy);
    const Index y1 = std::min(y0 + 1, in.rows() - 1);
    const double wy = fy - static_cast<double>(y0);
    for (Index x = 0; x < cols; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(in.cols() - 1));
      const Index x0 = static_cast<Index>(fx);
      const Index x1 = std::min(x0 + 1, in.cols() - 1);
      const double wx = fx - static_cast<double>(x0);
      out(y, x) = (1 - wy) * ((1 - wx) * in(y0, x0) + wx * in(y0, x1)) +
                  wy * ((1 - wx) * in(y1, x0) + wx * in(y1, x1));
    }
  }
  return out;
}

struct NormalEquations {
  GrayImage g11, g12, g22, h1, h2;
};

// Builds G = A^T A and h = A^T db per pixel from the two expansions, with
// the second expansion sampled at the displaced position.
NormalEquations update_matrices(const PolyExpansion& e0, const PolyExpansion& e1, const FlowField& flow) {
  const Index rows = flow.height(), cols = flow.width();
  NormalEquations m{GrayImage(rows, cols), GrayImage(rows, cols), GrayImage(rows, cols),
                    GrayImage(rows, cols), GrayImage(rows, cols)};
  for (Index y = 0; y < rows; ++y) {
    for (Index x = 0; x < cols; ++x) {
      const double dx = flow.u(y, x), dy = flow.v(y, x);
      const double fx = static_cast<double>(x) + dx, fy = static_cast<double>(y) + dy;
      double b1n = 0.0, b2n = 0.0, a11, a22, a12;
      if (fx >= 0.0 && fy >= 0.0 && fx <= static_cast<double>(cols - 1) &&
          fy <= static_cast<double>(rows - 1)) {
        const Index x0 = static_cast<Index>(fx), y0 = static_cast<Index>(fy);
        const Index x1 = std::min(x0 + 1, cols - 1), y1 = std::min(y0 + 1, rows - 1);
        const double wx = fx - static_cast<double>(x0), wy = fy - static_cast<double>(y0);
        auto sample = [&](const GrayImage& p) {
          return (1 - wy) * ((1 - wx) * p(y0, x0) + wx * p(y0, x1)) +
                 wy * ((1 - wx) * p(y1, x0) + wx * p(y1, x1));
        };
        b1n = sample(e1.b1);
        b2n = sample(e1.b2);
        a11 = 0.5 * (e0.a11(y, x) + sample(e1.a11));
        a22 = 0.5 * (e0.a22(y, x) + sample(e1.a22));
        a12 = 0.5 * (e0.a12(y, x) + sample(e1.a12));
      } else {
        // Displaced outside the frame: only the first expansion is usable.
        a11 = e0.a11(y, x);
        a22 = e0.a22(y, x);
        a12 = e0.a12(y, x);
      }
      const double db1 = 0.5 * (e0.b1(y, x) - b1n) + a11 * dx + a12 * dy;
      const double db2 = 0.5 * (e0.b2(y, x) - b2n) + a12 * dx + a22 * dy;
      m.g11(y, x) = a11 * a11 + a12 * a12;
      m.g12(y, x) = a12 * (a11 + a22);
      m.g22(y, x) = a22 * a22 + a12 * a12;
      m.h1(y, x) = a11 * db1 + a12 * db2;
      m.h2(y, x) = a12 * db1 + a22 * db2;
    }
  }
  return m;
}

void solve_flow(const NormalEquations& m, int window, FlowField& flow) {
  const GrayImage g11 = box_mean(m.g11, window), g12 = box_mean(m.g12, window),
                  g22 = box_mean(m.g22, window), h1 = box_mean(m.h1, window),
                  h2 = box_mean(m.h2, window);
  for (Index y = 0; y < flow.height(); ++y) {
    for (Index x = 0; x < flow.width(); ++x) {
      const double det = g11(y, x) * g22(y, x) - g12(y, x) * g12(y, x) + kDetRegularizer;
      flow.u(y, x) = (g22(y, x) * h1(y, x) - g12(y, x) * h2(y, x)) / det;
      flow.v(y, x) = (g11(y, x) * h2(y, x) - g12(y, x) * h1(y, x)) / det;
    }
  }
}

float to_f32(double v) { return static_cast<float>(v); }

void put_u32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                     static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  out.write(b, 4);
}

void put_f32(std::ofstream& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

bool get_u32(std::ifstream& in, std::uint32_t& v) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

constexpr char kFlowMagic[8] = {'F', 'L', 'O', 'W', '0', '0', '0', '1'};

}  // namespace

void FlowParams::validate() const {
  if (!(pyramid_scale > 0.0 && pyramid_scale < 1.0)) throw UsageError("flow: pyramid_scale must lie in (0, 1)");
  if (levels < 1) throw UsageError("flow: levels must be >= 1");
  if (window_size < 3 || window_size % 2 == 0) throw UsageError("flow: window_size must be odd and >= 3");
  if (iterations < 1) throw UsageError("flow: iterations must be >= 1");
  if (poly_n < 3 || poly_n % 2 == 0) throw UsageError("flow: poly_n must be odd and >= 3");
  if (!(poly_sigma > 0.0)) throw UsageError("flow: poly_sigma must be positive");
}

PolyExpansion polynomial_expansion(const GrayImage& image, int poly_n, double poly_sigma) {
  if (poly_n < 3 || poly_n % 2 == 0) throw UsageError("polynomial_expansion: poly_n must be odd and >= 3");
  if (!(poly_sigma > 0.0)) throw UsageError("polynomial_expansion: poly_sigma must be positive");
  if (image.rows() <= poly_n || image.cols() <= poly_n) {
    throw UsageError("polynomial_expansion: image " + std::to_string(image.rows()) + "x" +
                     std::to_string(image.cols()) + " not larger than window " +
                     std::to_string(poly_n));
  }
  const int r = poly_n / 2;
  std::vector<double> g0, g1, g2;
  for (int t = -r; t <= r; ++t) {
    const double w = std::exp(-(t * t) / (2.0 * poly_sigma * poly_sigma));
    g0.push_back(w);
    g1.push_back(w * t);
    g2.push_back(w * t * t);
  }

  // Gram matrix of the basis {1, x, y, x^2, y^2, xy} under the applicability.
  Eigen::Matrix<double, 6, 6> gram = Eigen::Matrix<double, 6, 6>::Zero();
  for (int y = -r; y <= r; ++y) {
    for (int x = -r; x <= r; ++x) {
      const double w = g0[static_cast<std::size_t>(x + r)] * g0[static_cast<std::size_t>(y + r)];
      Eigen::Matrix<double, 6, 1> b;
      b << 1.0, x, y, x * x, y * y, x * y;
      gram += w * b * b.transpose();
    }
  }
  const Eigen::Matrix<double, 6, 6> inv = gram.inverse();

  const GrayImage h0 = correlate_rows(image, g0);
  const GrayImage h1 = correlate_rows(image, g1);
  const GrayImage h2 = correlate_rows(image, g2);
  const std::array<GrayImage, 6> proj = {
      correlate_cols(h0, g0),  // 1
      correlate_cols(h1, g0),  // x
      correlate_cols(h0, g1),  // y
      correlate_cols(h2, g0),  // x^2
      correlate_cols(h0, g2),  // y^2
      correlate_cols(h1, g1),  // xy
  };
  auto coefficient = [&](int i) {
    GrayImage out = inv(i, 0) * proj[0];
    for (int j = 1; j < 6; ++j) out += inv(i, j) * proj[static_cast<std::size_t>(j)];
    return out;
  };

  PolyExpansion e;
  e.c = coefficient(0);
  e.b1 = coefficient(1);
  e.b2 = coefficient(2);
  e.a11 = coefficient(3);
  e.a22 = coefficient(4);
  e.a12 = 0.5 * coefficient(5);
  return e;
}

FlowField estimate_flow(const GrayImage& prev, const GrayImage& next, const FlowParams& params) {
  params.validate();
  if (prev.rows() != next.rows() || prev.cols() != next.cols()) {
    throw UsageError("estimate_flow: frame sizes differ (" + std::to_string(prev.rows()) + "x" +
                     std::to_string(prev.cols()) + " vs " + std::to_string(next.rows()) + "x" +
                     std::to_string(next.cols()) + ")");
  }
  if (prev.rows() <= params.poly_n || prev.cols() <= params.poly_n) {
    throw UsageError("estimate_flow: frames smaller than the expansion window");
  }

  FlowField flow;
  int coarser = -1;
  for (int level = params.levels - 1; level >= 0; --level) {
    const double s = std::pow(params.pyramid_scale, level);
    const Index rows = static_cast<Index>(std::lround(static_cast<double>(prev.rows()) * s));
    const Index cols = static_cast<Index>(std::lround(static_cast<double>(prev.cols()) * s));
    if (level > 0 && (rows < kMinLevelSide || cols < kMinLevelSide)) continue;

    GrayImage i0 = prev, i1 = next;
    if (level > 0) {
      const double sigma = (1.0 / s - 1.0) * 0.5;
      i0 = resize(gaussian_blur(prev, sigma), rows, cols);
      i1 = resize(gaussian_blur(next, sigma), rows, cols);
    }
    const PolyExpansion e0 = polynomial_expansion(i0, params.poly_n, params.poly_sigma);
    const PolyExpansion e1 = polynomial_expansion(i1, params.poly_n, params.poly_sigma);

    if (coarser < 0) {
      flow = FlowField(rows, cols);
    } else {
      const double up = std::pow(1.0 / params.pyramid_scale, coarser - level);
      FlowField finer;
      finer.u = up * resize(flow.u, rows, cols);
      finer.v = up * resize(flow.v, rows, cols);
      flow = std::move(finer);
    }
    for (int it = 0; it < params.iterations; ++it) {
      solve_flow(update_matrices(e0, e1, flow), params.window_size, flow);
    }
    coarser = level;
  }
  return flow;
}

ColorImage encode_flow_rgb(const FlowField& flow, double max_magnitude) {
  if (!(max_magnitude > 0.0)) throw UsageError("encode_flow_rgb: max_magnitude must be positive");
  ColorImage out(flow.height(), flow.width());
  for (Index y = 0; y < flow.height(); ++y) {
    for (Index x = 0; x < flow.width(); ++x) {
      const double u = flow.u(y, x), v = flow.v(y, x);
      const double sat = std::min(std::hypot(u, v) / max_magnitude, 1.0);
      double hue = std::atan2(v, u) * (180.0 / M_PI);
      if (hue < 0.0) hue += 360.0;
      const double h6 = hue / 60.0;
      const double chroma = sat;
      const double second = chroma * (1.0 - std::abs(std::fmod(h6, 2.0) - 1.0));
      double r = 0, g = 0, b = 0;
      switch (static_cast<int>(h6) % 6) {
        case 0: r = chroma, g = second; break;
        case 1: r = second, g = chroma; break;
        case 2: g = chroma, b = second; break;
        case 3: g = second, b = chroma; break;
        case 4: r = second, b = chroma; break;
        default: r = chroma, b = second; break;
      }
      const double m = 1.0 - chroma;
      out[0](y, x) = std::round(255.0 * (r + m));
      out[1](y, x) = std::round(255.0 * (g + m));
      out[2](y, x) = std::round(255.0 * (b + m));
    }
  }
  return out;
}

FlowField flip_horizontal(const FlowField& flow) {
  FlowField out;
  out.u = -flip_horizontal(flow.u);
  out.v = flip_horizontal(flow.v);
  return out;
}

FlowField to_cache_precision(const FlowField& flow) {
  FlowField out;
  out.u = flow.u.unaryExpr([](double v) { return static_cast<double>(to_f32(v)); });
  out.v = flow.v.unaryExpr([](double v) { return static_cast<double>(to_f32(v)); });
  return out;
}

void write_flow(const std::filesystem::path& path, const FlowField& flow) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write flow cache " + path.string());
  out.write(kFlowMagic, 8);
  put_u32(out, static_cast<std::uint32_t>(flow.width()));
  put_u32(out, static_cast<std::uint32_t>(flow.height()));
  for (Index y = 0; y < flow.height(); ++y) {
    for (Index x = 0; x < flow.width(); ++x) {
      put_f32(out, to_f32(flow.u(y, x)));
      put_f32(out, to_f32(flow.v(y, x)));
    }
  }
  if (!out) throw DataError("failed writing flow cache " + path.string());
}

FlowField read_flow(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open flow cache " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kFlowMagic)) {
    throw DataError(path.string() + ": bad flow cache magic");
  }
  std::uint32_t w = 0, h = 0;
  if (!get_u32(in, w) || !get_u32(in, h)) throw DataError(path.string() + ": truncated flow header");
  if (w == 0 || h == 0) throw DataError(path.string() + ": empty flow dimensions");
  FlowField flow(h, w);
  for (Index y = 0; y < flow.height(); ++y) {
    for (Index x = 0; x < flow.width(); ++x) {
      std::uint32_t bu, bv;
      if (!get_u32(in, bu) || !get_u32(in, bv)) throw DataError(path.string() + ": truncated flow payload");
      float fu, fv;
      std::memcpy(&fu, &bu, 4);
      std::memcpy(&fv, &bv, 4);
      flow.u(y, x) = fu;
      flow.v(y, x) = fv;
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError(path.string() + ": trailing bytes in flow cache");
  return flow;
}

}  // namespace tsnet
