#pragma once

#include <filesystem>

#include "tsnet/image.hpp"

namespace tsnet {

/// Bumped whenever estimate_flow changes its output; part of the flow cache identity.
inline constexpr int kFlowEstimatorVersion = 2;

/// Parameters of the pyramidal polynomial-expansion flow estimator.
struct FlowParams {
  double pyramid_scale = 0.5;  // per-level downscale, in (0, 1)
  int levels = 3;
  int window_size = 15;  // odd, side of the box window averaging the normal equations
  int iterations = 3;
  int poly_n = 5;  // odd, side of the Gaussian applicability window
  double poly_sigma = 1.2;

  /// Throws UsageError on out-of-range values.
  void validate() const;
};

/// Per-pixel displacement in pixels/frame. u is positive rightwards, v downwards.
struct FlowField {
  GrayImage u;
  GrayImage v;

  FlowField() = default;
  FlowField(Eigen::Index height, Eigen::Index width)
      : u(GrayImage::Zero(height, width)), v(GrayImage::Zero(height, width)) {}

  Eigen::Index height() const { return u.rows(); }
  Eigen::Index width() const { return u.cols(); }
  GrayImage magnitude() const { return (u.square() + v.square()).sqrt(); }
};

/// Local quadratic model f(p + d) ~ d^T A d + b^T d + c at every pixel, with
/// A = [[a11, a12], [a12, a22]] and d = (x, y).
struct PolyExpansion {
  GrayImage a11, a12, a22;
  GrayImage b1, b2;
  GrayImage c;
};

/// Gaussian-weighted least-squares fit of {1, x, y, x^2, y^2, xy} over a
/// poly_n x poly_n window, computed separably with replicated borders.
/// Requires both image extents to exceed poly_n.
PolyExpansion polynomial_expansion(const GrayImage& image, int poly_n, double poly_sigma);

/// Dense flow from `prev` to `next`: coarse-to-fine over the pyramid, with
/// `iterations` displacement refinements per level. Pixels whose averaged
/// normal matrix is near singular (det < 1e-12) keep their current
/// displacement. Pyramid levels whose image would be no larger than poly_n
/// are skipped.
FlowField estimate_flow(const GrayImage& prev, const GrayImage& next, const FlowParams& params = {});

/// HSV colour wheel: hue = atan2(v, u) (0 rad is red), saturation =
/// min(|(u, v)| / max_magnitude, 1), value = 1, rounded to 0..255.
ColorImage encode_flow_rgb(const FlowField& flow, double max_magnitude);

/// Mirror left-right; the horizontal component changes sign.
FlowField flip_horizontal(const FlowField& flow);

/// Rounds every component to float32, the precision of the flow cache.
FlowField to_cache_precision(const FlowField& flow);

/// Cache layout: "FLOW0001", u32 LE width, u32 LE height, then height*width
/// (u, v) pairs of f32 LE, row-major.
void write_flow(const std::filesystem::path& path, const FlowField& flow);
FlowField read_flow(const std::filesystem::path& path);

}  // namespace tsnet
