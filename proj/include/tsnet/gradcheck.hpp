#pragma once

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tsnet/tensor.hpp"

namespace tsnet {

using ConvFn = std::function<Tensor(const Tensor&, const Tensor&, const Tensor&, std::size_t, std::size_t)>;

struct GradCheckOptions {
  int trials = 20;
  double eps = 1e-6;
  double tolerance = 1e-6;
  std::uint64_t seed = 1;
  ConvFn conv = conv2d;  // swapped out by mutation tests
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  int trials = 0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  bool passed() const;
  nlohmann::json to_json() const;
};

/// Central-difference checks of every differentiable op (each argument
/// separately) and of the two-stream MTL loss with respect to every model
/// parameter, over `trials` seeded draws each.
GradCheckReport run_gradcheck_suite(const GradCheckOptions& options = {});

/// Identity in the forward pass with a negated gradient.
Tensor flip_gradient(const Tensor& x);

}  // namespace tsnet
