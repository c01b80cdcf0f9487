#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "segcvae/rng.hpp"
#include "segcvae/tensor.hpp"

namespace segcvae::ad {

struct GradCheckOptions {
  double h = 1e-6;
  /// Five-point stencil (error O(h^4)) instead of the two-point one, which
  /// permits a larger h and so less rounding noise on long computations.
  bool fourth_order = false;
  /// Entries where both gradients are below this magnitude have their
  /// difference measured against the floor instead of their own size, since
  /// finite differences cannot resolve them relatively.
  double zero_floor = 1e-8;
  /// When set, only this many randomly chosen coordinates per call are probed.
  std::optional<std::size_t> sample = std::nullopt;
  std::uint64_t sample_seed = 1;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar function with central
/// differences. The function is re-evaluated with each input entry nudged by
/// plus and minus h; inputs must be leaves with requires_grad set. Relative
/// error per entry is |a - n| / (|a| + |n| + 1e-12).
GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs,
                           const GradCheckOptions& options = {});

}  // namespace segcvae::ad
