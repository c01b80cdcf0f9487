#include "segcvae/gradcheck.hpp"

#include <cmath>
#include <limits>

#include "segcvae/errors.hpp"

namespace segcvae::ad {

GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<Tensor> inputs,
                           const GradCheckOptions& options) {
  for (auto& t : inputs) {
    if (!t.requires_grad()) throw DomainError("grad_check: input without requires_grad");
    t.zero_grad();
  }
  Tensor out = f();
  out.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t.grad());

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k].size(); ++i) coords.emplace_back(k, i);
  if (options.sample && *options.sample < coords.size()) {
    Rng rng(options.sample_seed);
    // partial Fisher-Yates
    for (std::size_t i = 0; i < *options.sample; ++i) {
      std::size_t j = i + rng.below(coords.size() - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(*options.sample);
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (auto [k, i] : coords) {
    auto values = inputs[k].mutable_values();
    const double original = values[i];
    auto at = [&](double offset) {
      values[i] = original + offset;
      const double v = f().item();
      values[i] = original;
      return v;
    };
    const double h = options.h;
    double numeric = (at(h) - at(-h)) / (2.0 * h);
    if (options.fourth_order) numeric = (4.0 * numeric - (at(2 * h) - at(-2 * h)) / (4.0 * h)) / 3.0;
    const double a = analytic[k][i];
    double err;
    if (std::fabs(a) < options.zero_floor && std::fabs(numeric) < options.zero_floor) {
      err = std::fabs(a - numeric) / options.zero_floor;
    } else {
      err = std::fabs(a - numeric) / (std::fabs(a) + std::fabs(numeric) + 1e-12);
    }
    if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
    ++result.coordinates;
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return result;
}

}  // namespace segcvae::ad
