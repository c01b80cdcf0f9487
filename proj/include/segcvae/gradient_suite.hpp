#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "segcvae/gradcheck.hpp"

namespace segcvae {

/// One finite-difference check that builds its own random configuration from a seed.
struct NamedGradCheck {
  std::string name;
  std::function<ad::GradCheckResult(std::uint64_t seed)> run;
};

/// Every differentiable primitive, on random small shapes.
std::vector<NamedGradCheck> primitive_grad_checks();
/// elbo, the three semantic norms, and the full objective on random small
/// SegCVAE configurations (M in {1,2,3}, chan = 2, N_hid = 8).
std::vector<NamedGradCheck> loss_grad_checks();

struct SuiteOutcome {
  std::string name;
  std::size_t configs = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

/// Runs each check over seeds [0, configs) and reports the worst error per check.
std::vector<SuiteOutcome> run_grad_suite(const std::vector<NamedGradCheck>& checks, std::size_t configs,
                                         double tolerance);

}  // namespace segcvae
