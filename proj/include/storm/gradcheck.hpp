#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "storm/attention.hpp"

namespace storm {

struct GradCheckResult {
  std::string name;
  std::size_t coordinates = 0;
  double max_relative_error = 0.0;
  bool passed = false;
};

/// Builds a scalar loss on a fresh tape.
using LossBuilder = std::function<Var(Context&)>;

/// Relative error |a - b| / max(|a|, |b|, floor); the floor keeps
/// coordinates with vanishing gradients from dominating.
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Compares the reverse-mode gradient of every parameter coordinate with a
/// five-point central difference of step `step`.
GradCheckResult check_parameter_gradients(const std::string& name, ParameterStore& store, const LossBuilder& loss,
                                          double tolerance = 1e-4, double step = 1e-4);

/// Finite-difference checks of the three training losses on tiny models
/// (D=8, L=2, N=5, Q=3) and of the differentiable primitives.
std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed = 1);

}  // namespace storm
