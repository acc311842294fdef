#pragma once

// Central finite-difference checks of tape gradients in double precision.
//
// Per checked tensor the error is max_j |analytic_j - numeric_j| over the
// checked coordinates, divided by max(1e-6, max |analytic|, max |numeric|).
// A suite reports the worst tensor.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "hvm/tensor.hpp"

namespace hvm {

inline constexpr double kGradcheckStep = 1e-4;
inline constexpr double kModuleTolerance = 1e-4;
inline constexpr double kEndToEndTolerance = 1e-3;
inline constexpr double kRelErrorFloor = 1e-6;

struct GradcheckReport {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t coordinates = 0;  // finite-difference probes (coordinates or directions)
  double seconds = 0;
  std::string worst;  // tensor (or direction) with the largest error
  bool passed() const { return max_rel_error < tolerance; }
};

struct GradcheckOptions {
  double step = kGradcheckStep;
  std::uint64_t seed = 7;
  // End-to-end sampling; see check_end_to_end.
  std::size_t e2e_coordinates = 384;
  std::size_t e2e_directions = 4;
};

using NamedTensor = std::pair<std::string, Tensor<double>>;

// Probes every coordinate of every target unless `max_per_tensor` > 0, in which
// case each tensor gets that many distinct random coordinates.
GradcheckReport check_gradients(const std::string& name, const std::vector<NamedTensor>& targets,
                                const std::function<Tensor<double>()>& loss, double tolerance, double step,
                                std::size_t max_per_tensor = 0, std::uint64_t seed = 0);

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric, double scale);

std::vector<std::string> gradcheck_suites();
// `only` filters by exact suite name or by prefix ending in '*'.
std::vector<GradcheckReport> run_gradcheck(const GradcheckOptions& options, const std::vector<std::string>& only = {},
                                           const std::function<void(const GradcheckReport&)>& on_report = {});

}  // namespace hvm
