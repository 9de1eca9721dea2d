#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace smil {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

// Central finite differences (64-bit, step 1e-6) against every analytic
// backward pass: dense layers, activations, pools, softmax + cross-entropy,
// sparse convolution and pooling, the five bag poolings, and end-to-end tiny
// models. Each check repeats over fresh random draws.
std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed = 2024);

bool gradcheck_all_pass(const std::vector<GradCheckResult>& results);

// Max relative error between analytic gradients and central differences of
// `loss` with respect to `values`, shared by the suite and the tests.
double finite_difference_max_err(std::vector<double>& values,
                                 const std::function<double()>& loss,
                                 const std::vector<double>& analytic, double step = 1e-6);

}  // namespace smil
