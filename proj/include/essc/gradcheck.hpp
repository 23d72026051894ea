#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "essc/common.hpp"
#include "essc/tensor.hpp"

namespace essc {

// Central finite-difference verification of every differentiable operation.
// Each registered case builds a scalar loss from fresh random leaves; the
// checker compares analytic gradients from backward() against central
// differences, coordinate by coordinate.

struct GradCheckOptions {
    int trials = 10;
    double eps = 1e-5;
    double tol = 1e-4;
    uint64_t seed = 20240;
    // Test fixture: perturbs one analytic gradient so the check must fail.
    bool corrupt_backward = false;
};

struct GradCheckReport {
    std::string op;
    int trials = 0;
    double max_rel_err = 0.0;
    bool pass = false;
};

struct GradCaseInstance {
    std::vector<Tensor> leaves;            // requires_grad inputs to perturb
    std::function<Tensor()> forward;       // rebuilds the scalar loss from the leaves
};

struct GradCase {
    std::string name;
    std::function<GradCaseInstance(Rng&)> make;
};

const std::vector<GradCase>& grad_check_registry();
std::vector<std::string> grad_check_op_names();

// filter empty = run everything; unknown names are rejected.
std::vector<GradCheckReport> run_grad_checks(const std::string& filter,
                                             const GradCheckOptions& opts = {});

}  // namespace essc
