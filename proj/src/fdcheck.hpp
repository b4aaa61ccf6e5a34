#pragma once

#include <functional>

#include "tensor.hpp"

namespace moelab {

struct FdReport {
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    int64_t worst_index = -1;
    bool pass = false;
};

// Central-difference gradient check of a scalar-valued function at x.
// Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
// Requires a 64-bit x; numeric probes run without taping.
FdReport finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                 double step, double tolerance);

} // namespace moelab
