#include "fdcheck.hpp"

#include <cmath>

namespace moelab {

FdReport finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                 double step, double tolerance) {
    if (x.dtype() != DType::F64) fail("finite_difference_check: x must be f64");

    Tensor probe = x.detach();
    probe.set_requires_grad(true);
    Tensor y = f(probe);
    if (y.numel() != 1) {
        fail("finite_difference_check: f must be scalar-valued, got shape " +
             shape_str(y.shape()));
    }
    backward(y);
    if (!probe.has_grad()) fail("finite_difference_check: x received no gradient");

    std::vector<double> analytic(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i) analytic[static_cast<size_t>(i)] = probe.grad_flat(i);

    FdReport rep;
    rep.tolerance = tolerance;
    Tensor work = x.detach();
    auto vals = work.vals<double>();
    NoGradGuard ng;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double orig = vals[static_cast<size_t>(i)];
        vals[static_cast<size_t>(i)] = orig + step;
        const double fp = f(work).item();
        vals[static_cast<size_t>(i)] = orig - step;
        const double fm = f(work).item();
        vals[static_cast<size_t>(i)] = orig;
        const double numeric = (fp - fm) / (2.0 * step);
        const double err = std::abs(analytic[static_cast<size_t>(i)] - numeric) /
                           std::max(1.0, std::abs(numeric));
        if (err > rep.max_rel_err) {
            rep.max_rel_err = err;
            rep.worst_index = i;
        }
    }
    rep.pass = rep.max_rel_err < tolerance;
    return rep;
}

} // namespace moelab
