#pragma once

// Shared oracles for the test suites. Nothing here calls Tape::backward, so
// finite differences stay independent of the analytic gradients they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "relsearch/autodiff.hpp"
#include "relsearch/search_space.hpp"
#include "relsearch/tensor.hpp"

namespace test_support {

using relsearch::ParamSet;
using relsearch::Rng;
using relsearch::Shape;
using relsearch::Tensor;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape), 0.0);
    std::uniform_real_distribution<double> d(lo, hi);
    for (double& v : t.data) v = d(rng);
    return t;
}

// Relative error with an absolute floor: gradients below the floor in
// magnitude are compared absolutely (error / floor). Central differences at
// step 1e-5 carry about 1e-9 of rounding noise on the losses used here, which
// makes a pure ratio meaningless for gradients that are structurally zero.
inline constexpr double kGradFloor = 1e-4;

inline double rel_error(double analytic, double numeric, double floor = kGradFloor) {
    return std::abs(analytic - numeric) /
           std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct FdReport {
    double max_rel = 0.0;
    std::size_t entries = 0;
    std::string worst_role;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Central differences over up to `per_tensor` random entries of every
// parameter tensor (all entries when per_tensor is 0). Analytic gradients are
// read from params[i].grad, which the caller fills beforehand.
inline FdReport fd_check_params(ParamSet& params, const std::function<double()>& loss, Rng& rng,
                                std::size_t per_tensor = 0, double step = 1e-5,
                                double floor = kGradFloor) {
    FdReport r;
    for (auto& p : params.tensors()) {
        const std::size_t n = p.value.numel();
        std::vector<std::size_t> picks;
        if (per_tensor == 0 || per_tensor >= n) {
            for (std::size_t i = 0; i < n; ++i) picks.push_back(i);
        } else {
            std::uniform_int_distribution<std::size_t> d(0, n - 1);
            for (std::size_t i = 0; i < per_tensor; ++i) picks.push_back(d(rng));
        }
        for (std::size_t i : picks) {
            const double saved = p.value[i];
            p.value[i] = saved + step;
            const double up = loss();
            p.value[i] = saved - step;
            const double down = loss();
            p.value[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double e = rel_error(p.grad[i], numeric, floor);
            ++r.entries;
            if (e > r.max_rel) {
                r.max_rel = e;
                r.worst_role = p.role + "[" + std::to_string(i) + "]";
                r.worst_analytic = p.grad[i];
                r.worst_numeric = numeric;
            }
        }
    }
    return r;
}

// Central differences of loss with respect to every entry of `x`.
inline double fd_check_tensor(Tensor& x, const Tensor& analytic,
                              const std::function<double()>& loss, double step = 1e-5,
                              double floor = kGradFloor) {
    double worst = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double saved = x[i];
        x[i] = saved + step;
        const double up = loss();
        x[i] = saved - step;
        const double down = loss();
        x[i] = saved;
        worst = std::max(worst, rel_error(analytic[i], (up - down) / (2.0 * step), floor));
    }
    return worst;
}

}  // namespace test_support
