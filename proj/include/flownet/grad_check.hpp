#pragma once

#include <functional>

#include "flownet/tensor.hpp"

namespace flownet {

// Compares reverse-mode gradients against central finite differences.
//
// `f` evaluates the scalar loss from the current parameter values; it must be
// deterministic. The analytic side runs once on a fresh tape; the numeric
// side re-evaluates f untaped with each parameter element nudged by +/- eps.
// Returns the max over elements of |analytic - numeric| / max(|analytic|,
// |numeric|, 1e-12).
template <typename T>
double grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params, T eps = T(1e-5)) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }

    std::vector<std::vector<T>> analytic;
    {
        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        Tensor<T> loss = f();
        if (!loss.all_finite()) throw std::runtime_error("grad_check: non-finite loss");
        tape.backward(loss);
        for (const auto& p : params) analytic.push_back(p.grad());
    }

    const auto eval = [&]() -> double {
        Tensor<T> loss = f();
        const double v = static_cast<double>(loss.item());
        if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss during perturbation");
        return v;
    };

    double worst = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        T* vals = params[i].data();
        for (std::size_t j = 0; j < params[i].size(); ++j) {
            const T keep = vals[j];
            vals[j] = keep + eps;
            const double up = eval();
            vals[j] = keep - eps;
            const double dn = eval();
            vals[j] = keep;
            const double numeric = (up - dn) / (2.0 * static_cast<double>(eps));
            const double a = static_cast<double>(analytic[i][j]);
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace flownet
