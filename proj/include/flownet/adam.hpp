#pragma once

#include <iostream>

#include "flownet/tensor.hpp"

namespace flownet {

// Adam moments for an ordered parameter list. The step counter is shared:
// one optimizer step advances every parameter once.
template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    long t = 0;
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);

    static AdamState init(const std::vector<Tensor<T>>& params) {
        AdamState s;
        s.m.reserve(params.size());
        s.v.reserve(params.size());
        for (const auto& p : params) {
            s.m.emplace_back(p.size(), T(0));
            s.v.emplace_back(p.size(), T(0));
        }
        return s;
    }
};

// Standard Adam update with bias correction. Returns false when the step was
// skipped because a gradient was non-finite (release builds warn and skip;
// debug builds treat it as an error).
template <typename T>
bool adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, T lr) {
    if (params.size() != state.m.size())
        throw std::invalid_argument("adam_step: state tracks " + std::to_string(state.m.size()) +
                                    " parameters, got " + std::to_string(params.size()));
    if (!(lr > T(0))) throw std::invalid_argument("adam_step: lr must be positive");

    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].grad().size() != params[i].size())
            throw std::invalid_argument("adam_step: parameter " + std::to_string(i) + " has no gradient");
        for (T g : params[i].grad()) {
            if (!std::isfinite(static_cast<double>(g))) {
#ifndef NDEBUG
                throw std::runtime_error("adam_step: non-finite gradient in parameter " + std::to_string(i));
#else
                std::cerr << "adam_step: non-finite gradient, skipping step " << (state.t + 1) << "\n";
                return false;
#endif
            }
        }
    }

    state.t += 1;
    const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta1), state.t));
    const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta2), state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        T* p = params[i].data();
        const T* g = params[i].grad().data();
        T* m = state.m[i].data();
        T* v = state.v[i].data();
        for (std::size_t j = 0; j < params[i].size(); ++j) {
            m[j] = state.beta1 * m[j] + (T(1) - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (T(1) - state.beta2) * g[j] * g[j];
            const T mhat = m[j] / bc1;
            const T vhat = v[j] / bc2;
            p[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
    return true;
}

// Global-norm gradient clipping (off unless max_norm > 0).
template <typename T>
void clip_grad_norm(std::vector<Tensor<T>>& params, T max_norm) {
    if (!(max_norm > T(0))) return;
    double sq = 0;
    for (const auto& p : params)
        for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (norm <= static_cast<double>(max_norm)) return;
    const T f = static_cast<T>(static_cast<double>(max_norm) / norm);
    for (auto& p : params)
        for (auto& g : p.grad()) g *= f;
}

}  // namespace flownet
