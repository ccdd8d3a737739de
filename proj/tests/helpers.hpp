#pragma once

#include <catch2/catch_amalgamated.hpp>

#include "flownet/tensor.hpp"

namespace testutil {

template <typename T>
flownet::Tensor<T> random_tensor(flownet::Rng& rng, flownet::Shape shape, double lo = -1.0,
                                 double hi = 1.0) {
    std::vector<T> v(flownet::numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return flownet::Tensor<T>(std::move(shape), std::move(v));
}

template <typename T>
double max_abs_diff(const flownet::Tensor<T>& a, const flownet::Tensor<T>& b) {
    REQUIRE(a.shape() == b.shape());
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
    return worst;
}

}  // namespace testutil
