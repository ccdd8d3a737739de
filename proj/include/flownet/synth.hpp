#pragma once

#include "flownet/data.hpp"

namespace flownet {

// Synthetic grid system: latent masses migrate toward "commercial" nodes in
// the first half of every period and back toward "residential" nodes in the
// second half. Transfers are row-stochastic, so total mass is conserved.
struct SynthSpec {
    std::size_t rows = 4;
    std::size_t cols = 4;
    std::size_t steps = 2000;
    std::size_t period = 48;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
    double commercial_fraction = 0.25;

    std::size_t node_count() const { return rows * cols; }

    void validate() const {
        if (rows == 0 || cols == 0) throw std::invalid_argument("synth: grid must be nonempty");
        if (steps < 2) throw std::invalid_argument("synth: need at least 2 steps");
        if (period < 2) throw std::invalid_argument("synth: period must be >= 2");
        if (noise_sigma < 0) throw std::invalid_argument("synth: noise_sigma must be >= 0");
        if (!(commercial_fraction > 0.0) || !(commercial_fraction < 1.0))
            throw std::invalid_argument("synth: commercial_fraction must lie in (0,1)");
    }
};

namespace synth_detail {
// Migration dynamics constants. Stickiness keeps most mass in place each
// step so the drift spans a half-period instead of saturating immediately.
inline constexpr double kBaseMass = 100.0;
inline constexpr double kDecayScale = 1.0;
inline constexpr double kAttractHigh = 6.0;
inline constexpr double kAttractLow = 1.0;
inline constexpr double kSelfStick = 30.0;
}  // namespace synth_detail

template <typename T>
struct SynthResult {
    SeriesDataset<T> dataset;
    std::vector<std::size_t> commercial;  // indices of destination nodes
    Tensor<T> transfers;                  // [steps-1, N, N], row-stochastic
    Tensor<T> masses;                     // [steps, N] noiseless latent state
};

// True when step t lies in the commercial-bound half of its period.
inline bool synth_toward_commercial(std::size_t t, std::size_t period) {
    return (t % period) < period / 2;
}

template <typename T>
SynthResult<T> synth_generate(const SynthSpec& spec) {
    spec.validate();
    const std::size_t N = spec.node_count();
    Rng rng(spec.seed);

    // Unit-spacing grid coordinates; node index = r*cols + c.
    Tensor<T> coords(Shape{N, 2});
    std::vector<std::string> ids(N);
    for (std::size_t r = 0; r < spec.rows; ++r)
        for (std::size_t c = 0; c < spec.cols; ++c) {
            const std::size_t i = r * spec.cols + c;
            coords.data()[i * 2] = static_cast<T>(c);
            coords.data()[i * 2 + 1] = static_cast<T>(r);
            ids[i] = "node_" + std::to_string(i);
        }
    const Tensor<T> dist = distance_matrix(coords, DistanceMetric::euclidean);

    std::size_t n_comm = static_cast<std::size_t>(std::lround(spec.commercial_fraction * static_cast<double>(N)));
    n_comm = std::clamp<std::size_t>(n_comm, 1, N - 1);
    std::vector<std::size_t> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    std::vector<std::size_t> commercial(order.begin(), order.begin() + n_comm);
    std::vector<bool> is_comm(N, false);
    for (std::size_t i : commercial) is_comm[i] = true;

    using namespace synth_detail;

    // Distance kernel with self stickiness, shared by both phases.
    std::vector<double> kernel(N * N);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
            const double d = static_cast<double>(dist.data()[i * N + j]);
            kernel[i * N + j] = std::exp(-d / kDecayScale) * (i == j ? kSelfStick : 1.0);
        }

    // Phase-dependent row-stochastic transfer matrices, built once each.
    const auto build_transfer = [&](bool toward_comm) {
        std::vector<double> P(N * N);
        for (std::size_t i = 0; i < N; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j < N; ++j) {
                const bool attract = toward_comm ? is_comm[j] : !is_comm[j];
                P[i * N + j] = kernel[i * N + j] * (attract ? kAttractHigh : kAttractLow);
                sum += P[i * N + j];
            }
            for (std::size_t j = 0; j < N; ++j) P[i * N + j] /= sum;
        }
        return P;
    };
    const std::vector<double> P_comm = build_transfer(true);
    const std::vector<double> P_res = build_transfer(false);

    std::vector<double> mass(N, kBaseMass);
    Tensor<T> masses(Shape{spec.steps, N});
    Tensor<T> transfers(Shape{spec.steps - 1, N, N});
    Tensor<T> obs(Shape{spec.steps, N});

    for (std::size_t t = 0; t < spec.steps; ++t) {
        for (std::size_t i = 0; i < N; ++i) {
            masses.data()[t * N + i] = static_cast<T>(mass[i]);
            const double noise = spec.noise_sigma > 0 ? rng.normal(0.0, spec.noise_sigma) : 0.0;
            obs.data()[t * N + i] = static_cast<T>(mass[i] + noise);
        }
        if (t + 1 == spec.steps) break;
        const std::vector<double>& P = synth_toward_commercial(t, spec.period) ? P_comm : P_res;
        for (std::size_t i = 0; i < N * N; ++i) transfers.data()[(t)*N * N + i] = static_cast<T>(P[i]);
        // m' = P^T m  (row i of P distributes node i's mass)
        std::vector<double> next(N, 0.0);
        for (std::size_t i = 0; i < N; ++i) {
            const double mi = mass[i];
            for (std::size_t j = 0; j < N; ++j) next[j] += P[i * N + j] * mi;
        }
        mass = std::move(next);
    }

    SynthResult<T> out;
    out.dataset.observations = std::move(obs);
    out.dataset.node_ids = std::move(ids);
    out.dataset.coordinates = coords;
    out.dataset.resolution = "synthetic-step";
    out.dataset.name = "synth_grid";
    out.commercial = std::move(commercial);
    out.transfers = std::move(transfers);
    out.masses = std::move(masses);
    return out;
}

}  // namespace flownet
