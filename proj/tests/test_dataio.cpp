#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "flownet/data.hpp"
#include "flownet/synth.hpp"
#include "helpers.hpp"

using namespace flownet;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("flownet_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    out << content;
}

}  // namespace

TEST_CASE("observations CSV loading") {
    TempDir tmp;
    SECTION("toy 3x2 file") {
        write_file(tmp.file("obs.csv"), "a,b\n1,2\n3,4\n5,6\n");
        auto [ids, obs] = load_observations_csv<double>(tmp.file("obs.csv"));
        CHECK(ids == std::vector<std::string>{"a", "b"});
        CHECK(obs.shape() == Shape{3, 2});
        CHECK(obs.data()[4] == 5.0);
    }
    SECTION("ragged row names the row") {
        write_file(tmp.file("obs.csv"), "a,b\n1,2\n3\n");
        CHECK_THROWS_WITH(load_observations_csv<double>(tmp.file("obs.csv")),
                          Catch::Matchers::ContainsSubstring("row 3"));
    }
    SECTION("non-numeric cell names row and column") {
        write_file(tmp.file("obs.csv"), "a,b\n1,oops\n");
        CHECK_THROWS_WITH(load_observations_csv<double>(tmp.file("obs.csv")),
                          Catch::Matchers::ContainsSubstring("column 2"));
    }
    SECTION("NaN rejected") {
        write_file(tmp.file("obs.csv"), "a,b\n1,nan\n");
        CHECK_THROWS_WITH(load_observations_csv<double>(tmp.file("obs.csv")),
                          Catch::Matchers::ContainsSubstring("NaN"));
    }
}

TEST_CASE("dataset loading ties geometry to observations") {
    TempDir tmp;
    write_file(tmp.file("obs.csv"), "a,b\n1,2\n3,4\n");
    SECTION("coordinate count mismatch") {
        write_file(tmp.file("geo.csv"), "node_id,x,y\na,0,0\nb,1,0\nc,2,0\n");
        CHECK_THROWS_WITH(load_dataset<double>(tmp.file("obs.csv"), tmp.file("geo.csv"), GeometryKind::coords),
                          Catch::Matchers::ContainsSubstring("3 coordinate rows for 2"));
    }
    SECTION("coordinate id mismatch names the row") {
        write_file(tmp.file("geo.csv"), "node_id,x,y\na,0,0\nz,1,0\n");
        CHECK_THROWS_WITH(load_dataset<double>(tmp.file("obs.csv"), tmp.file("geo.csv"), GeometryKind::coords),
                          Catch::Matchers::ContainsSubstring("'z'"));
    }
    SECTION("well-formed coords load") {
        write_file(tmp.file("geo.csv"), "node_id,x,y\na,0,0\nb,3,4\n");
        auto ds = load_dataset<double>(tmp.file("obs.csv"), tmp.file("geo.csv"), GeometryKind::coords);
        REQUIRE(ds.coordinates.has_value());
        CHECK_FALSE(ds.distances.has_value());
        auto d = dataset_distances(ds, DistanceMetric::euclidean);
        CHECK(d.data()[1] == Catch::Approx(5.0));
    }
    SECTION("distance matrix load validates shape and diagonal") {
        write_file(tmp.file("dist.csv"), "0,1\n1,0\n");
        auto ds = load_dataset<double>(tmp.file("obs.csv"), tmp.file("dist.csv"), GeometryKind::distances);
        REQUIRE(ds.distances.has_value());
        write_file(tmp.file("bad.csv"), "0,1\n1,2\n");
        CHECK_THROWS_WITH(load_dataset<double>(tmp.file("obs.csv"), tmp.file("bad.csv"), GeometryKind::distances),
                          Catch::Matchers::ContainsSubstring("diagonal"));
    }
}

TEST_CASE("distance metrics") {
    Tensor<double> coords({2, 2}, {0.0, 0.0, 3.0, 4.0});
    auto de = distance_matrix(coords, DistanceMetric::euclidean);
    auto dm = distance_matrix(coords, DistanceMetric::manhattan);
    CHECK(de.data()[1] == Catch::Approx(5.0));
    CHECK(dm.data()[1] == Catch::Approx(7.0));
    CHECK(de.data()[0] == 0.0);
    CHECK(de.data()[3] == 0.0);

    SECTION("triangle inequality on random point sets") {
        Rng rng(3);
        for (int trial = 0; trial < 10; ++trial) {
            const std::size_t N = 3 + rng.integer(8);
            auto pts = testutil::random_tensor<double>(rng, {N, 2}, -10.0, 10.0);
            for (auto metric : {DistanceMetric::euclidean, DistanceMetric::manhattan}) {
                auto d = distance_matrix(pts, metric);
                for (std::size_t i = 0; i < N; ++i)
                    for (std::size_t j = 0; j < N; ++j)
                        for (std::size_t k = 0; k < N; ++k)
                            CHECK(d.data()[i * N + j] <=
                                  d.data()[i * N + k] + d.data()[k * N + j] + 1e-12);
            }
        }
    }
}

TEST_CASE("gaussian adjacency kernel") {
    Tensor<double> dist({2, 2}, {0.0, 2.0, 2.0, 0.0});
    auto w = gaussian_adjacency(dist, 2.0, 10.0);
    CHECK(w.data()[0] == 1.0);
    CHECK(w.data()[1] == Catch::Approx(std::exp(-1.0)));
    auto w2 = gaussian_adjacency(dist, 2.0, 1.5);  // kappa below the off-diagonal distance
    CHECK(w2.data()[1] == 0.0);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(w.data()[i] >= 0.0);
        CHECK(w.data()[i] <= 1.0);
    }
}

TEST_CASE("z-score normalization") {
    SECTION("hand-computed values with population std") {
        Tensor<double> x({3, 1}, {1.0, 2.0, 3.0});
        auto [norm, stats] = zscore_fit_apply(x);
        CHECK(stats.mu[0] == Catch::Approx(2.0));
        CHECK(stats.sigma[0] == Catch::Approx(std::sqrt(2.0 / 3.0)));
        CHECK(norm.data()[0] == Catch::Approx(-1.2247448714));
        CHECK(norm.data()[1] == Catch::Approx(0.0).margin(1e-12));
        CHECK(norm.data()[2] == Catch::Approx(1.2247448714));
    }
    SECTION("invert is the inverse of apply") {
        Rng rng(8);
        auto x = testutil::random_tensor<float>(rng, {40, 6}, -100.0, 100.0);
        auto stats = zscore_fit(x);
        auto back = zscore_invert(zscore_apply(x, stats), stats);
        CHECK(testutil::max_abs_diff(x, back) <= 1e-6 * 100.0);
    }
    SECTION("constant series maps to zero under the sigma floor") {
        Tensor<double> x({5, 1}, std::vector<double>(5, 42.0));
        auto [norm, stats] = zscore_fit_apply(x);
        CHECK(stats.sigma[0] == 1e-8);
        for (std::size_t i = 0; i < 5; ++i) CHECK(norm.data()[i] == 0.0);
    }
    SECTION("training stats apply unchanged to other splits") {
        Rng rng(9);
        auto train = testutil::random_tensor<double>(rng, {30, 4});
        auto val = testutil::random_tensor<double>(rng, {10, 4}, 100.0, 200.0);
        auto stats = zscore_fit(train);
        auto nv = zscore_apply(val, stats);
        for (std::size_t t = 0; t < 10; ++t)
            for (std::size_t i = 0; i < 4; ++i)
                CHECK(nv.data()[t * 4 + i] ==
                      Catch::Approx((val.data()[t * 4 + i] - stats.mu[i]) / stats.sigma[i]));
    }
}

TEST_CASE("window extraction") {
    SECTION("count formulas") {
        Rng rng(10);
        auto d5 = testutil::random_tensor<double>(rng, {5, 2});
        CHECK(make_windows(d5, 2, 1, 1).count() == 3);
        auto d20 = testutil::random_tensor<double>(rng, {20, 2});
        CHECK(make_windows(d20, 4, 4, 4).count() == 4);
        auto d3 = testutil::random_tensor<double>(rng, {3, 2});
        CHECK_THROWS_AS(make_windows(d3, 2, 2, 1), std::invalid_argument);
    }
    SECTION("window contents and origins (property)") {
        Rng rng(11);
        for (int trial = 0; trial < 25; ++trial) {
            const std::size_t Tn = 6 + rng.integer(40);
            const std::size_t N = 1 + rng.integer(4);
            const std::size_t t_in = 1 + rng.integer(4);
            const std::size_t t_out = 1 + rng.integer(4);
            const std::size_t stride = 1 + rng.integer(5);
            if (t_in + t_out > Tn) continue;
            auto data = testutil::random_tensor<double>(rng, {Tn, N});
            auto w = make_windows(data, t_in, t_out, stride);
            CHECK(w.count() == (Tn - t_in - t_out) / stride + 1);
            std::size_t prev = 0;
            for (std::size_t b = 0; b < w.count(); ++b) {
                if (b) CHECK(w.origins[b] > prev);
                prev = w.origins[b];
                REQUIRE(w.origins[b] + t_in + t_out <= Tn);
                for (std::size_t i = 0; i < N; ++i) {
                    for (std::size_t t = 0; t < t_in; ++t)
                        CHECK(w.inputs.data()[(b * N + i) * t_in + t] ==
                              data.data()[(w.origins[b] + t) * N + i]);
                    for (std::size_t t = 0; t < t_out; ++t)
                        CHECK(w.targets.data()[(b * N + i) * t_out + t] ==
                              data.data()[(w.origins[b] + t_in + t) * N + i]);
                }
            }
        }
    }
}

TEST_CASE("chronological splits") {
    Rng rng(12);
    auto data = testutil::random_tensor<double>(rng, {100, 3});
    SECTION("ratio split") {
        auto [train, val, test] = split_series(data, SplitSpec::from_ratios(0.7, 0.1, 0.2));
        CHECK(train.shape()[0] == 70);
        CHECK(val.shape()[0] == 10);
        CHECK(test.shape()[0] == 20);
        CHECK(train.data()[0] == data.data()[0]);
        CHECK(test.data()[0] == data.data()[80 * 3]);
    }
    SECTION("boundary split is equivalent") {
        auto a = split_series(data, SplitSpec::from_ratios(0.7, 0.1, 0.2));
        auto b = split_series(data, SplitSpec::from_boundaries(70, 80));
        for (int s = 0; s < 3; ++s) CHECK(a[s].values() == b[s].values());
    }
    SECTION("bad ratios rejected") {
        CHECK_THROWS_AS(split_series(data, SplitSpec::from_ratios(0.7, 0.2, 0.2)), std::invalid_argument);
    }
}

TEST_CASE("synthetic generator") {
    SECTION("mass conservation without noise") {
        SynthSpec spec;
        spec.steps = 200;
        spec.noise_sigma = 0.0;
        spec.seed = 7;
        auto r = synth_generate<double>(spec);
        const std::size_t N = spec.node_count();
        double total0 = 0;
        for (std::size_t i = 0; i < N; ++i) total0 += r.dataset.observations.data()[i];
        for (std::size_t t = 0; t < spec.steps; ++t) {
            double s = 0;
            for (std::size_t i = 0; i < N; ++i) s += r.dataset.observations.data()[t * N + i];
            CHECK(std::abs(s - total0) <= 1e-9 * total0);
        }
    }
    SECTION("net flux onto commercial nodes follows the phase") {
        SynthSpec spec;
        spec.steps = 200;
        spec.noise_sigma = 0.0;
        spec.seed = 42;
        auto r = synth_generate<double>(spec);
        const std::size_t N = spec.node_count();
        std::vector<bool> is_comm(N, false);
        for (auto i : r.commercial) is_comm[i] = true;
        for (std::size_t t = 0; t + 1 < spec.steps; ++t) {
            double inflow = 0, outflow = 0;
            for (std::size_t i = 0; i < N; ++i) {
                const double mi = r.masses.data()[t * N + i];
                for (std::size_t j = 0; j < N; ++j) {
                    if (i == j) continue;
                    const double f = r.transfers.data()[t * N * N + i * N + j] * mi;
                    if (is_comm[j] && !is_comm[i]) inflow += f;
                    if (is_comm[i] && !is_comm[j]) outflow += f;
                }
            }
            if (synth_toward_commercial(t, spec.period)) {
                CHECK(inflow - outflow > 0.0);
            } else {
                CHECK(inflow - outflow < 0.0);
            }
        }
    }
    SECTION("deterministic for a fixed seed") {
        SynthSpec spec;
        spec.steps = 60;
        spec.noise_sigma = 1.5;
        spec.seed = 99;
        auto a = synth_generate<float>(spec);
        auto b = synth_generate<float>(spec);
        CHECK(a.dataset.observations.values() == b.dataset.observations.values());
        spec.seed = 100;
        auto c = synth_generate<float>(spec);
        CHECK(a.dataset.observations.values() != c.dataset.observations.values());
    }
    SECTION("invalid specs rejected") {
        SynthSpec bad;
        bad.period = 1;
        CHECK_THROWS_AS(synth_generate<double>(bad), std::invalid_argument);
        SynthSpec bad2;
        bad2.noise_sigma = -1;
        CHECK_THROWS_AS(synth_generate<double>(bad2), std::invalid_argument);
        SynthSpec bad3;
        bad3.commercial_fraction = 0.0;
        CHECK_THROWS_AS(synth_generate<double>(bad3), std::invalid_argument);
    }
    SECTION("row-stochastic ground-truth transfers") {
        SynthSpec spec;
        spec.steps = 10;
        spec.seed = 3;
        auto r = synth_generate<double>(spec);
        const std::size_t N = spec.node_count();
        for (std::size_t t = 0; t + 1 < spec.steps; ++t)
            for (std::size_t i = 0; i < N; ++i) {
                double s = 0;
                for (std::size_t j = 0; j < N; ++j) {
                    const double p = r.transfers.data()[t * N * N + i * N + j];
                    CHECK(p >= 0.0);
                    s += p;
                }
                CHECK(s == Catch::Approx(1.0).epsilon(1e-12));
            }
    }
}

TEST_CASE("CSV round trips") {
    TempDir tmp;
    SynthSpec spec;
    spec.steps = 25;
    spec.noise_sigma = 0.7;
    spec.seed = 5;
    auto r = synth_generate<double>(spec);
    write_observations_csv(tmp.file("obs.csv"), r.dataset.node_ids, r.dataset.observations);
    write_coordinates_csv(tmp.file("geo.csv"), r.dataset.node_ids, *r.dataset.coordinates);
    auto ds = load_dataset<double>(tmp.file("obs.csv"), tmp.file("geo.csv"), GeometryKind::coords);
    CHECK(ds.node_ids == r.dataset.node_ids);
    CHECK(testutil::max_abs_diff(ds.observations, r.dataset.observations) < 1e-12);
    CHECK(testutil::max_abs_diff(*ds.coordinates, *r.dataset.coordinates) < 1e-12);
}
