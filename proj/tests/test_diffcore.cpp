#include <catch2/catch_amalgamated.hpp>

#include "flownet/adam.hpp"
#include "flownet/grad_check.hpp"
#include "flownet/ops.hpp"
#include "helpers.hpp"

using namespace flownet;
using testutil::random_tensor;

TEST_CASE("softmax_last closed forms") {
    Tensor<double> x({2}, {0.0, 0.0});
    auto y = softmax_last(x);
    CHECK(y.data()[0] == Catch::Approx(0.5));
    CHECK(y.data()[1] == Catch::Approx(0.5));

    Tensor<double> x2({2}, {0.0, std::log(3.0)});
    auto y2 = softmax_last(x2);
    CHECK(y2.data()[0] == Catch::Approx(0.25));
    CHECK(y2.data()[1] == Catch::Approx(0.75));
}

TEST_CASE("softmax_last hard support forces excluded entries to zero") {
    Tensor<double> x({3}, {1.0, 99.0, 1.0});
    BoolMask sup{Shape{3}, {1, 0, 1}};
    auto y = softmax_last(x, &sup);
    CHECK(y.data()[0] == Catch::Approx(0.5));
    CHECK(y.data()[1] == 0.0);
    CHECK(y.data()[2] == Catch::Approx(0.5));

    BoolMask empty{Shape{3}, {0, 0, 0}};
    CHECK_THROWS_AS(softmax_last(x, &empty), std::invalid_argument);
}

TEST_CASE("softmax rows sum to one under random supports (fp32)") {
    Rng rng(42);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t rows = 1 + rng.integer(6), cols = 2 + rng.integer(7);
        auto x = random_tensor<float>(rng, {rows, cols}, -30.0, 30.0);
        std::vector<std::uint8_t> on(rows * cols);
        for (std::size_t r = 0; r < rows; ++r) {
            bool any = false;
            for (std::size_t c = 0; c < cols; ++c) {
                on[r * cols + c] = rng.uniform(0, 1) < 0.5;
                any = any || on[r * cols + c];
            }
            if (!any) on[r * cols + rng.integer(cols)] = 1;
        }
        BoolMask sup{Shape{rows, cols}, on};
        auto y = softmax_last(x, &sup);
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < cols; ++c) {
                CHECK(y.data()[r * cols + c] >= 0.0f);
                if (!on[r * cols + c]) CHECK(y.data()[r * cols + c] == 0.0f);
                s += y.data()[r * cols + c];
            }
            CHECK(std::abs(s - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("activation closed forms") {
    Tensor<double> zero({1}, {0.0});
    CHECK(softplus(zero).data()[0] == Catch::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(sigmoid(zero).data()[0] == 0.5);
    CHECK(gelu(zero).data()[0] == 0.0);

    Rng rng(1);
    auto x = random_tensor<double>(rng, {64}, -30.0, 30.0);
    auto sp = softplus(x);
    auto sg = sigmoid(x);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(sp.data()[i] > 0.0);
        CHECK(sg.data()[i] > 0.0);
        CHECK(sg.data()[i] < 1.0);
    }
}

TEST_CASE("layer_norm_last closed forms") {
    Tensor<double> gain({3}, {1.0, 1.0, 1.0});
    Tensor<double> bias({3}, {0.0, 0.0, 0.0});
    Tensor<double> x({3}, {1.0, 1.0, 1.0});
    auto y = layer_norm_last(x, gain, bias);
    for (std::size_t i = 0; i < 3; ++i) CHECK(y.data()[i] == Catch::Approx(0.0).margin(1e-12));

    // mean 2, population std 1
    Tensor<double> g2({2}, {1.0, 1.0}), b2({2}, {0.0, 0.0});
    Tensor<double> x2({2}, {1.0, 3.0});
    auto y2 = layer_norm_last(x2, g2, b2, 1e-12);
    CHECK(y2.data()[0] == Catch::Approx(-1.0).epsilon(1e-6));
    CHECK(y2.data()[1] == Catch::Approx(1.0).epsilon(1e-6));

    Tensor<double> g0({2}, {0.0, 0.0}), bb({2}, {7.5, 7.5});
    auto y3 = layer_norm_last(x2, g0, bb);
    CHECK(y3.data()[0] == 7.5);
    CHECK(y3.data()[1] == 7.5);
}

TEST_CASE("layer_norm slices are standardized pre-affine (fp32)") {
    Rng rng(7);
    auto x = random_tensor<float>(rng, {6, 5, 16}, -3.0, 3.0);
    Tensor<float> gain({16}, std::vector<float>(16, 1.0f));
    Tensor<float> bias({16}, std::vector<float>(16, 0.0f));
    auto y = layer_norm_last(x, gain, bias, 1e-5f);
    const std::size_t rows = 30, cols = 16;
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0, var = 0;
        for (std::size_t c = 0; c < cols; ++c) mu += y.data()[r * cols + c];
        mu /= cols;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = y.data()[r * cols + c] - mu;
            var += d * d;
        }
        var /= cols;
        CHECK(std::abs(mu) <= 1e-6);
        CHECK(std::abs(var - 1.0) <= 1e-4);
    }
}

TEST_CASE("backward on simple graphs") {
    SECTION("sum of squares") {
        Tensor<double> x({2}, {1.0, 2.0});
        x.set_requires_grad(true);
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        auto loss = sum_all(mul(x, x));
        tape.backward(loss);
        CHECK(x.grad()[0] == Catch::Approx(2.0));
        CHECK(x.grad()[1] == Catch::Approx(4.0));
    }
    SECTION("bilinear") {
        Tensor<double> w = Tensor<double>::scalar(3.0);
        Tensor<double> x = Tensor<double>::scalar(2.0);
        w.set_requires_grad(true);
        x.set_requires_grad(true);
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        auto loss = sum_all(mul(w, x));
        tape.backward(loss);
        CHECK(w.grad()[0] == Catch::Approx(2.0));
        CHECK(x.grad()[0] == Catch::Approx(3.0));
    }
    SECTION("non-scalar loss rejected, tape single use") {
        Tensor<double> x({2}, {1.0, 2.0});
        x.set_requires_grad(true);
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        auto y = mul(x, x);
        CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
        auto loss = sum_all(y);
        tape.backward(loss);
        CHECK_THROWS_AS(tape.backward(loss), std::runtime_error);
    }
}

TEST_CASE("composite softmax -> mae chain matches finite differences") {
    // Targets straddle the softmax outputs within each row; rows whose
    // residuals all share one sign have an exactly-flat loss (row mass is
    // fixed at 1) and are excluded by construction.
    Tensor<double> x({2, 4}, {0.3, -0.2, 0.8, -1.0, 1.5, 0.1, -0.4, 0.9});
    Tensor<double> target({2, 4}, {0.9, 0.10, 0.20, 0.05, 0.10, 0.40, 0.02, 0.60});
    const auto f = [&]() { return mae_loss(softmax_last(x), target); };
    const double err = grad_check<double>(f, {x});
    CHECK(err < 1e-8);
}

TEST_CASE("grad_check harness sanity") {
    SECTION("quadratic") {
        Tensor<double> w = Tensor<double>::scalar(3.0);
        const auto f = [&]() { return mul(w, w); };
        CHECK(grad_check<double>(f, {w}) < 1e-8);
    }
    SECTION("constant function has zero gradient") {
        Tensor<double> w = Tensor<double>::scalar(3.0);
        const auto f = [&]() { return add(sub(w, w), Tensor<double>::scalar(5.0)); };
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        w.set_requires_grad(true);
        auto loss = f();
        tape.backward(loss);
        CHECK(std::abs(w.grad()[0]) < 1e-10);
    }
}

namespace {

// Wraps an op output in an asymmetric scalar so every element contributes.
template <typename F>
double check_op(Rng&, const std::vector<Tensor<double>>& leaves, F&& op) {
    Tensor<double> probe;
    {
        auto out = op();
        Rng probe_rng(9001 + out.size());
        probe = random_tensor<double>(probe_rng, out.shape(), 0.1, 1.0);
    }
    const auto f = [&]() { return sum_all(mul(op(), probe)); };
    return grad_check<double>(f, leaves);
}

}  // namespace

TEST_CASE("per-primitive gradient fidelity at fp64") {
    Rng rng(1234);
    const double tol = 1e-6;

    auto a = random_tensor<double>(rng, {2, 3, 4});
    auto b = random_tensor<double>(rng, {3, 4});
    auto c = random_tensor<double>(rng, {4});

    CHECK(check_op(rng, {a, b}, [&]() { return add(a, b); }) < tol);
    CHECK(check_op(rng, {a, c}, [&]() { return sub(a, c); }) < tol);
    CHECK(check_op(rng, {a, b}, [&]() { return mul(a, b); }) < tol);
    CHECK(check_op(rng, {a}, [&]() { return scale(a, 2.5); }) < tol);
    CHECK(check_op(rng, {a}, [&]() { return reshape(a, {4, 6}); }) < tol);
    CHECK(check_op(rng, {a}, [&]() { return permute(a, {2, 0, 1}); }) < tol);
    CHECK(check_op(rng, {b}, [&]() { return broadcast_to(b, {5, 3, 4}); }) < tol);
    CHECK(check_op(rng, {a}, [&]() { return concat_last(a, scale(a, 2.0)); }) < tol);
    CHECK(check_op(rng, {a}, [&]() { return sigmoid(a); }) < tol);
    CHECK(check_op(rng, {a}, [&]() { return softplus(a); }) < tol);
    CHECK(check_op(rng, {a}, [&]() { return gelu(a); }) < tol);
    CHECK(check_op(rng, {a}, [&]() { return softmax_last(a); }) < tol);

    BoolMask sup{Shape{4}, {1, 0, 1, 1}};
    CHECK(check_op(rng, {a}, [&]() { return softmax_last(a, &sup); }) < tol);

    auto gain = random_tensor<double>(rng, {4}, 0.5, 1.5);
    auto bias = random_tensor<double>(rng, {4});
    CHECK(check_op(rng, {a, gain, bias}, [&]() { return layer_norm_last(a, gain, bias); }) < tol);

    auto series = random_tensor<double>(rng, {2, 3, 8});
    CHECK(check_op(rng, {series}, [&]() { return partition_patches(series, 4, 2); }) < tol);

    auto t = random_tensor<double>(rng, {2, 3, 4});
    const auto fm = [&]() { return mae_loss(a, t); };
    CHECK(grad_check<double>(fm, {a}) < tol);
    CHECK(check_op(rng, {a}, [&]() { return mean_all(a); }) < tol);
}

TEST_CASE("matmul matches naive loops and is gradient-exact") {
    Rng rng(99);
    const double tol = 1e-6;

    SECTION("plain 2d") {
        auto A = random_tensor<double>(rng, {3, 4});
        auto B = random_tensor<double>(rng, {4, 5});
        auto Y = matmul(A, B);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 5; ++j) {
                double s = 0;
                for (std::size_t l = 0; l < 4; ++l) s += A.data()[i * 4 + l] * B.data()[l * 5 + j];
                CHECK(Y.data()[i * 5 + j] == Catch::Approx(s).epsilon(1e-12));
            }
        CHECK(check_op(rng, {A, B}, [&]() { return matmul(A, B); }) < tol);
    }
    SECTION("transpose flags") {
        auto A = random_tensor<double>(rng, {4, 3});
        auto B = random_tensor<double>(rng, {5, 4});
        auto Y = matmul(A, B, true, true);  // A^T [3,4] * B^T [4,5]
        REQUIRE(Y.shape() == Shape{3, 5});
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 5; ++j) {
                double s = 0;
                for (std::size_t l = 0; l < 4; ++l) s += A.data()[l * 3 + i] * B.data()[j * 4 + l];
                CHECK(Y.data()[i * 5 + j] == Catch::Approx(s).epsilon(1e-12));
            }
        CHECK(check_op(rng, {A, B}, [&]() { return matmul(A, B, true, true); }) < tol);
        auto C = random_tensor<double>(rng, {4, 5});
        CHECK(check_op(rng, {A, C}, [&]() { return matmul(A, C, true, false); }) < tol);
        auto D = random_tensor<double>(rng, {3, 4});
        CHECK(check_op(rng, {D, B}, [&]() { return matmul(D, B, false, true); }) < tol);
    }
    SECTION("broadcast leading dims") {
        auto A = random_tensor<double>(rng, {2, 3, 2, 4});
        auto B = random_tensor<double>(rng, {3, 4, 5});
        auto Y = matmul(A, B);
        REQUIRE(Y.shape() == Shape{2, 3, 2, 5});
        // spot check batch (1,2)
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 5; ++j) {
                double s = 0;
                for (std::size_t l = 0; l < 4; ++l)
                    s += A.data()[(1 * 3 + 2) * 8 + i * 4 + l] * B.data()[2 * 20 + l * 5 + j];
                CHECK(Y.data()[(1 * 3 + 2) * 10 + i * 5 + j] == Catch::Approx(s).epsilon(1e-12));
            }
        CHECK(check_op(rng, {A, B}, [&]() { return matmul(A, B); }) < tol);
    }
    SECTION("weight shared across batches") {
        auto X = random_tensor<double>(rng, {4, 2, 5, 3});
        auto W = random_tensor<double>(rng, {3, 6});
        CHECK(check_op(rng, {X, W}, [&]() { return matmul(X, W); }) < tol);
    }
    SECTION("per-head weights via length-1 broadcast") {
        auto X = random_tensor<double>(rng, {2, 3, 4, 5, 4});  // [B,h,N,P,d']
        auto W = random_tensor<double>(rng, {3, 1, 4, 4});     // [h,1,d',d']
        auto Y = matmul(X, W);
        REQUIRE(Y.shape() == Shape{2, 3, 4, 5, 4});
        CHECK(check_op(rng, {X, W}, [&]() { return matmul(X, W); }) < tol);
    }
}

TEST_CASE("adam closed-form steps") {
    SECTION("one step with unit gradient") {
        std::vector<Tensor<double>> params{Tensor<double>::scalar(0.0)};
        params[0].set_requires_grad(true);
        params[0].grad()[0] = 1.0;
        auto st = AdamState<double>::init(params);
        REQUIRE(adam_step(params, st, 1e-3));
        CHECK(params[0].data()[0] == Catch::Approx(-1e-3).epsilon(1e-6));
        CHECK(st.t == 1);
    }
    SECTION("zero gradient leaves parameters unchanged") {
        std::vector<Tensor<double>> params{Tensor<double>::scalar(1.25)};
        params[0].set_requires_grad(true);
        auto st = AdamState<double>::init(params);
        for (int i = 0; i < 5; ++i) {
            params[0].zero_grad();
            REQUIRE(adam_step(params, st, 1e-3));
        }
        CHECK(params[0].data()[0] == 1.25);
    }
    SECTION("two steps with unit gradients") {
        std::vector<Tensor<double>> params{Tensor<double>::scalar(0.0)};
        params[0].set_requires_grad(true);
        auto st = AdamState<double>::init(params);
        params[0].grad()[0] = 1.0;
        adam_step(params, st, 1e-3);
        params[0].grad()[0] = 1.0;
        adam_step(params, st, 1e-3);
        CHECK(params[0].data()[0] == Catch::Approx(-2e-3).margin(1e-9));
    }
    SECTION("non-finite gradient") {
        std::vector<Tensor<double>> params{Tensor<double>::scalar(0.5)};
        params[0].set_requires_grad(true);
        params[0].grad()[0] = std::numeric_limits<double>::quiet_NaN();
        auto st = AdamState<double>::init(params);
#ifndef NDEBUG
        CHECK_THROWS_AS(adam_step(params, st, 1e-3), std::runtime_error);
#else
        CHECK_FALSE(adam_step(params, st, 1e-3));
        CHECK(params[0].data()[0] == 0.5);
#endif
    }
}

TEST_CASE("forward evaluation is deterministic within a build") {
    Rng rng(5);
    auto x = random_tensor<float>(rng, {4, 8});
    auto w = random_tensor<float>(rng, {8, 8});
    auto run = [&]() {
        auto y = softmax_last(matmul(gelu(x), w));
        return y.values();
    };
    CHECK(run() == run());
}
