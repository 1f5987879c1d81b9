#include <cmath>
#include <vector>

#include "cxrgen/rng.hpp"
#include "cxrgen/tensor.hpp"
#include "doctest.h"

using namespace cxrgen;

namespace {

Tensor randt(Shape shape, std::uint64_t seed, double stddev = 1.0) {
    Rng rng(seed);
    return Tensor::randn(std::move(shape), rng, stddev);
}

Tensor positive_randt(Shape shape, std::uint64_t seed) {
    Tensor t = randt(std::move(shape), seed);
    for (double& v : t.data()) v = 0.25 + std::fabs(v);
    return t;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("softmax of equal logits is uniform") {
    Tensor x = Tensor::from({3}, {0.0, 0.0, 0.0});
    Tensor y = softmax_rows(x);
    for (double v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and stay positive") {
    Tensor x = randt({5, 7}, 11, 3.0);
    Tensor y = softmax_rows(x);
    for (std::int64_t r = 0; r < 5; ++r) {
        double s = 0.0;
        for (std::int64_t j = 0; j < 7; ++j) {
            const double v = y.data()[static_cast<std::size_t>(r * 7 + j)];
            CHECK(v > 0.0);
            s += v;
        }
        CHECK(std::fabs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("matmul against identity returns the operand") {
    Tensor a = Tensor::from({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor eye = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor out = matmul(a, eye);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out.data()[i] == a.data()[i]);
    Tensor out2 = matmul(eye, a);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out2.data()[i] == a.data()[i]);
}

TEST_CASE("activation fixed points") {
    CHECK(silu(Tensor::scalar(0.0)).item() == 0.0);
    CHECK(sigmoid(Tensor::scalar(0.0)).item() == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(tanh(Tensor::scalar(0.0)).item() == 0.0);
    CHECK(softplus(Tensor::scalar(0.0)).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("backward of sum of squares") {
    Tape tape;
    Tensor x = Tensor::from({2}, {1.0, 2.0}).set_requires_grad(true);
    Tensor loss = reduce_sum_all(mul(x, x));
    Tape::backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("backward of a constant graph is a no-op") {
    Tape tape;
    Tensor x = Tensor::from({2}, {1.0, 2.0});  // no grad requested
    Tensor loss = reduce_sum_all(mul(x, x));
    CHECK(tape.size() == 0);
    Tape::backward(loss);  // must not throw, nothing to propagate
    CHECK(!x.has_grad());
}

TEST_CASE("backward requires a scalar loss") {
    Tape tape;
    Tensor x = Tensor::from({2}, {1.0, 2.0}).set_requires_grad(true);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(Tape::backward(y), ContractError);
}

TEST_CASE("diamond graph sums both contributions") {
    // s = 2x + 3x flows through two consumers of the same tensor: ds/dx = 5.
    Tape tape;
    Tensor x = Tensor::scalar(1.5).set_requires_grad(true);
    Tensor loss = reduce_sum_all(add(scale(x, 2.0), scale(x, 3.0)));
    Tape::backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(5.0).epsilon(1e-15));
}

TEST_CASE("repeated backward accumulates gradients") {
    Tape tape;
    Tensor x = Tensor::from({2}, {1.0, 2.0}).set_requires_grad(true);
    Tensor loss = reduce_sum_all(mul(x, x));
    Tape::backward(loss);
    Tape::backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(x.grad()[1] == doctest::Approx(8.0).epsilon(1e-15));
}

TEST_CASE("shape and domain errors") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 2});
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
    CHECK_THROWS_AS(log(Tensor::scalar(0.0)), DomainError);
    CHECK_THROWS_AS(log(Tensor::scalar(-1.0)), DomainError);
    CHECK_THROWS_AS(sqrt(Tensor::scalar(-1.0)), DomainError);
    CHECK_THROWS_AS(div(Tensor::scalar(1.0), Tensor::scalar(0.0)), DomainError);
    CHECK_THROWS_AS(exp(Tensor::scalar(1000.0)), DomainError);
}

TEST_CASE("trailing broadcast add and its reduction in backward") {
    Tape tape;
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}).set_requires_grad(true);
    Tensor bias = Tensor::from({3}, {10, 20, 30}).set_requires_grad(true);
    Tensor y = add(x, bias);
    const std::vector<double> want = {11, 22, 33, 14, 25, 36};
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(y.data()[i] == want[i]);
    Tensor loss = reduce_sum_all(y);
    Tape::backward(loss);
    for (std::size_t i = 0; i < 6; ++i) CHECK(x.grad()[i] == 1.0);
    for (std::size_t i = 0; i < 3; ++i) CHECK(bias.grad()[i] == 2.0);  // summed over rows
}

TEST_CASE("scalar operand broadcasts over everything") {
    Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor y = mul(x, Tensor::scalar(2.0));
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == x.data()[i] * 2.0);
}

TEST_CASE("reshape and transpose round-trip bit-exactly") {
    Tensor x = randt({4, 6}, 5);
    Tensor back = reshape(reshape(x, {3, 8}), {4, 6});
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        CHECK(back.data()[static_cast<std::size_t>(i)] == x.data()[static_cast<std::size_t>(i)]);
    }
    Tensor tt = transpose2d(transpose2d(x));
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        CHECK(tt.data()[static_cast<std::size_t>(i)] == x.data()[static_cast<std::size_t>(i)]);
    }
}

TEST_CASE("slice, concat and gather round-trips") {
    Tensor x = randt({6, 3}, 7);
    Tensor top = slice_rows(x, 0, 2);
    Tensor mid = slice_rows(x, 2, 3);
    Tensor bot = slice_rows(x, 5, 1);
    Tensor joined = concat_rows({top, mid, bot});
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        CHECK(joined.data()[static_cast<std::size_t>(i)] == x.data()[static_cast<std::size_t>(i)]);
    }
    Tensor picked = gather_rows(x, {5, 0});
    for (std::int64_t j = 0; j < 3; ++j) {
        CHECK(picked.data()[static_cast<std::size_t>(j)] == x.data()[static_cast<std::size_t>(5 * 3 + j)]);
        CHECK(picked.data()[static_cast<std::size_t>(3 + j)] == x.data()[static_cast<std::size_t>(j)]);
    }
    CHECK_THROWS_AS(gather_rows(x, {6}), ContractError);
    CHECK_THROWS_AS(slice_rows(x, 4, 3), ContractError);
}

TEST_CASE("grad check: linear map is exact to tight tolerance") {
    Tensor w = randt({4, 3}, 21);
    auto fn = [&](const Tensor& x) { return reduce_sum_all(matmul(x, w)); };
    CHECK(grad_check(fn, randt({2, 4}, 22)) < 1e-10);
}

TEST_CASE("grad check: sum of exp") {
    auto fn = [](const Tensor& x) { return reduce_sum_all(exp(x)); };
    CHECK(grad_check(fn, randt({3, 4}, 31)) < 1e-6);
}

TEST_CASE("grad check: rms_norm chain") {
    Tensor gain = positive_randt({6}, 41);
    Tensor w = randt({6, 2}, 42);
    auto fn = [&](const Tensor& x) {
        return reduce_mean_all(matmul(rms_norm(x, gain), w));
    };
    CHECK(grad_check(fn, randt({5, 6}, 43)) < 1e-4);
}

TEST_CASE("grad check: softmax cross-entropy at random logits") {
    const std::vector<std::int64_t> targets = {2, 0, 4};
    auto fn = [&](const Tensor& x) { return reduce_mean_all(cross_entropy_rows(x, targets)); };
    CHECK(grad_check(fn, randt({3, 5}, 51, 2.0)) < 1e-4);
}

TEST_CASE("grad check: every primitive over random points") {
    constexpr int kPoints = 10;
    for (int p = 0; p < kPoints; ++p) {
        const std::uint64_t s = 100 + static_cast<std::uint64_t>(p) * 17;

        Tensor other = randt({3, 4}, s + 1);
        Tensor pos_other = positive_randt({3, 4}, s + 2);
        auto check = [&](const char* what, double err, double tol = 1e-4) {
            INFO(what << " at point " << p);
            CHECK(err < tol);
        };

        check("add lhs", grad_check([&](const Tensor& x) { return reduce_sum_all(add(x, other)); },
                                    randt({3, 4}, s)));
        check("add broadcast rhs",
              grad_check([&](const Tensor& x) { return reduce_sum_all(add(other, x)); },
                         randt({4}, s)));
        check("sub lhs", grad_check([&](const Tensor& x) { return reduce_sum_all(sub(x, other)); },
                                    randt({3, 4}, s)));
        check("sub broadcast rhs",
              grad_check([&](const Tensor& x) { return reduce_sum_all(sub(other, x)); },
                         randt({4}, s)));
        check("mul both",
              grad_check([&](const Tensor& x) { return reduce_sum_all(mul(x, other)); },
                         randt({3, 4}, s)));
        check("mul broadcast",
              grad_check([&](const Tensor& x) { return reduce_sum_all(mul(other, x)); },
                         randt({4}, s)));
        check("div num", grad_check([&](const Tensor& x) { return reduce_sum_all(div(x, pos_other)); },
                                    randt({3, 4}, s)));
        check("div den",
              grad_check([&](const Tensor& x) { return reduce_sum_all(div(other, x)); },
                         positive_randt({3, 4}, s)));
        check("matmul lhs",
              grad_check([&](const Tensor& x) { return reduce_sum_all(matmul(x, randt({4, 2}, s + 3))); },
                         randt({3, 4}, s)));
        check("matmul rhs",
              grad_check([&](const Tensor& x) { return reduce_sum_all(matmul(randt({2, 3}, s + 4), x)); },
                         randt({3, 4}, s)));
        check("exp", grad_check([](const Tensor& x) { return reduce_sum_all(exp(x)); },
                                randt({3, 4}, s)));
        check("log", grad_check([](const Tensor& x) { return reduce_sum_all(log(x)); },
                                positive_randt({3, 4}, s)));
        check("sqrt", grad_check([](const Tensor& x) { return reduce_sum_all(sqrt(x)); },
                                 positive_randt({3, 4}, s)));
        check("silu", grad_check([](const Tensor& x) { return reduce_sum_all(silu(x)); },
                                 randt({3, 4}, s)));
        check("sigmoid", grad_check([](const Tensor& x) { return reduce_sum_all(sigmoid(x)); },
                                    randt({3, 4}, s)));
        check("softplus", grad_check([](const Tensor& x) { return reduce_sum_all(softplus(x)); },
                                     randt({3, 4}, s)));
        check("tanh", grad_check([](const Tensor& x) { return reduce_sum_all(tanh(x)); },
                                 randt({3, 4}, s)));
        {
            Tensor gain = positive_randt({4}, s + 5);
            check("rms_norm x",
                  grad_check([&](const Tensor& x) { return reduce_sum_all(rms_norm(x, gain)); },
                             randt({3, 4}, s)));
            Tensor xfix = randt({3, 4}, s + 6);
            check("rms_norm gain",
                  grad_check([&](const Tensor& g) { return reduce_sum_all(rms_norm(xfix, g)); },
                             positive_randt({4}, s)));
        }
        {
            Tensor w = randt({3, 4}, s + 7);
            check("softmax",
                  grad_check([&](const Tensor& x) { return reduce_sum_all(mul(w, softmax_rows(x))); },
                             randt({3, 4}, s)));
        }
        check("cross_entropy",
              grad_check([](const Tensor& x) { return reduce_mean_all(cross_entropy_rows(x, {1, 3, 0})); },
                         randt({3, 4}, s, 2.0)));
        {
            Tensor w = randt({3, 4}, s + 8);
            check("l2_normalize",
                  grad_check([&](const Tensor& x) { return reduce_sum_all(mul(w, l2_normalize_rows(x))); },
                             positive_randt({3, 4}, s)));
        }
        check("slice", grad_check([](const Tensor& x) { return reduce_sum_all(mul(slice_rows(x, 1, 2),
                                                                                  slice_rows(x, 0, 2))); },
                                  randt({3, 4}, s)));
        check("concat", grad_check(
                            [](const Tensor& x) {
                                Tensor c = concat_rows({x, x});
                                return reduce_sum_all(mul(c, c));
                            },
                            randt({3, 4}, s)));
        check("reshape+transpose",
              grad_check([](const Tensor& x) {
                  Tensor t = transpose2d(reshape(x, {4, 3}));
                  return reduce_sum_all(mul(t, t));
              },
                         randt({3, 4}, s)));
        check("mean_rows", grad_check([](const Tensor& x) {
                  Tensor m = mean_rows(x);
                  return reduce_sum_all(mul(m, m));
              },
                                      randt({3, 4}, s)));
        check("gather", grad_check([](const Tensor& x) {
                  Tensor gproj = gather_rows(x, {2, 0, 2});
                  return reduce_sum_all(mul(gproj, gproj));
              },
                                   randt({3, 4}, s)));
        check("expand_last", grad_check([](const Tensor& x) {
                  Tensor e = expand_last(x, 3);
                  return reduce_sum_all(mul(e, e));
              },
                                        randt({3, 4}, s)));
        {
            Tensor b = randt({3, 2}, s + 9);
            check("batched_outer a",
                  grad_check([&](const Tensor& x) { return reduce_sum_all(batched_outer(x, b)); },
                             randt({3, 4}, s)));
            Tensor a = randt({3, 4}, s + 10);
            check("batched_outer b",
                  grad_check([&](const Tensor& x) { return reduce_sum_all(batched_outer(a, x)); },
                             randt({3, 2}, s)));
        }
        {
            // ssm_scan, each operand in turn; moderate magnitudes keep the
            // recurrence well conditioned for finite differences.
            const std::int64_t L = 4, D = 3, S = 2;
            Tensor u0 = randt({L, D}, s + 11, 0.7);
            Tensor a0 = randt({L, D, S}, s + 12, 0.3);
            Tensor b0 = randt({L, D, S}, s + 13, 0.7);
            Tensor c0 = randt({L, S}, s + 14, 0.7);
            Tensor d0 = randt({D}, s + 15, 0.7);
            auto scan_loss = [&](const Tensor& u, const Tensor& a, const Tensor& b, const Tensor& c,
                                 const Tensor& d) {
                Tensor y = ssm_scan(u, a, b, c, d);
                return reduce_sum_all(mul(y, y));
            };
            check("ssm_scan u", grad_check([&](const Tensor& x) { return scan_loss(x, a0, b0, c0, d0); }, u0));
            check("ssm_scan a", grad_check([&](const Tensor& x) { return scan_loss(u0, x, b0, c0, d0); }, a0));
            check("ssm_scan b", grad_check([&](const Tensor& x) { return scan_loss(u0, a0, x, c0, d0); }, b0));
            check("ssm_scan c", grad_check([&](const Tensor& x) { return scan_loss(u0, a0, b0, x, d0); }, c0));
            check("ssm_scan d", grad_check([&](const Tensor& x) { return scan_loss(u0, a0, b0, c0, x); }, d0));
        }
        check("scale", grad_check([](const Tensor& x) { return reduce_sum_all(scale(x, -2.5)); },
                                  randt({3, 4}, s)));
    }
}

TEST_CASE("grad_check_params covers multi-tensor functions") {
    Tensor w1 = randt({4, 5}, 61).set_requires_grad(true);
    Tensor w2 = randt({5, 2}, 62).set_requires_grad(true);
    Tensor x = randt({3, 4}, 63);
    auto fn = [&]() { return reduce_mean_all(matmul(silu(matmul(x, w1)), w2)); };
    CHECK(grad_check_params(fn, {w1, w2}) < 1e-6);
}

TEST_CASE("forward primitives keep finite inputs finite") {
    Tensor x = randt({64}, 71, 5.0);
    for (const Tensor& y : {silu(x), sigmoid(x), softplus(x), tanh(x), softmax_rows(x)}) {
        for (double v : y.data()) CHECK(std::isfinite(v));
    }
}

}  // TEST_SUITE
