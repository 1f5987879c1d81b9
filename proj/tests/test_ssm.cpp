#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "cxrgen/rng.hpp"
#include "cxrgen/ssm.hpp"
#include "cxrgen/tensor.hpp"
#include "doctest.h"

using namespace cxrgen;

namespace {

Tensor randt(Shape shape, std::uint64_t seed, double stddev = 1.0) {
    Rng rng(seed);
    return Tensor::randn(std::move(shape), rng, stddev);
}

struct ScanInputs {
    Tensor u, a_bar, b_bar, c, d_skip;
};

// Well-conditioned random scan operands: |a_bar| < 1 as in a discretized
// stable system.
ScanInputs random_scan_inputs(std::int64_t l, std::int64_t d, std::int64_t s, std::uint64_t seed) {
    Rng rng(seed);
    ScanInputs in;
    in.u = Tensor::randn({l, d}, rng);
    in.a_bar = Tensor::zeros({l, d, s});
    for (double& v : in.a_bar.data()) v = rng.uniform(-0.99, 0.99);
    in.b_bar = Tensor::randn({l, d, s}, rng);
    in.c = Tensor::randn({l, s}, rng);
    in.d_skip = Tensor::randn({d}, rng);
    return in;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        worst = std::max(worst, std::fabs(a.data()[static_cast<std::size_t>(i)] -
                                          b.data()[static_cast<std::size_t>(i)]));
    }
    return worst;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        if (a.data()[static_cast<std::size_t>(i)] != b.data()[static_cast<std::size_t>(i)]) return false;
    }
    return true;
}

}  // namespace

TEST_SUITE("ssm") {

TEST_CASE("swiglu hidden width rule") {
    CHECK(swiglu_hidden(128) == 344);
    CHECK(swiglu_hidden(8) == 24);
    CHECK(swiglu_hidden(1024) == 2736);
    CHECK(swiglu_hidden(3) == 8);
}

TEST_CASE("swiglu at zero input is zero") {
    Tensor x = Tensor::zeros({2, 4});
    Tensor y = swiglu(x, randt({4, 8}, 1), randt({4, 8}, 2), randt({8, 4}, 3));
    for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("swiglu with identity-padded weights reduces to silu") {
    // hidden of width 8; route the scalar through lane 0 only.
    const std::int64_t h = 8;
    Tensor w1 = Tensor::zeros({1, h});
    Tensor w2 = Tensor::zeros({1, h});
    Tensor wo = Tensor::zeros({h, 1});
    w1.data()[0] = 1.0;
    w2.data()[0] = 1.0;
    wo.data()[0] = 1.0;
    Tensor y = swiglu(Tensor::from({1, 1}, {1.0}), w1, w2, wo);
    CHECK(y.item() == doctest::Approx(0.731059).epsilon(1e-6));
    CHECK(y.item() == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
}

TEST_CASE("swiglu gradients for input and all three weights") {
    Tensor x = randt({3, 4}, 11);
    Tensor w1 = randt({4, 8}, 12).set_requires_grad(true);
    Tensor w2 = randt({4, 8}, 13).set_requires_grad(true);
    Tensor wo = randt({8, 4}, 14).set_requires_grad(true);
    CHECK(grad_check([&](const Tensor& t) { return reduce_sum_all(swiglu(t, w1, w2, wo)); }, x) < 1e-4);
    CHECK(grad_check_params([&]() { return reduce_sum_all(swiglu(x, w1, w2, wo)); }, {w1, w2, wo}) <
          1e-4);
}

TEST_CASE("discretize fixed values") {
    SUBCASE("zero step keeps the state: a_bar = 1") {
        auto [a_bar, b_bar] = discretize(Tensor::zeros({1, 1}), Tensor::from({1, 1}, {-3.0}),
                                         Tensor::from({1, 1}, {2.0}));
        CHECK(a_bar.item() == 1.0);
        CHECK(b_bar.item() == 0.0);
    }
    SUBCASE("a = -1, delta = ln 2 halves the state") {
        auto [a_bar, b_bar] = discretize(Tensor::from({1, 1}, {std::log(2.0)}),
                                         Tensor::from({1, 1}, {-1.0}), Tensor::from({1, 1}, {1.0}));
        CHECK(a_bar.item() == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(b_bar.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("a = -2, delta = 0.1, b = 3") {
        auto [a_bar, b_bar] = discretize(Tensor::from({1, 1}, {0.1}), Tensor::from({1, 1}, {-2.0}),
                                         Tensor::from({1, 1}, {3.0}));
        CHECK(a_bar.item() == doctest::Approx(0.818731).epsilon(1e-6));
        CHECK(a_bar.item() == doctest::Approx(std::exp(-0.2)).epsilon(1e-12));
        CHECK(b_bar.item() == doctest::Approx(0.3).epsilon(1e-12));
    }
}

TEST_CASE("scalar scan recurrence") {
    // a_bar = 1/2, driven by unit input: h = 1, 1.5, 1.75.
    Tensor u = Tensor::full({3, 1}, 1.0);
    Tensor a_bar = Tensor::full({3, 1, 1}, 0.5);
    Tensor b_bar = Tensor::full({3, 1, 1}, 1.0);
    Tensor c = Tensor::full({3, 1}, 1.0);
    Tensor d_skip = Tensor::zeros({1});
    Tensor y = selective_scan_seq(u, a_bar, b_bar, c, d_skip);
    CHECK(y.data()[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(y.data()[1] == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(y.data()[2] == doctest::Approx(1.75).epsilon(1e-15));
}

TEST_CASE("zero a_bar makes the scan memoryless") {
    ScanInputs in = random_scan_inputs(6, 3, 2, 21);
    std::fill(in.a_bar.data().begin(), in.a_bar.data().end(), 0.0);
    Tensor y = selective_scan_seq(in.u, in.a_bar, in.b_bar, in.c, in.d_skip);
    for (std::int64_t t = 0; t < 6; ++t) {
        for (std::int64_t i = 0; i < 3; ++i) {
            double want = 0.0;
            for (std::int64_t j = 0; j < 2; ++j) {
                want += in.c.data()[static_cast<std::size_t>(t * 2 + j)] *
                        in.b_bar.data()[static_cast<std::size_t>((t * 3 + i) * 2 + j)] *
                        in.u.data()[static_cast<std::size_t>(t * 3 + i)];
            }
            want += in.d_skip.data()[static_cast<std::size_t>(i)] *
                    in.u.data()[static_cast<std::size_t>(t * 3 + i)];
            CHECK(y.data()[static_cast<std::size_t>(t * 3 + i)] == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("scan output is causal in its inputs") {
    ScanInputs in = random_scan_inputs(10, 3, 2, 31);
    Tensor base = selective_scan_seq(in.u, in.a_bar, in.b_bar, in.c, in.d_skip);
    ScanInputs bumped = random_scan_inputs(10, 3, 2, 31);
    bumped.u.data()[static_cast<std::size_t>(5 * 3 + 1)] += 2.5;
    Tensor moved = selective_scan_seq(bumped.u, bumped.a_bar, bumped.b_bar, bumped.c, bumped.d_skip);
    for (std::int64_t t = 0; t < 5; ++t) {
        for (std::int64_t i = 0; i < 3; ++i) {
            CHECK(base.data()[static_cast<std::size_t>(t * 3 + i)] ==
                  moved.data()[static_cast<std::size_t>(t * 3 + i)]);
        }
    }
    bool later_changed = false;
    for (std::int64_t t = 5; t < 10; ++t) {
        for (std::int64_t i = 0; i < 3; ++i) {
            later_changed = later_changed || base.data()[static_cast<std::size_t>(t * 3 + i)] !=
                                                moved.data()[static_cast<std::size_t>(t * 3 + i)];
        }
    }
    CHECK(later_changed);
}

TEST_CASE("chunked scan equals sequential") {
    SUBCASE("single chunk degenerates bitwise") {
        ScanInputs in = random_scan_inputs(17, 3, 2, 41);
        Tensor seq = selective_scan_seq(in.u, in.a_bar, in.b_bar, in.c, in.d_skip);
        Tensor chunked = selective_scan_chunked(in.u, in.a_bar, in.b_bar, in.c, in.d_skip, 17);
        CHECK(bitwise_equal(seq, chunked));
        Tensor bigger = selective_scan_chunked(in.u, in.a_bar, in.b_bar, in.c, in.d_skip, 64);
        CHECK(bitwise_equal(seq, bigger));
    }
    SUBCASE("chunk of one") {
        ScanInputs in = random_scan_inputs(23, 2, 3, 42);
        Tensor seq = selective_scan_seq(in.u, in.a_bar, in.b_bar, in.c, in.d_skip);
        Tensor chunked = selective_scan_chunked(in.u, in.a_bar, in.b_bar, in.c, in.d_skip, 1);
        CHECK(max_abs_diff(seq, chunked) <= 1e-12);
    }
    SUBCASE("mid-size chunks on an odd length") {
        ScanInputs in = random_scan_inputs(257, 4, 4, 43);
        Tensor seq = selective_scan_seq(in.u, in.a_bar, in.b_bar, in.c, in.d_skip);
        Tensor chunked = selective_scan_chunked(in.u, in.a_bar, in.b_bar, in.c, in.d_skip, 64);
        CHECK(max_abs_diff(seq, chunked) < 1e-10);
    }
    SUBCASE("hundred random shapes and chunk lengths") {
        Rng rng(44);
        for (int k = 0; k < 100; ++k) {
            const std::int64_t l = 1 + rng.below(96);
            const std::int64_t d = 1 + rng.below(4);
            const std::int64_t s = 1 + rng.below(4);
            const std::int64_t chunk = 1 + rng.below(l + 8);
            ScanInputs in = random_scan_inputs(l, d, s, 1000 + static_cast<std::uint64_t>(k));
            Tensor seq = selective_scan_seq(in.u, in.a_bar, in.b_bar, in.c, in.d_skip);
            Tensor chunked = selective_scan_chunked(in.u, in.a_bar, in.b_bar, in.c, in.d_skip, chunk);
            INFO("l=" << l << " d=" << d << " s=" << s << " chunk=" << chunk);
            CHECK(max_abs_diff(seq, chunked) < 1e-10);
        }
    }
    SUBCASE("invalid chunk length") {
        ScanInputs in = random_scan_inputs(4, 2, 2, 45);
        CHECK_THROWS_AS(selective_scan_chunked(in.u, in.a_bar, in.b_bar, in.c, in.d_skip, 0),
                        ContractError);
    }
}

TEST_CASE("state stays bounded over a long stable scan") {
    // Discretization with delta in [0.001, 0.1] and a = -(1..S) keeps
    // |a_bar| < 1, so the state cannot blow up over L = 4096.
    const std::int64_t l = 4096, d = 4, s = 4;
    Rng rng(51);
    Tensor delta = Tensor::zeros({l, d});
    for (double& v : delta.data()) v = rng.uniform(0.001, 0.1);
    Tensor a = Tensor::zeros({d, s});
    for (std::int64_t i = 0; i < d; ++i) {
        for (std::int64_t j = 0; j < s; ++j) a.data()[static_cast<std::size_t>(i * s + j)] = -(double)(j + 1);
    }
    Tensor b = Tensor::randn({l, s}, rng);
    auto [a_bar, b_bar] = discretize(delta, a, b);
    for (double v : a_bar.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    Tensor u = Tensor::randn({l, d}, rng);
    Tensor c = Tensor::randn({l, s}, rng);
    Tensor y = selective_scan_seq(u, a_bar, b_bar, c, Tensor::full({d}, 1.0));
    for (double v : y.data()) {
        CHECK(std::isfinite(v));
        CHECK(std::fabs(v) < 1e4);
    }
}

TEST_CASE("direction orders are permutations and invert cleanly") {
    const GridShape grid{3, 4};
    for (ScanDir dir : {ScanDir::RowForward, ScanDir::RowBackward, ScanDir::ColForward,
                        ScanDir::ColBackward}) {
        const auto order = direction_order(dir, grid);
        auto sorted = order;
        std::sort(sorted.begin(), sorted.end());
        std::vector<std::int64_t> iota(12);
        std::iota(iota.begin(), iota.end(), 0);
        CHECK(sorted == iota);
        const auto inv = inverse_order(order);
        for (std::size_t i = 0; i < order.size(); ++i) {
            CHECK(inv[static_cast<std::size_t>(order[i])] == static_cast<std::int64_t>(i));
        }
    }
    CHECK(direction_order(ScanDir::ColForward, {2, 3}) == std::vector<std::int64_t>{0, 3, 1, 4, 2, 5});
    CHECK_THROWS_AS(direction_order(ScanDir::RowForward, {0, 0}), ContractError);
}

TEST_CASE("block is the identity at init thanks to the zero output projection") {
    Rng rng(61);
    MambaBlockParams p = MambaBlockParams::init(8, 2, rng);
    Tensor tokens = randt({5, 8}, 62);
    Tensor out = mamba_block(tokens, p);
    CHECK(bitwise_equal(out, tokens));
}

TEST_CASE("block output is causal in token order") {
    Rng rng(71);
    MambaBlockParams p = MambaBlockParams::init(8, 2, rng);
    for (double& v : p.sw_out.data()) v = rng.normal(0.0, 0.3);
    Tensor tokens = randt({7, 8}, 72);
    Tensor base = mamba_block(tokens, p);
    Tensor bumped_tokens = tokens.detach();
    bumped_tokens.data()[static_cast<std::size_t>(4 * 8 + 3)] += 1.0;
    Tensor bumped = mamba_block(bumped_tokens, p);
    for (std::int64_t t = 0; t < 4; ++t) {
        for (std::int64_t i = 0; i < 8; ++i) {
            CHECK(base.data()[static_cast<std::size_t>(t * 8 + i)] ==
                  bumped.data()[static_cast<std::size_t>(t * 8 + i)]);
        }
    }
    CHECK(max_abs_diff(slice_rows(base, 4, 3), slice_rows(bumped, 4, 3)) > 0.0);
}

TEST_CASE("block gradients check out against finite differences") {
    Rng rng(81);
    MambaBlockParams p = MambaBlockParams::init(8, 2, rng);
    for (double& v : p.sw_out.data()) v = rng.normal(0.0, 0.3);  // leave the init point
    Tensor tokens = randt({5, 8}, 82, 0.7);
    Tensor target = randt({5, 8}, 83);
    auto loss = [&]() {
        Tensor d = sub(mamba_block(tokens, p), target);
        return reduce_mean_all(mul(d, d));
    };
    CHECK(grad_check_params(loss, p.all()) < 1e-4);
    CHECK(grad_check([&](const Tensor& t) {
              Tensor tt = t;
              Tensor d = sub(mamba_block(tt, p), target);
              return reduce_mean_all(mul(d, d));
          },
                     tokens) < 1e-4);
}

TEST_CASE("single forward direction reproduces the plain block") {
    Rng rng(91);
    MambaBlockParams p = MambaBlockParams::init(6, 2, rng);
    for (double& v : p.sw_out.data()) v = rng.normal(0.0, 0.3);
    Tensor tokens = randt({12, 6}, 92);
    Tensor plain = mamba_block(tokens, p);
    Tensor directional = mamba_block_directional(tokens, p, {ScanDir::RowForward}, {3, 4});
    CHECK(bitwise_equal(plain, directional));
}

TEST_CASE("constant rows neutralize direction reordering in the scan") {
    // All-equal tokens give row-constant scan operands; permuting equal rows
    // changes nothing, so every direction sees the same scan output.
    const std::int64_t l = 16;
    ScanInputs in = random_scan_inputs(1, 3, 2, 101);
    auto repeat_rows = [&](const Tensor& row, Shape full) {
        Tensor out = Tensor::zeros(full);
        const std::int64_t rs = row.numel();
        for (std::int64_t r = 0; r < l; ++r) {
            std::copy_n(row.data().data(), rs, out.data().data() + r * rs);
        }
        return out;
    };
    Tensor u = repeat_rows(in.u, {l, 3});
    Tensor a_bar = repeat_rows(in.a_bar, {l, 3, 2});
    Tensor b_bar = repeat_rows(in.b_bar, {l, 3, 2});
    Tensor c = repeat_rows(in.c, {l, 2});
    const GridShape grid{4, 4};
    Tensor reference;
    for (ScanDir dir : {ScanDir::RowForward, ScanDir::RowBackward, ScanDir::ColForward,
                        ScanDir::ColBackward}) {
        const auto order = direction_order(dir, grid);
        NoGradGuard ng;
        Tensor y = ssm_scan(gather_rows(u, order), gather_rows(a_bar, order),
                            gather_rows(b_bar, order), gather_rows(c, order), in.d_skip);
        if (!reference.defined()) {
            reference = y;
        } else {
            CHECK(bitwise_equal(reference, y));
        }
    }
}

TEST_CASE("four-direction block: shape, finiteness, and grid contract") {
    Rng rng(111);
    MambaBlockParams p = MambaBlockParams::init(6, 2, rng);
    for (double& v : p.sw_out.data()) v = rng.normal(0.0, 0.3);
    Tensor tokens = randt({12, 6}, 112);
    const std::vector<ScanDir> all_dirs = {ScanDir::RowForward, ScanDir::RowBackward,
                                           ScanDir::ColForward, ScanDir::ColBackward};
    Tensor out = mamba_block_directional(tokens, p, all_dirs, {3, 4});
    CHECK(out.shape() == Shape{12, 6});
    for (double v : out.data()) CHECK(std::isfinite(v));
    CHECK_THROWS_AS(mamba_block_directional(tokens, p, all_dirs, {5, 4}), ContractError);
    CHECK_THROWS_AS(mamba_block_directional(tokens, p, {}, {3, 4}), ContractError);
}

TEST_CASE("four-direction block gradients") {
    Rng rng(121);
    MambaBlockParams p = MambaBlockParams::init(6, 2, rng);
    for (double& v : p.sw_out.data()) v = rng.normal(0.0, 0.3);
    Tensor tokens = randt({6, 6}, 122, 0.7);
    const std::vector<ScanDir> all_dirs = {ScanDir::RowForward, ScanDir::RowBackward,
                                           ScanDir::ColForward, ScanDir::ColBackward};
    auto loss = [&]() {
        Tensor y = mamba_block_directional(tokens, p, all_dirs, {2, 3});
        return reduce_mean_all(mul(y, y));
    };
    Rng coord_rng(123);
    CHECK(grad_check_params(loss, p.all(), 1e-5, 40, &coord_rng) < 1e-4);
}

TEST_CASE("naive attention reference mixes every position") {
    Tensor tokens = randt({6, 4}, 131);
    Tensor out = naive_attention(tokens);
    CHECK(out.shape() == Shape{6, 4});
    // Bumping the last token must move the first row (anti-causal mixing).
    Tensor bumped = tokens.detach();
    bumped.data()[static_cast<std::size_t>(5 * 4 + 0)] += 3.0;
    Tensor out2 = naive_attention(bumped);
    CHECK(max_abs_diff(slice_rows(out, 0, 1), slice_rows(out2, 0, 1)) > 0.0);
}

}  // TEST_SUITE
