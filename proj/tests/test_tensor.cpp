#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "qptad/rng.hpp"
#include "qptad/tensor.hpp"

using namespace qptad;

TEST_CASE("tensor shape bookkeeping") {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.at2(1, 2) == 6.0);
    CHECK_THROWS_AS(Tensor({2, 0}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("linear identity and zero weight") {
    Tensor x({1, 2}, {1, 2});
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor zero_b({2});
    Tensor y = linear(x, eye, zero_b);
    CHECK(y.v == std::vector<double>{1, 2});

    Tensor w0({2, 2});
    Tensor b({2}, {3, 4});
    Tensor y2 = linear(x, w0, b);
    CHECK(y2.v == std::vector<double>{3, 4});
}

TEST_CASE("linear hand matrix multiply") {
    Tensor x({1, 2}, {1, 1});
    Tensor w({2, 2}, {2, 0, 0, 3});
    Tensor b({2}, {1, 1});
    Tensor y = linear(x, w, b);
    CHECK(y.v[0] == 3.0);
    CHECK(y.v[1] == 4.0);
}

TEST_CASE("linear broadcasts over leading extents and rejects mismatches") {
    Rng rng(3);
    Tensor x({4, 5, 3});
    for (double& v : x.v) v = rng.normal();
    Tensor w({3, 2});
    for (double& v : w.v) v = rng.normal();
    Tensor b({2}, {0.5, -0.25});
    Tensor y = linear(x, w, b);
    REQUIRE(y.shape == Shape{4, 5, 2});
    // row 7 of the flattened view equals the hand computation
    const int r = 7;
    for (int j = 0; j < 2; ++j) {
        double acc = b.v[j];
        for (int i = 0; i < 3; ++i) acc += x.v[r * 3 + i] * w.at2(i, j);
        CHECK_THAT(y.v[r * 2 + j], Catch::Matchers::WithinAbs(acc, 1e-14));
    }
    CHECK_THROWS_WITH(linear(x, Tensor({4, 2}), b), Catch::Matchers::ContainsSubstring("[4x2]"));
}

TEST_CASE("layer_norm constant row goes to zero") {
    Tensor x({1, 4}, {5, 5, 5, 5});
    Tensor gain({4}, 1.0);
    Tensor bias({4});
    Tensor y = layer_norm_lastdim(x, gain, bias, 1e-5);
    for (double v : y.v) CHECK_THAT(v, Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("layer_norm keeps an already-normalized row") {
    Tensor x({1, 2}, {-1, 1});
    Tensor y = layer_norm_lastdim(x, Tensor({2}, 1.0), Tensor({2}), 1e-5);
    CHECK_THAT(y.v[0], Catch::Matchers::WithinAbs(-1.0, 1e-5));
    CHECK_THAT(y.v[1], Catch::Matchers::WithinAbs(1.0, 1e-5));
}

TEST_CASE("layer_norm matches the direct mean/variance formula") {
    Tensor x({1, 3}, {0, 2, 4});
    Tensor y = layer_norm_lastdim(x, Tensor({3}, 1.0), Tensor({3}), 1e-5);
    auto [mean, var] = oracles::mean_var({0, 2, 4});
    for (int j = 0; j < 3; ++j) {
        const double expected = (x.v[j] - mean) / std::sqrt(var + 1e-5);
        CHECK_THAT(y.v[j], Catch::Matchers::WithinAbs(expected, 1e-14));
    }
}

TEST_CASE("layer_norm output statistics on random non-constant rows") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const int d = 4 + static_cast<int>(rng.uniform_int(0, 28));
        std::vector<double> row(d);
        for (double& v : row) v = rng.uniform(-30.0, 30.0);
        if (oracles::mean_var(row).second < 10.0) continue;  // eps smoothing needs real spread
        Tensor x({1, d}, row);
        Tensor y = layer_norm_lastdim(x, Tensor({d}, 1.0), Tensor({d}), 1e-5);
        auto [mean, var] = oracles::mean_var(y.v);
        CHECK(std::abs(mean) <= 1e-10);
        CHECK(std::abs(var - 1.0) <= 1e-6);
    }
}

TEST_CASE("softmax uniform and stability cases") {
    Tensor u = softmax_lastdim(Tensor({1, 4}));
    for (double v : u.v) CHECK_THAT(v, Catch::Matchers::WithinAbs(0.25, 1e-15));

    Tensor big = softmax_lastdim(Tensor({1, 2}, {1000.0, 0.0}));
    CHECK_THAT(big.v[0], Catch::Matchers::WithinAbs(1.0, 1e-12));
    CHECK_THAT(big.v[1], Catch::Matchers::WithinAbs(0.0, 1e-12));
    CHECK(all_finite(big));
}

TEST_CASE("softmax closed-form exponentials") {
    Tensor x({1, 3}, {std::log(1.0), std::log(2.0), std::log(3.0)});
    Tensor y = softmax_lastdim(x);
    CHECK_THAT(y.v[0], Catch::Matchers::WithinAbs(1.0 / 6.0, 1e-14));
    CHECK_THAT(y.v[1], Catch::Matchers::WithinAbs(2.0 / 6.0, 1e-14));
    CHECK_THAT(y.v[2], Catch::Matchers::WithinAbs(3.0 / 6.0, 1e-14));
}

TEST_CASE("softmax rows sum to one with entries in (0,1)") {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        const int k = 2 + static_cast<int>(rng.uniform_int(0, 14));
        Tensor x({3, k});
        // keep rows unsaturated so 1 - exp(gap) stays below 1.0 in double
        for (double& v : x.v) v = rng.uniform(-12.0, 12.0);
        Tensor y = softmax_lastdim(x);
        for (int r = 0; r < 3; ++r) {
            double sum = 0.0;
            for (int j = 0; j < k; ++j) {
                const double p = y.at2(r, j);
                CHECK(p > 0.0);
                CHECK(p < 1.0);
                sum += p;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("relu known values and sign-mask oracle") {
    Tensor y = relu(Tensor({3}, {-1, 0, 2}));
    CHECK(y.v == std::vector<double>{0, 0, 2});
    CHECK(relu(Tensor({3}, {-5, -1, -0.5})).v == std::vector<double>{0, 0, 0});

    Rng rng(23);
    Tensor x({64});
    for (double& v : x.v) v = rng.normal();
    Tensor r = relu(x);
    for (size_t i = 0; i < x.numel(); ++i) CHECK(r.v[i] == (x.v[i] > 0.0 ? x.v[i] : 0.0));
}

TEST_CASE("interp_sample grid points, midpoints and clamping") {
    Tensor seq({4, 2}, {0, 0, 2, 4, 6, 8, 10, 12});
    // exact row at integer t
    Tensor r2 = interp_sample(seq, 2.0);
    CHECK(r2.v == std::vector<double>{6, 8});
    // midpoint average
    Tensor mid = interp_sample(seq, 0.5);
    CHECK(mid.v == std::vector<double>{1, 2});
    // clamped below: row 0, identical to sampling at the pre-clamped time
    Tensor low = interp_sample(seq, -3.7);
    Tensor low_ref = interp_sample(seq, std::clamp(-3.7, 0.0, 3.0));
    CHECK(low.v == std::vector<double>{0, 0});
    CHECK(low.v == low_ref.v);
    Tensor high = interp_sample(seq, 99.0);
    CHECK(high.v == std::vector<double>{10, 12});
    // a sequence without rows cannot even be constructed; non-2-D input is rejected
    CHECK_THROWS_AS(interp_sample(Tensor({4}, {1, 2, 3, 4}), 0.0), std::invalid_argument);
}

TEST_CASE("interp_sample is linear between adjacent grid points") {
    Rng rng(31);
    Tensor seq({8, 3});
    for (double& v : seq.v) v = rng.normal();
    for (int trial = 0; trial < 200; ++trial) {
        const double t = rng.uniform(0.0, 7.0);
        const double lam = t - std::floor(t);
        Tensor lo = interp_sample(seq, std::floor(t));
        Tensor hi = interp_sample(seq, std::ceil(t));
        Tensor mid = interp_sample(seq, t);
        for (int j = 0; j < 3; ++j)
            CHECK_THAT(mid.v[j], Catch::Matchers::WithinAbs((1 - lam) * lo.v[j] + lam * hi.v[j], 1e-12));
    }
}

TEST_CASE("ops are deterministic") {
    Rng rng(41);
    Tensor x({5, 7});
    for (double& v : x.v) v = rng.normal();
    Tensor a = softmax_lastdim(x);
    Tensor b = softmax_lastdim(x);
    CHECK(a.v == b.v);
    Tensor g({7}, 1.0), bi({7});
    CHECK(layer_norm_lastdim(x, g, bi, 1e-5).v == layer_norm_lastdim(x, g, bi, 1e-5).v);
}
