#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers.hpp"

#include "vitlens/error.hpp"
#include "vitlens/tensor.hpp"

#include <cmath>
#include <random>

using namespace vitlens;

namespace {

// Straight triple loop in long double.
std::vector<long double> naive_matmul(const Tensor& a, const Tensor& b) {
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<long double> out(static_cast<size_t>(m * n), 0.0L);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
            for (int64_t p = 0; p < k; ++p) out[static_cast<size_t>(i * n + j)] += static_cast<long double>(a.at(i, p)) * b.at(p, j);
    return out;
}

} // namespace

TEST_CASE("matmul identity and forced product") {
    const Tensor eye({2, 2}, {1, 0, 0, 1});
    const Tensor a({2, 2}, {1, 2, 3, 4});
    CHECK(matmul(eye, a) == a);
    const Tensor b({2, 2}, {5, 6, 7, 8});
    CHECK(matmul(a, b) == Tensor({2, 2}, {19, 22, 43, 50}));
}

TEST_CASE("matmul matches naive oracle on random 7x5 . 5x3") {
    std::mt19937_64 rng(7);
    const Tensor a = testing::random_tensor({7, 5}, rng);
    const Tensor b = testing::random_tensor({5, 3}, rng);
    const Tensor c = matmul(a, b);
    const auto oracle = naive_matmul(a, b);
    for (size_t i = 0; i < oracle.size(); ++i) CHECK(std::abs(c[i] - static_cast<double>(oracle[i])) < 1e-6);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    const Tensor a({2, 3}), b({2, 3});
    try {
        matmul(a, b);
        FAIL("expected dimension error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::dimension);
        CHECK(std::string(e.what()).find("[2x3] x [2x3]") != std::string::npos);
    }
}

TEST_CASE("matmul with identity is exact and reproducible") {
    std::mt19937_64 rng(11);
    const Tensor a = testing::random_tensor({4, 6}, rng);
    const Tensor b = testing::random_tensor({6, 5}, rng);
    Tensor eye({6, 6});
    for (int i = 0; i < 6; ++i) eye.at(i, i) = 1.0f;
    CHECK(matmul(matmul(a, eye), b) == matmul(a, b));
    CHECK(matmul(a, b) == matmul(a, b));
}

TEST_CASE("linear") {
    SUBCASE("identity weight, zero bias") {
        const Tensor x({2, 3}, {1, -2, 3, 0.5f, 0, -1});
        Tensor w({3, 3});
        for (int i = 0; i < 3; ++i) w.at(i, i) = 1.0f;
        CHECK(linear(x, w, Tensor({3})) == x);
    }
    SUBCASE("forced arithmetic") {
        const Tensor y = linear(Tensor({2}, {1, 1}), Tensor({2, 2}, {2, 0, 0, 3}), Tensor({2}, {1, 1}));
        CHECK(y == Tensor({2}, {3, 4}));
    }
    SUBCASE("agrees with matmul plus broadcast bias") {
        std::mt19937_64 rng(3);
        const Tensor x = testing::random_tensor({5, 4}, rng);
        const Tensor w = testing::random_tensor({6, 4}, rng);
        const Tensor b = testing::random_tensor({6}, rng);
        Tensor wt({4, 6});
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 4; ++j) wt.at(j, i) = w.at(i, j);
        const Tensor prod = matmul(x, wt);
        const Tensor y = linear(x, w, b);
        for (int64_t r = 0; r < 5; ++r)
            for (int64_t c = 0; c < 6; ++c) CHECK(std::abs(y.at(r, c) - (prod.at(r, c) + b[static_cast<size_t>(c)])) < 1e-6);
    }
    SUBCASE("shape mismatch") {
        CHECK_THROWS_AS(linear(Tensor({2, 3}), Tensor({2, 2}), Tensor({2})), Error);
    }
}

TEST_CASE("layer_norm") {
    const Tensor ones = Tensor::filled({8}, 1.0f);
    const Tensor zeros({8});
    SUBCASE("constant input maps to beta") {
        const Tensor x = Tensor::filled({8}, 3.5f);
        CHECK(layer_norm(x, ones, zeros) == zeros);
        std::mt19937_64 rng(5);
        const Tensor beta = testing::random_tensor({8}, rng);
        const Tensor y = layer_norm(x, ones, beta);
        CHECK(testing::max_abs_diff(y.data(), beta.data()) < 1e-6);
    }
    SUBCASE("random input statistics") {
        std::mt19937_64 rng(9);
        const Tensor x = testing::random_tensor({3, 8}, rng, 4.0f);
        const Tensor y = layer_norm(x, ones, zeros);
        for (int64_t r = 0; r < 3; ++r) {
            double mean = 0, var = 0;
            for (float v : y.row(r)) mean += v;
            mean /= 8;
            for (float v : y.row(r)) var += (v - mean) * (v - mean);
            var /= 8;
            CHECK(std::abs(mean) < 1e-6);
            CHECK(std::abs(var - 1.0) < 1e-3);
        }
    }
    SUBCASE("eps must be positive") { CHECK_THROWS_AS(layer_norm(ones, ones, zeros, 0.0f), Error); }
}

TEST_CASE("softmax_lastdim") {
    CHECK(softmax_lastdim(Tensor({2}, {0, 0})) == Tensor({2}, {0.5f, 0.5f}));
    const Tensor big = softmax_lastdim(Tensor({2}, {1000, 0}));
    CHECK(big[0] == 1.0f);
    CHECK(big[1] >= 0.0f);
    CHECK(big[1] < 1e-30f);

    std::mt19937_64 rng(21);
    const Tensor x = testing::random_tensor({1, 6}, rng, 3.0f);
    const Tensor y = softmax_lastdim(x);
    long double total = 0;
    for (float v : x.data()) total += std::exp(static_cast<long double>(v));
    for (size_t i = 0; i < 6; ++i) {
        CHECK(std::abs(y[i] - static_cast<double>(std::exp(static_cast<long double>(x[i])) / total)) < 1e-6);
    }
}

TEST_CASE("softmax rows sum to one for extreme magnitudes") {
    std::mt19937_64 rng(33);
    for (float scale : {1e-3f, 1.0f, 50.0f, 1e4f, 1e30f}) {
        const Tensor y = softmax_lastdim(testing::random_tensor({16, 9}, rng, scale));
        for (int64_t r = 0; r < y.rows(); ++r) {
            double s = 0;
            for (float v : y.row(r)) {
                CHECK(v >= 0.0f);
                s += v;
            }
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("activations") {
    CHECK(activate(0.0f, Activation::gelu_exact) == 0.0f);
    CHECK(activate(0.0f, Activation::quick_gelu) == 0.0f);
    CHECK(std::abs(activate(20.0f, Activation::gelu_exact) - 20.0f) < 1e-6);
    const long double oracle = 1.0L / (1.0L + std::exp(-1.702L));
    CHECK(std::abs(activate(1.0f, Activation::quick_gelu) - static_cast<double>(oracle)) < 1e-6);
    CHECK(parse_activation("quick_gelu") == Activation::quick_gelu);
    try {
        parse_activation("relu6");
        FAIL("expected configuration error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::configuration);
    }
}

TEST_CASE("cosine and l2_normalize") {
    const Tensor v({3}, {1, 2, 3});
    CHECK(std::abs(cosine(v.data(), v.data()) - 1.0) < 1e-12);
    const Tensor e1({2}, {1, 0}), e2({2}, {0, 1});
    CHECK(cosine(e1.data(), e2.data()) == 0.0);

    std::mt19937_64 rng(4);
    for (int i = 0; i < 100; ++i) {
        const Tensor a = testing::random_tensor({12}, rng), b = testing::random_tensor({12}, rng);
        long double ab = 0, aa = 0, bb = 0;
        for (size_t c = 0; c < 12; ++c) {
            ab += static_cast<long double>(a[c]) * b[c];
            aa += static_cast<long double>(a[c]) * a[c];
            bb += static_cast<long double>(b[c]) * b[c];
        }
        CHECK(std::abs(cosine(a.data(), b.data()) - static_cast<double>(ab / std::sqrt(aa * bb))) < 1e-6);
    }

    const Tensor n = l2_normalize(Tensor({2, 2}, {3, 4, 0, 2}));
    CHECK(n == Tensor({2, 2}, {0.6f, 0.8f, 0.0f, 1.0f}));
    const Tensor zero({3});
    try {
        cosine(zero.data(), v.data());
        FAIL("expected degenerate-vector error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::degenerate_vector);
    }
    CHECK_THROWS_AS(l2_normalize(zero), Error);
}

TEST_CASE("tensor construction validates element count") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), Error);
    const Tensor t({2, 3});
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
}
