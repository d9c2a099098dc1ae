#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers.hpp"

#include "vitlens/error.hpp"
#include "vitlens/saliency.hpp"

#include <algorithm>
#include <cmath>

using namespace vitlens;
using Mat = std::vector<std::vector<double>>;

namespace {

// Trace with given attentions only; states are zero placeholders.
ActivationTrace synthetic_trace(std::vector<Tensor> attentions, int n) {
    ActivationTrace t;
    t.attentions = std::move(attentions);
    for (size_t k = 0; k <= t.attentions.size(); ++k) t.states.push_back(Tensor::zeros({n, 4}));
    return t;
}

Tensor random_attention(int heads, int n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor a({heads, n, n});
    for (int64_t r = 0; r < heads * n; ++r) {
        double z = 0;
        auto row = a.row(r);
        for (auto& x : row) z += (x = static_cast<float>(std::pow(u(rng), 3)));
        for (auto& x : row) x = static_cast<float>(x / z);
    }
    return a;
}

// Naive rollout written directly from the recipe.
Mat oracle_rollout(const ActivationTrace& t, int upto) {
    const int n = t.seq_len();
    Mat flow(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(n), 0.0));
    for (int i = 0; i < n; ++i) flow[static_cast<size_t>(i)][static_cast<size_t>(i)] = 1.0;
    for (int k = 1; k < upto; ++k) {
        const Tensor& a = t.attentions[static_cast<size_t>(k - 1)];
        const int heads = static_cast<int>(a.dim(0));
        Mat mixed(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(n)));
        for (int r = 0; r < n; ++r) {
            double z = 0;
            for (int c = 0; c < n; ++c) {
                double mean = 0;
                for (int h = 0; h < heads; ++h) mean += a[static_cast<size_t>((h * n + r) * n + c)];
                mean /= heads;
                mixed[static_cast<size_t>(r)][static_cast<size_t>(c)] = 0.5 * mean + (r == c ? 0.5 : 0.0);
                z += mixed[static_cast<size_t>(r)][static_cast<size_t>(c)];
            }
            for (auto& x : mixed[static_cast<size_t>(r)]) x /= z;
        }
        Mat next(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(n), 0.0));
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < n; ++c)
                for (int q = 0; q < n; ++q) next[static_cast<size_t>(r)][static_cast<size_t>(c)] += mixed[static_cast<size_t>(r)][static_cast<size_t>(q)] * flow[static_cast<size_t>(q)][static_cast<size_t>(c)];
        flow = std::move(next);
    }
    return flow;
}

int64_t pixel_oracle(const std::vector<uint8_t>& mask, int grid, int p, const std::vector<Box>& truth, int64_t& predicted) {
    int64_t inter = 0;
    predicted = 0;
    for (int y = 0; y < grid * p; ++y) {
        for (int x = 0; x < grid * p; ++x) {
            if (!mask[static_cast<size_t>((y / p) * grid + x / p)]) continue;
            ++predicted;
            if (std::any_of(truth.begin(), truth.end(), [&](const Box& b) { return b.contains(x, y); })) ++inter;
        }
    }
    return inter;
}

} // namespace

TEST_CASE("rollout") {
    std::mt19937_64 rng(1);
    const int n = 5; // 2x2 grid + CLS
    SUBCASE("first layer is the identity") {
        const auto t = synthetic_trace({random_attention(2, n, rng)}, n);
        const Tensor r = rollout(t, 1);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) CHECK(r.at(i, j) == (i == j ? 1.0f : 0.0f));
    }
    SUBCASE("single uniform block") {
        const auto t = synthetic_trace({Tensor::filled({3, n, n}, 1.0f / n)}, n);
        const Tensor r = rollout(t, 2);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) CHECK(r.at(i, j) == doctest::Approx(0.5 / n + (i == j ? 0.5 : 0.0)));
    }
    SUBCASE("three random blocks against the naive product") {
        const auto t = synthetic_trace({random_attention(2, n, rng), random_attention(2, n, rng), random_attention(2, n, rng)}, n);
        for (int upto = 1; upto <= 4; ++upto) {
            const Tensor r = rollout(t, upto);
            const Mat o = oracle_rollout(t, upto);
            double worst = 0, row_err = 0;
            for (int i = 0; i < n; ++i) {
                double s = 0;
                for (int j = 0; j < n; ++j) {
                    worst = std::max(worst, std::abs(r.at(i, j) - o[static_cast<size_t>(i)][static_cast<size_t>(j)]));
                    s += r.at(i, j);
                }
                row_err = std::max(row_err, std::abs(s - 1.0));
            }
            CHECK(worst < 1e-6);
            CHECK(row_err < 1e-6);
        }
        CHECK_THROWS_AS(rollout(t, 5), Error);
        CHECK_THROWS_AS(rollout(t, 0), Error);
    }
    SUBCASE("rows sum to one on real traces") {
        const Manifest m = testing::toy_manifest(4, 8, 2, 2, 3);
        const ModelBundle b = testing::random_bundle(m, 2, 1.0f);
        const auto t = forward_full(testing::random_tensor({m.num_patches(), m.patch_dim()}, rng), b);
        for (int i = 1; i <= 5; ++i) {
            const Tensor r = rollout(t, i);
            for (int64_t row = 0; row < r.rows(); ++row) {
                double s = 0;
                for (float x : r.row(row)) s += x;
                CHECK(std::abs(s - 1.0) < 1e-6);
            }
        }
    }
}

TEST_CASE("token_saliency") {
    std::mt19937_64 rng(3);
    const int n = 10; // 3x3 grid
    SUBCASE("identity rollout highlights the token's own patch") {
        const auto t = synthetic_trace({random_attention(1, n, rng)}, n);
        const SaliencyMap s = token_saliency({1, 5}, t);
        CHECK(s.grid_size == 3);
        CHECK(s.mask_count() == 1);
        CHECK(s.mask[4] == 1);
        CHECK(s.grid[4] == 1.0f);
        const SaliencyMap cls = token_saliency({1, 0}, t);
        CHECK(cls.mask_count() == 0);
        for (float x : cls.grid.data()) CHECK(x == 0.0f);
    }
    SUBCASE("constant row gives an empty mask") {
        // Uniform attention where the token row is flat over all patches.
        const auto t = synthetic_trace({Tensor::filled({1, n, n}, 1.0f / n)}, n);
        const SaliencyMap s = token_saliency({2, 0}, t);
        CHECK(s.mask_count() == 0);
        for (float x : s.grid.data()) CHECK(x == 0.0f);
    }
    SUBCASE("random traces against an oracle mask") {
        for (int trial = 0; trial < 20; ++trial) {
            const auto t = synthetic_trace({random_attention(2, n, rng), random_attention(2, n, rng)}, n);
            const int layer = 1 + trial % 3, pos = trial % n;
            const Mat o = oracle_rollout(t, layer);
            const auto& row = o[static_cast<size_t>(pos)];
            const double lo = *std::min_element(row.begin() + 1, row.end());
            const double hi = *std::max_element(row.begin() + 1, row.end());
            const SaliencyMap s = token_saliency({layer, pos}, t);
            for (int p = 0; p < 9; ++p) {
                const bool want = hi > lo && (row[static_cast<size_t>(p + 1)] - lo) / (hi - lo) >= 0.9;
                CHECK(static_cast<bool>(s.mask[static_cast<size_t>(p)]) == want);
                CHECK(s.grid[static_cast<size_t>(p)] >= 0.0f);
                CHECK(s.grid[static_cast<size_t>(p)] <= 1.0f);
            }
            if (hi > lo) {
                CHECK(*std::max_element(s.grid.data().begin(), s.grid.data().end()) == 1.0f);
                CHECK(*std::min_element(s.grid.data().begin(), s.grid.data().end()) == 0.0f);
            }
        }
    }
    SUBCASE("affine rescaling of attention row keeps the mask") {
        // Rollout through one block: row = 0.5*a + 0.5*e_j. Scaling the patch part
        // of a by a positive constant while keeping the row stochastic is affine on
        // the patch columns when the CLS column absorbs the change.
        Tensor a = Tensor::zeros({1, n, n});
        std::uniform_real_distribution<double> u(0.1, 1.0);
        for (int r = 0; r < n; ++r) {
            double z = 0;
            for (int c = 1; c < n; ++c) z += (a.at(r, c) = static_cast<float>(u(rng)));
            for (int c = 1; c < n; ++c) a.at(r, c) = static_cast<float>(a.at(r, c) / z * 0.5);
            a.at(r, 0) = 0.5f;
        }
        Tensor b = a;
        for (int r = 0; r < n; ++r) {
            for (int c = 1; c < n; ++c) b.at(r, c) *= 0.4f;
            b.at(r, 0) = 1.0f - 0.4f * 0.5f;
        }
        const auto sa = token_saliency({2, 0}, synthetic_trace({a}, n));
        const auto sb = token_saliency({2, 0}, synthetic_trace({b}, n));
        CHECK(sa.mask == sb.mask);
        CHECK(testing::max_abs_diff(sa.grid.data(), sb.grid.data()) < 1e-5);
    }
    SUBCASE("json and overlay") {
        const auto t = synthetic_trace({random_attention(2, n, rng)}, n);
        const SaliencyMap s = token_saliency({2, 3}, t);
        const auto j = saliency_to_json(s);
        CHECK(j["grid"].size() == 3);
        CHECK(j["grid"][0].size() == 3);
        CHECK(j["mask"].size() == 3);
        CHECK(j["threshold"] == 0.9);
        const Image img = Image::solid(12, 12, {10, 20, 30});
        const Image over = saliency_overlay(img, s);
        CHECK(over.width == 12);
        CHECK_FALSE(over == img);
        CHECK_THROWS_AS(saliency_overlay(Image::solid(12, 10, {0, 0, 0}), s), Error);
    }
}

TEST_CASE("iop") {
    const int grid = 4, p = 3;
    std::vector<uint8_t> mask(16, 0);
    CHECK_FALSE(iop(mask, grid, p, {{"t", 0, 0, 12, 12}}).has_value());

    mask[0] = mask[1] = mask[4] = mask[5] = 1; // top-left 2x2 patches = 6x6 pixels
    CHECK(*iop(mask, grid, p, {{"t", 0, 0, 6, 6}}) == 1.0);
    CHECK(*iop(mask, grid, p, {{"t", 6, 6, 12, 12}}) == 0.0);
    // three of the four patches inside the truth union
    const std::vector<Box> three = {{"a", 0, 0, 6, 3}, {"b", 0, 3, 3, 6}};
    CHECK(*iop(mask, grid, p, three) == doctest::Approx(0.75));
    int64_t pred = 0;
    CHECK(pixel_oracle(mask, grid, p, three, pred) == 27);
    CHECK(pred == 36);

    SUBCASE("monotone in the truth region and agrees with the pixel oracle") {
        std::mt19937_64 rng(7);
        std::uniform_int_distribution<int> coord(0, 12);
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<uint8_t> m(16);
            for (auto& x : m) x = static_cast<uint8_t>(rng() % 2);
            if (std::count(m.begin(), m.end(), 1) == 0) m[3] = 1;
            std::vector<Box> truth;
            double last = -1;
            for (int k = 0; k < 4; ++k) {
                int x0 = coord(rng), x1 = coord(rng), y0 = coord(rng), y1 = coord(rng);
                if (x0 > x1) std::swap(x0, x1);
                if (y0 > y1) std::swap(y0, y1);
                if (x0 == x1 || y0 == y1) continue;
                truth.push_back({"t", x0, y0, x1, y1});
                const double v = *iop(m, grid, p, truth);
                int64_t pa = 0;
                const int64_t inter = pixel_oracle(m, grid, p, truth, pa);
                CHECK(v == doctest::Approx(static_cast<double>(inter) / pa));
                CHECK(v >= last);
                last = v;
            }
        }
    }
}
