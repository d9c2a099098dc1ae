#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers.hpp"

#include "vitlens/engine.hpp"
#include "vitlens/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

using namespace vitlens;
using Mat = std::vector<std::vector<double>>;

namespace {

// Straight-line double-precision reimplementation of one block, loop by loop.
struct ScalarBlock {
    const BlockWeights& w;
    const Manifest& m;

    static double w_at(const Tensor& t, int r, int c) { return t.at(r, c); }

    std::vector<double> ln(const std::vector<double>& x, const Tensor& g, const Tensor& b) const {
        double mean = 0;
        for (double v : x) mean += v;
        mean /= static_cast<double>(x.size());
        double var = 0;
        for (double v : x) var += (v - mean) * (v - mean);
        var /= static_cast<double>(x.size());
        std::vector<double> y(x.size());
        for (size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + m.ln_eps) * g[i] + b[i];
        return y;
    }

    std::vector<double> lin(const std::vector<double>& x, const Tensor& W, const Tensor& b) const {
        std::vector<double> y(static_cast<size_t>(W.dim(0)));
        for (int o = 0; o < W.dim(0); ++o) {
            double s = b.empty() ? 0.0 : b[static_cast<size_t>(o)];
            for (int i = 0; i < W.dim(1); ++i) s += w_at(W, o, i) * x[static_cast<size_t>(i)];
            y[static_cast<size_t>(o)] = s;
        }
        return y;
    }

    double act(double x) const {
        if (m.activation == Activation::quick_gelu) return x / (1.0 + std::exp(-1.702 * x));
        return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    }

    Mat run(const Mat& h) const {
        const size_t n = h.size();
        const int heads = m.num_heads, hd = m.head_dim();
        Mat q(n), k(n), v(n);
        for (size_t t = 0; t < n; ++t) {
            const auto x = ln(h[t], w.ln1_gamma, w.ln1_beta);
            q[t] = lin(x, w.q_weight, w.q_bias);
            k[t] = lin(x, w.k_weight, w.k_bias);
            v[t] = lin(x, w.v_weight, w.v_bias);
        }
        Mat concat(n, std::vector<double>(static_cast<size_t>(m.hidden_dim), 0.0));
        for (int hh = 0; hh < heads; ++hh) {
            for (size_t a = 0; a < n; ++a) {
                std::vector<double> logits(n);
                for (size_t b = 0; b < n; ++b) {
                    double s = 0;
                    for (int d = 0; d < hd; ++d) s += q[a][static_cast<size_t>(hh * hd + d)] * k[b][static_cast<size_t>(hh * hd + d)];
                    logits[b] = s / std::sqrt(static_cast<double>(hd));
                }
                const double mx = *std::max_element(logits.begin(), logits.end());
                double z = 0;
                for (auto& l : logits) z += (l = std::exp(l - mx));
                for (size_t b = 0; b < n; ++b) {
                    for (int d = 0; d < hd; ++d) concat[a][static_cast<size_t>(hh * hd + d)] += logits[b] / z * v[b][static_cast<size_t>(hh * hd + d)];
                }
            }
        }
        Mat out(n);
        for (size_t t = 0; t < n; ++t) {
            auto mid = lin(concat[t], w.out_weight, w.out_bias);
            for (size_t i = 0; i < mid.size(); ++i) mid[i] += h[t][i];
            auto f = lin(ln(mid, w.ln2_gamma, w.ln2_beta), w.fc1_weight, w.fc1_bias);
            for (auto& x : f) x = act(x);
            auto g = lin(f, w.fc2_weight, w.fc2_bias);
            for (size_t i = 0; i < g.size(); ++i) g[i] += mid[i];
            out[t] = g;
        }
        return out;
    }
};

Mat to_mat(const Tensor& t) {
    Mat m(static_cast<size_t>(t.rows()));
    for (int64_t r = 0; r < t.rows(); ++r) m[static_cast<size_t>(r)].assign(t.row(r).begin(), t.row(r).end());
    return m;
}

Tensor random_patches(const Manifest& m, uint64_t seed) {
    std::mt19937_64 rng(seed);
    return testing::random_tensor({m.num_patches(), m.patch_dim()}, rng);
}

} // namespace

TEST_CASE("embed") {
    const Manifest m = testing::toy_manifest(1, 8, 2);
    SUBCASE("zero patches and positions leave only the class row") {
        ModelBundle b = testing::random_bundle(m, 3);
        b.pos_embedding = Tensor::zeros(b.pos_embedding.shape());
        const Tensor h = embed(Tensor::zeros({m.num_patches(), m.patch_dim()}), b);
        CHECK(h.shape() == Shape{m.seq_len(), 8});
        for (int c = 0; c < 8; ++c) CHECK(h.at(0, c) == b.class_embedding[static_cast<size_t>(c)]);
        for (int64_t i = 8; i < static_cast<int64_t>(h.size()); ++i) CHECK(h[static_cast<size_t>(i)] == 0.0f);
    }
    SUBCASE("rows match manual projection") {
        const ModelBundle b = testing::random_bundle(m, 4);
        const Tensor patches = random_patches(m, 5);
        const Tensor h = embed(patches, b);
        for (int t = 0; t < m.num_patches(); ++t) {
            for (int d = 0; d < 8; ++d) {
                double s = b.pos_embedding.at(1 + t, d);
                for (int i = 0; i < m.patch_dim(); ++i) s += static_cast<double>(b.patch_embed.at(d, i)) * patches.at(t, i);
                CHECK(h.at(1 + t, d) == doctest::Approx(s).epsilon(1e-5));
            }
        }
    }
    SUBCASE("shape for a 7x7 grid with width 512") {
        const Manifest big = testing::toy_manifest(1, 512, 8, 2, 7);
        const ModelBundle b = ModelBundle::zeros(big);
        CHECK(embed(Tensor::zeros({49, 12}), b).shape() == Shape{50, 512});
    }
    SUBCASE("patch count mismatch") {
        const ModelBundle b = ModelBundle::zeros(m);
        CHECK_THROWS_AS(embed(Tensor::zeros({3, m.patch_dim()}), b), Error);
    }
}

TEST_CASE("block_full") {
    SUBCASE("singleton sequence has unit attention") {
        const Manifest m = testing::toy_manifest(1, 8, 2);
        const ModelBundle b = testing::random_bundle(m, 7);
        std::mt19937_64 rng(1);
        const auto out = block_full(testing::random_tensor({1, 8}, rng), 1, b);
        CHECK(out.attention.shape() == Shape{2, 1, 1});
        CHECK(out.attention[0] == 1.0f);
        CHECK(out.attention[1] == 1.0f);
    }
    SUBCASE("zero weights give the residual identity") {
        const Manifest m = testing::toy_manifest(2, 8, 2);
        ModelBundle b = ModelBundle::zeros(m);
        std::mt19937_64 rng(2);
        const Tensor h = testing::random_tensor({m.seq_len(), 8}, rng);
        CHECK(block_full(h, 2, b).hidden == h);
    }
    SUBCASE("matches the scalar oracle") {
        for (Activation act : {Activation::quick_gelu, Activation::gelu_exact}) {
            Manifest m = testing::toy_manifest(1, 8, 2);
            m.activation = act;
            const ModelBundle b = testing::random_bundle(m, 11);
            std::mt19937_64 rng(12);
            const Tensor h = testing::random_tensor({3, 8}, rng);
            const Tensor got = block_full(h, 1, b).hidden;
            const Mat want = ScalarBlock{b.blocks[0], m}.run(to_mat(h));
            double worst = 0;
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 8; ++c) worst = std::max(worst, std::abs(got.at(r, c) - want[static_cast<size_t>(r)][static_cast<size_t>(c)]));
            CHECK(worst < 1e-5);
        }
    }
    SUBCASE("block index range") {
        const Manifest m = testing::toy_manifest(1, 8, 2);
        const ModelBundle b = ModelBundle::zeros(m);
        CHECK_THROWS_AS(block_full(Tensor::zeros({5, 8}), 2, b), Error);
        CHECK_THROWS_AS(block_full(Tensor::zeros({5, 8}), 0, b), Error);
    }
}

TEST_CASE("block_ablated") {
    SUBCASE("zero weights are the identity") {
        const Manifest m = testing::toy_manifest(1, 8, 2);
        const ModelBundle b = ModelBundle::zeros(m);
        std::mt19937_64 rng(3);
        const Tensor x = testing::random_tensor({8}, rng);
        CHECK(block_ablated(x.data(), 1, b).data().size() == 8);
        CHECK(testing::max_abs_diff(block_ablated(x.data(), 1, b).data(), x.data()) == 0.0);
    }
    SUBCASE("single-token equivalence over 200 random models") {
        double worst = 0;
        for (uint64_t seed = 0; seed < 200; ++seed) {
            const int heads = 1 + static_cast<int>(seed % 3);
            Manifest m = testing::toy_manifest(1, 6 * heads, heads);
            m.activation = seed % 2 ? Activation::gelu_exact : Activation::quick_gelu;
            const ModelBundle b = testing::random_bundle(m, 1000 + seed, 0.5f);
            std::mt19937_64 rng(seed);
            const Tensor x = testing::random_tensor({1, m.hidden_dim}, rng, 2.0f);
            worst = std::max(worst, testing::max_abs_diff(block_ablated(x.data(), 1, b).data(), block_full(x, 1, b).hidden.data()));
        }
        CHECK(worst < 1e-5);
    }
    SUBCASE("toy numeric case against the scalar oracle") {
        const Manifest m = testing::toy_manifest(1, 4, 1);
        const ModelBundle b = testing::random_bundle(m, 21);
        const Tensor x({4}, {0.5f, -1.0f, 2.0f, 0.25f});
        const Mat want = ScalarBlock{b.blocks[0], m}.run({{0.5, -1.0, 2.0, 0.25}});
        const Tensor got = block_ablated(x.data(), 1, b);
        for (size_t i = 0; i < 4; ++i) CHECK(got[i] == doctest::Approx(want[0][i]).epsilon(1e-5));
    }
}

TEST_CASE("forward_full and traces") {
    const Manifest m = testing::toy_manifest(3, 8, 2);
    const ModelBundle b = testing::random_bundle(m, 31);
    const Tensor patches = random_patches(m, 32);
    const ActivationTrace trace = forward_full(patches, b);

    REQUIRE(trace.states.size() == 4);
    REQUIRE(trace.attentions.size() == 3);
    CHECK(trace.num_layers() == 3);
    CHECK(trace.seq_len() == m.seq_len());

    SUBCASE("smallest model has two states") {
        const Manifest one = testing::toy_manifest(1, 8, 2);
        CHECK(forward_full(random_patches(one, 1), testing::random_bundle(one, 1)).states.size() == 2);
    }
    SUBCASE("self-consistency") {
        CHECK(trace.states[0] == embed(patches, b));
        for (int k = 1; k <= 3; ++k) {
            const auto out = block_full(trace.states[static_cast<size_t>(k - 1)], k, b);
            CHECK(out.hidden == trace.states[static_cast<size_t>(k)]);
            CHECK(out.attention == trace.attentions[static_cast<size_t>(k - 1)]);
        }
    }
    SUBCASE("attention rows sum to one") {
        double worst = 0;
        for (uint64_t seed = 0; seed < 20; ++seed) {
            const auto t = forward_full(random_patches(m, 100 + seed), testing::random_bundle(m, 200 + seed, 1.5f));
            for (const auto& a : t.attentions) {
                for (int64_t r = 0; r < a.rows(); ++r) {
                    const auto row = a.row(r);
                    worst = std::max(worst, std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0));
                }
            }
        }
        CHECK(worst < 1e-5);
    }
    SUBCASE("determinism") {
        CHECK(forward_full(patches, b) == trace);
    }
    SUBCASE("plan replacement lands on the block input") {
        std::mt19937_64 rng(5);
        const Tensor u = testing::random_tensor({8}, rng);
        InterventionPlan plan;
        plan.set_value({2, 3}, u);
        plan.set_zero({3, 1});
        const auto t = forward_full(patches, b, &plan);
        CHECK(testing::max_abs_diff(t.token({2, 3}), u.data()) == 0.0);
        for (float v : t.token({3, 1})) CHECK(v == 0.0f);
        CHECK(t.states[0] == trace.states[0]);
        for (int j = 0; j < m.seq_len(); ++j) {
            if (j != 3) CHECK(testing::max_abs_diff(t.states[1].row(j), trace.states[1].row(j)) == 0.0);
        }
    }
    SUBCASE("layer L+1 replacement edits only the final state") {
        InterventionPlan plan;
        plan.set_zero({4, 0});
        const auto t = forward_full(patches, b, &plan);
        for (int k = 0; k < 3; ++k) CHECK(t.states[static_cast<size_t>(k)] == trace.states[static_cast<size_t>(k)]);
        for (float v : t.token({4, 0})) CHECK(v == 0.0f);
    }
    SUBCASE("plan with wrong width is rejected") {
        InterventionPlan plan;
        plan.set_value({1, 0}, Tensor::zeros({5}));
        CHECK_THROWS_AS(forward_full(patches, b, &plan), Error);
    }
}

TEST_CASE("forward_ablated_from") {
    const Manifest m = testing::toy_manifest(3, 8, 2);
    const ModelBundle b = testing::random_bundle(m, 41);
    const Tensor patches = random_patches(m, 42);
    const ActivationTrace trace = forward_full(patches, b);

    SUBCASE("final layer is the identity") {
        for (int j = 0; j < m.seq_len(); ++j) CHECK(testing::max_abs_diff(forward_ablated_from({4, j}, trace, b).data(), trace.states[3].row(j)) == 0.0);
    }
    SUBCASE("manual chain of ablated blocks") {
        Tensor x = Tensor::from_span({8}, trace.token({2, 3}));
        x = block_ablated(x.data(), 2, b);
        x = block_ablated(x.data(), 3, b);
        CHECK(forward_ablated_from({2, 3}, trace, b) == x);
    }
    SUBCASE("matches the full forward on a one-token model") {
        ActivationTrace one;
        std::mt19937_64 rng(9);
        Tensor h0 = testing::random_tensor({1, 8}, rng);
        one.states.push_back(h0);
        for (int k = 1; k <= 3; ++k) {
            auto out = block_full(one.states.back(), k, b);
            one.states.push_back(out.hidden);
            one.attentions.push_back(out.attention);
        }
        CHECK(testing::max_abs_diff(forward_ablated_from({1, 0}, one, b).data(), one.states[3].row(0)) < 1e-5);
    }
    SUBCASE("identity model returns the addressed token") {
        ModelBundle id = ModelBundle::zeros(m);
        id.patch_embed = b.patch_embed;
        id.pos_embedding = b.pos_embedding;
        const auto t = forward_full(patches, id);
        for (int i = 1; i <= 4; ++i)
            for (int j = 0; j < m.seq_len(); ++j) CHECK(testing::max_abs_diff(forward_ablated_from({i, j}, t, id).data(), t.token({i, j})) == 0.0);
    }
    SUBCASE("locality: other rows do not matter") {
        ActivationTrace perturbed = trace;
        std::mt19937_64 rng(10);
        for (auto& s : perturbed.states) {
            for (int j = 0; j < m.seq_len(); ++j) {
                if (j == 2) continue;
                for (auto& v : s.row(j)) v += static_cast<float>(std::normal_distribution<double>(0, 5)(rng));
            }
        }
        for (int i = 1; i <= 4; ++i) CHECK(forward_ablated_from({i, 2}, perturbed, b) == forward_ablated_from({i, 2}, trace, b));
    }
    SUBCASE("out of range token") {
        CHECK_THROWS_AS(forward_ablated_from({5, 0}, trace, b), Error);
        CHECK_THROWS_AS(forward_ablated_from({0, 0}, trace, b), Error);
        CHECK_THROWS_AS(forward_ablated_from({1, m.seq_len()}, trace, b), Error);
    }
}

TEST_CASE("project_to_joint") {
    const Manifest m = testing::toy_manifest(1, 6, 2);
    ModelBundle b = ModelBundle::zeros(m);
    for (int i = 0; i < 6; ++i) b.visual_projection.at(i, i) = 1.0f;
    SUBCASE("identity head normalizes a zero-mean vector") {
        // ln_post with unit gamma maps a zero-mean vector to a positive multiple of itself.
        const Tensor v({6}, {1, -2, 3, -4, 0.5f, 1.5f});
        const Tensor j = project_to_joint(v.data(), b);
        const double n = l2_norm(v.data());
        for (size_t i = 0; i < 6; ++i) CHECK(j[i] == doctest::Approx(v[i] / n).epsilon(1e-6));
    }
    SUBCASE("unit norm for random heads") {
        for (uint64_t s = 0; s < 50; ++s) {
            const Manifest mj = testing::toy_manifest(1, 8, 2, 2, 2, 5);
            const ModelBundle rb = testing::random_bundle(mj, s);
            std::mt19937_64 rng(s);
            const Tensor v = testing::random_tensor({8}, rng);
            CHECK(std::abs(l2_norm(project_to_joint(v.data(), rb).data()) - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("classify and ranking") {
    const Manifest m = testing::toy_manifest(2, 8, 2, 2, 2, 5);
    const ModelBundle b = testing::random_bundle(m, 51);
    const Tensor patches = random_patches(m, 52);
    const ActivationTrace trace = forward_full(patches, b);
    const Tensor cls = project_to_joint(trace.states.back().row(0), b);

    SUBCASE("own embedding ranks first") {
        std::mt19937_64 rng(1);
        Tensor emb = testing::random_tensor({4, 5}, rng);
        for (int c = 0; c < 5; ++c) emb.at(2, c) = cls[static_cast<size_t>(c)];
        const Vocabulary v("v", testing::numbered_words(4), emb);
        const Ranking r = classify(patches, b, v);
        CHECK(r[0].index == 2);
        CHECK(r[0].cosine == doctest::Approx(1.0).epsilon(1e-6));
    }
    SUBCASE("opposite pair gives complementary ranks") {
        Tensor emb({2, 5});
        for (int c = 0; c < 5; ++c) {
            emb.at(0, c) = c == 0 ? 1.0f : 0.0f;
            emb.at(1, c) = c == 0 ? -1.0f : 0.0f;
        }
        const Vocabulary v("pair", {"up", "down"}, emb);
        const Ranking r = classify(patches, b, v);
        REQUIRE(r.size() == 2);
        CHECK(r[0].index != r[1].index);
        CHECK(r[0].cosine == doctest::Approx(-r[1].cosine));
        CHECK(r[0].index == (cls[0] >= 0 ? 0u : 1u));
    }
    SUBCASE("brute-force oracle with ties") {
        std::mt19937_64 rng(3);
        Tensor emb = testing::random_tensor({9, 5}, rng);
        for (int c = 0; c < 5; ++c) emb.at(7, c) = emb.at(1, c); // tie: index 1 must come first
        const Vocabulary v("five", testing::numbered_words(9), emb);
        std::vector<std::pair<double, size_t>> oracle;
        for (size_t i = 0; i < 9; ++i) {
            long double d = 0, na = 0, nb = 0;
            for (size_t c = 0; c < 5; ++c) {
                d += static_cast<long double>(cls[c]) * v.embedding(i)[c];
                na += static_cast<long double>(cls[c]) * cls[c];
                nb += static_cast<long double>(v.embedding(i)[c]) * v.embedding(i)[c];
            }
            oracle.emplace_back(static_cast<double>(d / std::sqrt(na * nb)), i);
        }
        std::stable_sort(oracle.begin(), oracle.end(), [](auto& x, auto& y) { return x.first > y.first; });
        const Ranking r = classify(patches, b, v);
        REQUIRE(r.size() == 9);
        for (size_t k = 0; k < 9; ++k) {
            CHECK(r[k].index == oracle[k].second);
            CHECK(r[k].cosine == doctest::Approx(oracle[k].first).epsilon(1e-9));
        }
        CHECK(rank_of(r, oracle[3].second) == 4);
        CHECK(rank_vocabulary(cls.data(), v, 3).size() == 3);
        CHECK(classify_trace(trace, b, v) == r);
    }
    SUBCASE("errors") {
        const Vocabulary wrong = testing::random_vocab(3, 7, 1);
        CHECK_THROWS_AS(classify(patches, b, wrong), Error);
    }
}

TEST_CASE("concurrent forwards agree") {
    const Manifest m = testing::toy_manifest(2, 8, 2);
    const ModelBundle b = testing::random_bundle(m, 61);
    const Tensor patches = random_patches(m, 62);
    const ActivationTrace ref = forward_full(patches, b);
    std::vector<ActivationTrace> out(4);
    std::vector<std::thread> threads;
    for (size_t i = 0; i < 4; ++i) threads.emplace_back([&, i] { out[i] = forward_full(patches, b); });
    for (auto& t : threads) t.join();
    for (const auto& t : out) CHECK(t == ref);
}
