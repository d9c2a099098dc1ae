#include "vitlens/diag.hpp"
#include "vitlens/error.hpp"
#include "vitlens/evaluator.hpp"
#include "vitlens/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace vitlens {

namespace {

void check_data(const ProbeModel& probe, const Tensor& x, std::span<const int> labels) {
    if (x.rank() != 2 || x.dim(0) != static_cast<int64_t>(labels.size())) {
        fail(ErrorCode::dimension, "probe data: " + std::to_string(labels.size()) + " labels for features " +
                                       shape_to_string(x.shape()));
    }
    if (x.dim(1) != probe.weight.dim(1)) {
        fail(ErrorCode::dimension, "probe expects width " + std::to_string(probe.weight.dim(1)) + ", got " +
                                       std::to_string(x.dim(1)));
    }
    for (int y : labels) {
        if (y < 0 || y >= probe.num_classes()) fail(ErrorCode::input, "probe label out of range: " + std::to_string(y));
    }
}

// Class probabilities for one row, in double.
std::vector<double> softmax_probs(const ProbeModel& probe, std::span<const float> row) {
    const int c = probe.num_classes();
    std::vector<double> z(static_cast<size_t>(c));
    for (int k = 0; k < c; ++k) {
        double s = probe.bias[static_cast<size_t>(k)];
        const auto w = probe.weight.row(k);
        for (size_t i = 0; i < row.size(); ++i) s += static_cast<double>(w[i]) * row[i];
        z[static_cast<size_t>(k)] = s;
    }
    const double mx = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (auto& v : z) total += (v = std::exp(v - mx));
    for (auto& v : z) v /= total;
    return z;
}

ProbeGradient gradient_over(const ProbeModel& probe, const Tensor& x, std::span<const int> labels,
                            std::span<const size_t> rows) {
    const int c = probe.num_classes();
    const auto d = static_cast<size_t>(probe.weight.dim(1));
    ProbeGradient g{std::vector<double>(static_cast<size_t>(c) * d, 0.0), std::vector<double>(static_cast<size_t>(c), 0.0)};
    for (size_t r : rows) {
        const auto row = x.row(static_cast<int64_t>(r));
        const auto p = softmax_probs(probe, row);
        for (int k = 0; k < c; ++k) {
            const double delta = p[static_cast<size_t>(k)] - (labels[r] == k ? 1.0 : 0.0);
            g.bias[static_cast<size_t>(k)] += delta;
            for (size_t i = 0; i < d; ++i) g.weight[static_cast<size_t>(k) * d + i] += delta * row[i];
        }
    }
    const double n = static_cast<double>(rows.size());
    for (auto& v : g.weight) v /= n;
    for (auto& v : g.bias) v /= n;
    return g;
}

} // namespace

ProbeModel make_probe(int num_classes, int64_t dim) {
    if (num_classes < 2) fail(ErrorCode::input, "a probe needs at least 2 classes");
    if (dim < 1) fail(ErrorCode::input, "a probe needs a positive feature width");
    ProbeModel p;
    p.weight = Tensor::zeros({num_classes, dim});
    p.bias = Tensor::zeros({num_classes});
    p.m_weight.assign(p.weight.size(), 0.0);
    p.v_weight.assign(p.weight.size(), 0.0);
    p.m_bias.assign(p.bias.size(), 0.0);
    p.v_bias.assign(p.bias.size(), 0.0);
    return p;
}

double probe_loss(const ProbeModel& probe, const Tensor& x, std::span<const int> labels) {
    check_data(probe, x, labels);
    if (labels.empty()) return 0.0;
    double total = 0.0;
    for (size_t r = 0; r < labels.size(); ++r) {
        const auto p = softmax_probs(probe, x.row(static_cast<int64_t>(r)));
        total -= std::log(std::max(p[static_cast<size_t>(labels[r])], 1e-300));
    }
    return total / static_cast<double>(labels.size());
}

ProbeGradient probe_gradient(const ProbeModel& probe, const Tensor& x, std::span<const int> labels) {
    check_data(probe, x, labels);
    std::vector<size_t> rows(labels.size());
    std::iota(rows.begin(), rows.end(), size_t{0});
    return gradient_over(probe, x, labels, rows);
}

std::vector<int> probe_predict(const ProbeModel& probe, const Tensor& x) {
    std::vector<int> out(static_cast<size_t>(x.rows()));
    for (int64_t r = 0; r < x.rows(); ++r) {
        const auto p = softmax_probs(probe, x.row(r));
        out[static_cast<size_t>(r)] = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
    }
    return out;
}

ProbeModel train_probe(const Tensor& x, std::span<const int> labels, int num_classes, const ProbeOptions& options,
                       std::vector<double>* loss_trace) {
    ProbeModel probe = make_probe(num_classes, x.rank() == 2 ? x.dim(1) : 0);
    check_data(probe, x, labels);
    if (labels.empty()) fail(ErrorCode::input, "cannot train a probe on an empty set");
    if (options.batch_size < 1 || options.epochs < 0) fail(ErrorCode::input, "probe needs batch_size >= 1 and epochs >= 0");
    if (std::set<int>(labels.begin(), labels.end()).size() < 2) {
        warn("probe training data has a single class; training anyway");
    }
    if (loss_trace) loss_trace->push_back(probe_loss(probe, x, labels));

    std::vector<size_t> order(labels.size());
    std::iota(order.begin(), order.end(), size_t{0});
    SeededStream rng(options.seed);
    auto adam = [&](std::vector<double>& m, std::vector<double>& v, std::span<float> param, const std::vector<double>& g) {
        const double c1 = 1.0 - std::pow(options.beta1, static_cast<double>(probe.step));
        const double c2 = 1.0 - std::pow(options.beta2, static_cast<double>(probe.step));
        for (size_t i = 0; i < g.size(); ++i) {
            m[i] = options.beta1 * m[i] + (1.0 - options.beta1) * g[i];
            v[i] = options.beta2 * v[i] + (1.0 - options.beta2) * g[i] * g[i];
            const double update = options.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + options.eps);
            param[i] = static_cast<float>(param[i] - update);
        }
    };
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        rng.shuffle(std::span<size_t>(order));
        for (size_t start = 0; start < order.size(); start += options.batch_size) {
            const size_t end = std::min(order.size(), start + options.batch_size);
            const auto g = gradient_over(probe, x, labels, std::span<const size_t>(order).subspan(start, end - start));
            ++probe.step;
            adam(probe.m_weight, probe.v_weight, probe.weight.mutable_data(), g.weight);
            adam(probe.m_bias, probe.v_bias, probe.bias.mutable_data(), g.bias);
            if (loss_trace) loss_trace->push_back(probe_loss(probe, x, labels));
        }
    }
    return probe;
}

} // namespace vitlens
