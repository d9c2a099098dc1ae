#include "vitlens/tensor.hpp"

#include "vitlens/error.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace vitlens {

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

namespace {

void check_shape(const Shape& shape) {
    for (int64_t d : shape) {
        if (d < 0) fail(ErrorCode::dimension, "negative extent in shape " + shape_to_string(shape));
    }
}

} // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0f);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
        fail(ErrorCode::dimension, "tensor shape " + shape_to_string(shape_) + " does not match " +
                                       std::to_string(data_.size()) + " values");
    }
}

Tensor::Tensor(Shape shape, std::initializer_list<float> values)
    : Tensor(std::move(shape), std::vector<float>(values)) {}

Tensor Tensor::filled(Shape shape, float value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

Tensor Tensor::from_span(Shape shape, std::span<const float> values) {
    return Tensor(std::move(shape), std::vector<float>(values.begin(), values.end()));
}

std::span<const float> Tensor::row(int64_t r) const {
    const auto c = static_cast<size_t>(cols());
    return std::span<const float>(data_).subspan(static_cast<size_t>(r) * c, c);
}

std::span<float> Tensor::row(int64_t r) {
    const auto c = static_cast<size_t>(cols());
    return std::span<float>(data_).subspan(static_cast<size_t>(r) * c, c);
}

Tensor Tensor::row_copy(int64_t r) const { return from_span({cols()}, row(r)); }

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != static_cast<int64_t>(data_.size())) {
        fail(ErrorCode::dimension, "cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Activation parse_activation(std::string_view name) {
    if (name == "gelu_exact" || name == "gelu") return Activation::gelu_exact;
    if (name == "quick_gelu") return Activation::quick_gelu;
    fail(ErrorCode::configuration, "unknown activation kind '" + std::string(name) + "'");
}

std::string_view to_string(Activation kind) {
    return kind == Activation::gelu_exact ? "gelu_exact" : "quick_gelu";
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        fail(ErrorCode::dimension,
             "matmul shape mismatch: " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
    }
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    std::vector<double> acc(static_cast<size_t>(n));
    for (int64_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int64_t p = 0; p < k; ++p) {
            const double av = a.at(i, p);
            const auto brow = b.row(p);
            for (int64_t j = 0; j < n; ++j) acc[static_cast<size_t>(j)] += av * brow[static_cast<size_t>(j)];
        }
        auto orow = out.row(i);
        for (int64_t j = 0; j < n; ++j) orow[static_cast<size_t>(j)] = static_cast<float>(acc[static_cast<size_t>(j)]);
    }
    return out;
}

void linear_row(std::span<const float> x, const Tensor& weight, const Tensor& bias, std::span<float> out) {
    const int64_t out_dim = weight.dim(0);
    for (int64_t o = 0; o < out_dim; ++o) {
        double acc = dot(x, weight.row(o));
        if (!bias.empty()) acc += bias[static_cast<size_t>(o)];
        out[static_cast<size_t>(o)] = static_cast<float>(acc);
    }
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2 || x.rank() == 0 || x.cols() != weight.dim(1) ||
        (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != weight.dim(0)))) {
        fail(ErrorCode::dimension, "linear shape mismatch: x " + shape_to_string(x.shape()) + ", W " +
                                       shape_to_string(weight.shape()) + ", b " + shape_to_string(bias.shape()));
    }
    Shape out_shape = x.shape();
    out_shape.back() = weight.dim(0);
    Tensor out(out_shape);
    for (int64_t r = 0; r < x.rows(); ++r) linear_row(x.row(r), weight, bias, out.row(r));
    return out;
}

void layer_norm_row(std::span<const float> x, const Tensor& gamma, const Tensor& beta, float eps,
                    std::span<float> out) {
    const size_t n = x.size();
    double mean = 0.0;
    for (float v : x) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (float v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    for (size_t i = 0; i < n; ++i) {
        out[i] = static_cast<float>((x[i] - mean) * inv * gamma[i] + beta[i]);
    }
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    if (!(eps > 0.0f)) fail(ErrorCode::configuration, "layer_norm eps must be positive");
    const auto d = static_cast<size_t>(x.cols());
    if (gamma.size() != d || beta.size() != d) {
        fail(ErrorCode::dimension, "layer_norm parameter mismatch: x " + shape_to_string(x.shape()) + ", gamma " +
                                       shape_to_string(gamma.shape()) + ", beta " + shape_to_string(beta.shape()));
    }
    Tensor out(x.shape());
    for (int64_t r = 0; r < x.rows(); ++r) layer_norm_row(x.row(r), gamma, beta, eps, out.row(r));
    return out;
}

void softmax_row(std::span<float> row) {
    if (row.empty()) return;
    const float mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    std::vector<double> e(row.size());
    for (size_t i = 0; i < row.size(); ++i) {
        e[i] = std::exp(static_cast<double>(row[i]) - mx);
        total += e[i];
    }
    for (size_t i = 0; i < row.size(); ++i) row[i] = static_cast<float>(e[i] / total);
}

Tensor softmax_lastdim(const Tensor& x) {
    Tensor out = x;
    for (int64_t r = 0; r < out.rows(); ++r) softmax_row(out.row(r));
    return out;
}

float activate(float x, Activation kind) {
    const double v = x;
    switch (kind) {
    case Activation::gelu_exact: return static_cast<float>(0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))));
    case Activation::quick_gelu: return static_cast<float>(v / (1.0 + std::exp(-1.702 * v)));
    }
    return x;
}

Tensor activation(const Tensor& x, Activation kind) {
    Tensor out = x;
    for (auto& v : out.mutable_data()) v = activate(v, kind);
    return out;
}

double dot(std::span<const float> a, std::span<const float> b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

double l2_norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

Tensor l2_normalize(const Tensor& x) {
    Tensor out = x;
    for (int64_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        const double n = l2_norm(row);
        if (!(n > 0.0)) fail(ErrorCode::degenerate_vector, "cannot normalize a zero-norm vector");
        for (auto& v : row) v = static_cast<float>(v / n);
    }
    return out;
}

double cosine(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        fail(ErrorCode::dimension,
             "cosine length mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    }
    const double na = l2_norm(a), nb = l2_norm(b);
    if (!(na > 0.0) || !(nb > 0.0)) fail(ErrorCode::degenerate_vector, "cosine of a zero-norm vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

} // namespace vitlens
