#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vitlens {

using Shape = std::vector<int64_t>;

std::string shape_to_string(const Shape& shape);
int64_t shape_numel(const Shape& shape);

// Dense row-major float32 array; the last index varies fastest.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<float> data);
    Tensor(Shape shape, std::initializer_list<float> values);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor filled(Shape shape, float value);
    static Tensor from_span(Shape shape, std::span<const float> values);

    const Shape& shape() const noexcept { return shape_; }
    size_t rank() const noexcept { return shape_.size(); }
    int64_t dim(size_t axis) const { return shape_.at(axis); }
    size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<const float> data() const noexcept { return data_; }
    std::span<float> mutable_data() noexcept { return data_; }
    const std::vector<float>& values() const noexcept { return data_; }

    float operator[](size_t i) const { return data_[i]; }
    float& operator[](size_t i) { return data_[i]; }

    // 2-D element access.
    float at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_.back() + c)]; }
    float& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_.back() + c)]; }

    // View the tensor as [rows x cols] with cols = last extent.
    int64_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
    int64_t rows() const { return cols() == 0 ? 0 : static_cast<int64_t>(data_.size()) / cols(); }
    std::span<const float> row(int64_t r) const;
    std::span<float> row(int64_t r);

    Tensor row_copy(int64_t r) const;
    Tensor reshaped(Shape shape) const;
    bool all_finite() const;

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<float> data_;
};

enum class Activation { gelu_exact, quick_gelu };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation kind);

// All kernels below are pure. Dot products accumulate in double, left to
// right over the reduction index, so results are reproducible bit for bit.

Tensor matmul(const Tensor& a, const Tensor& b);

// y = x W^T + b over the last axis; W is [out x in], b is [out] (may be empty).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
void linear_row(std::span<const float> x, const Tensor& weight, const Tensor& bias, std::span<float> out);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
void layer_norm_row(std::span<const float> x, const Tensor& gamma, const Tensor& beta, float eps,
                    std::span<float> out);

Tensor softmax_lastdim(const Tensor& x);
void softmax_row(std::span<float> row);

float activate(float x, Activation kind);
Tensor activation(const Tensor& x, Activation kind);

Tensor l2_normalize(const Tensor& x);
double cosine(std::span<const float> a, std::span<const float> b);
double dot(std::span<const float> a, std::span<const float> b);
double l2_norm(std::span<const float> a);

} // namespace vitlens
