#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "cascade/error.hpp"

namespace cascade {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array. Activations use N,C,H,W order; conv weights use
/// K_h,K_w,C_in,C_out so that a weight is directly a [K*K*C_in, C_out] matrix.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0));
    Tensor(Shape shape, std::vector<T> values);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }
    static constexpr DType dtype() { return dtype_of<T>(); }

    std::span<T> data() noexcept { return values_; }
    std::span<const T> data() const noexcept { return values_; }
    const std::vector<T>& values() const noexcept { return values_; }

    T& operator[](std::size_t i) { return values_[i]; }
    const T& operator[](std::size_t i) const { return values_[i]; }

    T& at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        return values_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }
    const T& at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        return values_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }
    T& at2(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
    const T& at2(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }

    /// Same buffer, new extents; numel must agree.
    Tensor reshaped(Shape shape) const;

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < values_.size(); ++i) out[i] = static_cast<U>(values_[i]);
        return out;
    }

    void fill(T v);
    Tensor& operator+=(const Tensor& other);

    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
    /// Bitwise comparison of shape and payload.
    bool identical(const Tensor& other) const noexcept;

private:
    Shape shape_;
    std::vector<T> values_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace cascade
