#include "cascade/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

namespace cascade {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {

void check_extents(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (auto e : shape)
        if (e == 0) throw ShapeError("tensor extent must be >= 1, got " + shape_str(shape));
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
    check_extents(shape_);
    values_.assign(shape_numel(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    check_extents(shape_);
    if (shape_numel(shape_) != values_.size())
        throw ShapeError("value count " + std::to_string(values_.size()) + " does not match shape " +
                         shape_str(shape_));
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
    return Tensor(std::move(shape), values_);
}

template <typename T>
void Tensor<T>::fill(T v) {
    std::fill(values_.begin(), values_.end(), v);
}

template <typename T>
Tensor<T>& Tensor<T>::operator+=(const Tensor& other) {
    if (shape_ != other.shape_)
        throw ShapeError("cannot add " + shape_str(other.shape_) + " into " + shape_str(shape_));
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
    return *this;
}

template <typename T>
bool Tensor<T>::identical(const Tensor& other) const noexcept {
    return shape_ == other.shape_ &&
           (values_.empty() ||
            std::memcmp(values_.data(), other.values_.data(), values_.size() * sizeof(T)) == 0);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace cascade
