#pragma once

#include <cstddef>

#include "cascade/tensor.hpp"

namespace cascade {

enum class Padding { same, valid };

/// Resolved extents of one conv2d call. "same" pads symmetrically with the
/// odd extra pixel going to the bottom/right edge.
struct ConvGeometry {
    std::size_t batch = 0, in_c = 0, in_h = 0, in_w = 0;
    std::size_t kernel = 0, out_c = 0, stride = 1;
    std::size_t out_h = 0, out_w = 0;
    std::size_t pad_top = 0, pad_left = 0;

    std::size_t patch() const { return kernel * kernel * in_c; }
    std::size_t out_pixels() const { return out_h * out_w; }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, long stride, Padding padding);

/// Output extent along one axis; throws ShapeError when a valid window does not fit.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding);

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const ConvGeometry& g);

/// Either output pointer may be null. Results are written, not accumulated.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                     const ConvGeometry& g, Tensor<T>* dx, Tensor<T>* dw);

/// Plain row-major product of [n, d] by [d, m].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace cascade
