#include "cascade/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <string>
#include <vector>

namespace cascade {

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding) {
    if (stride < 1) throw ShapeError("stride must be >= 1");
    if (padding == Padding::same) return (in + stride - 1) / stride;
    if (kernel > in)
        throw ShapeError("window " + std::to_string(kernel) + " larger than input extent " +
                         std::to_string(in) + " in valid mode");
    return (in - kernel) / stride + 1;
}

ConvGeometry conv_geometry(const Shape& x, const Shape& w, long stride, Padding padding) {
    if (stride < 1) throw ShapeError("invalid stride " + std::to_string(stride) + ", must be >= 1");
    if (x.size() != 4) throw ShapeError("conv2d input must be N,C,H,W, got " + shape_str(x));
    if (w.size() != 4 || w[0] != w[1])
        throw ShapeError("conv2d weight must be K,K,C_in,C_out, got " + shape_str(w));
    if (x[1] != w[2])
        throw ShapeError("conv2d channel mismatch: input " + shape_str(x) + " vs weight " + shape_str(w));
    ConvGeometry g;
    g.batch = x[0];
    g.in_c = x[1];
    g.in_h = x[2];
    g.in_w = x[3];
    g.kernel = w[0];
    g.out_c = w[3];
    g.stride = static_cast<std::size_t>(stride);
    g.out_h = conv_out_extent(g.in_h, g.kernel, g.stride, padding);
    g.out_w = conv_out_extent(g.in_w, g.kernel, g.stride, padding);
    if (padding == Padding::same) {
        auto total = [&](std::size_t in, std::size_t out) {
            const std::size_t need = (out - 1) * g.stride + g.kernel;
            return need > in ? need - in : 0;
        };
        g.pad_top = total(g.in_h, g.out_h) / 2;
        g.pad_left = total(g.in_w, g.out_w) / 2;
    }
    return g;
}


namespace {

// The vector helpers never cross a non-inlined call boundary.
#pragma GCC diagnostic ignored "-Wpsabi"

// C[M][N] += A[M][K] * B[K][N]. Each C entry receives one sum over k in
// ascending order, whichever block shape computes it, so results do not
// depend on the tiling. Sums stay in vector registers; the last N % L
// columns go through a zero-padded copy of B. fp contraction is off, so
// every target clone produces identical bits.
template <typename V, typename T>
[[gnu::always_inline]] inline V load(const T* p) {
    V v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

template <typename V, std::size_t R, std::size_t NV, typename T>
[[gnu::always_inline]] inline void gemm_block(const T* A, const T* B, std::size_t ldb, T* C, std::size_t ldc,
                                              std::size_t K, std::size_t i0, std::size_t j0) {
    constexpr std::size_t L = sizeof(V) / sizeof(T);
    V acc[R][NV] = {};
    const T* a0 = A + i0 * K;
    for (std::size_t k = 0; k < K; ++k) {
        V b[NV];
        for (std::size_t v = 0; v < NV; ++v) b[v] = load<V>(B + k * ldb + j0 + v * L);
        for (std::size_t r = 0; r < R; ++r) {
            const T a = a0[r * K + k];
            for (std::size_t v = 0; v < NV; ++v) acc[r][v] += a * b[v];
        }
    }
    for (std::size_t r = 0; r < R; ++r) {
        T* c = C + (i0 + r) * ldc + j0;
        for (std::size_t v = 0; v < NV; ++v)
            for (std::size_t l = 0; l < L; ++l) c[v * L + l] += acc[r][v][l];
    }
}

// Rows [0, M) against columns [j0, j1) of B, where j1 - j0 is a multiple of L.
template <typename V, typename T>
[[gnu::always_inline]] inline void gemm_cols(const T* A, const T* B, std::size_t ldb, T* C, std::size_t ldc,
                                             std::size_t M, std::size_t K, std::size_t j0, std::size_t j1) {
    constexpr std::size_t L = sizeof(V) / sizeof(T);
    const std::size_t m4 = M / 4 * 4;
    std::size_t j = j0;
    for (; j + 2 * L <= j1; j += 2 * L) {
        for (std::size_t i = 0; i < m4; i += 4) gemm_block<V, 4, 2>(A, B, ldb, C, ldc, K, i, j);
        for (std::size_t i = m4; i < M; ++i) gemm_block<V, 1, 2>(A, B, ldb, C, ldc, K, i, j);
    }
    if (j < j1) {
        for (std::size_t i = 0; i < m4; i += 4) gemm_block<V, 4, 1>(A, B, ldb, C, ldc, K, i, j);
        for (std::size_t i = m4; i < M; ++i) gemm_block<V, 1, 1>(A, B, ldb, C, ldc, K, i, j);
    }
}

template <typename V, typename T>
[[gnu::always_inline]] inline void gemm_impl(const T* A, const T* B, T* C, std::size_t M, std::size_t K,
                                             std::size_t N) {
    constexpr std::size_t L = sizeof(V) / sizeof(T);
    const std::size_t n_vec = N / L * L;
    gemm_cols<V>(A, B, N, C, N, M, K, 0, n_vec);
    const std::size_t tail = N - n_vec;
    if (tail == 0) return;
    std::vector<T> bp(K * L, T(0)), cp(M * L, T(0));
    for (std::size_t k = 0; k < K; ++k) std::copy_n(B + k * N + n_vec, tail, bp.data() + k * L);
    gemm_cols<V>(A, bp.data(), L, cp.data(), L, M, K, 0, L);
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t l = 0; l < tail; ++l) C[i * N + n_vec + l] += cp[i * L + l];
}

using f32x8 = float __attribute__((vector_size(32)));
using f64x4 = double __attribute__((vector_size(32)));

[[gnu::target_clones("avx2", "default")]] void gemm_acc(const float* A, const float* B, float* C, std::size_t M,
                                                        std::size_t K, std::size_t N) {
    gemm_impl<f32x8>(A, B, C, M, K, N);
}
[[gnu::target_clones("avx2", "default")]] void gemm_acc(const double* A, const double* B, double* C,
                                                        std::size_t M, std::size_t K, std::size_t N) {
    gemm_impl<f64x4>(A, B, C, M, K, N);
}

// Samples per chunk, sized so the column buffer stays cache-resident.
constexpr std::size_t kChunkElements = 1 << 17;

std::size_t chunk_samples(const ConvGeometry& g) {
    return std::max<std::size_t>(1, kChunkElements / (g.patch() * g.out_pixels()));
}

// Output columns [lo, hi) whose input column ow * stride + k - pad lies inside [0, in).
std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t stride, std::size_t k,
                                                std::size_t pad) {
    std::size_t lo = 0;
    if (pad > k) lo = (pad - k + stride - 1) / stride;
    const std::size_t limit = in + pad - k;  // need ow * stride < limit
    std::size_t hi = pad + in > k ? (limit + stride - 1) / stride : 0;
    hi = std::min(hi, out);
    return {std::min(lo, hi), hi};
}

// cols[q][j] for samples [n0, n0 + count): q = (kh * K + kw) * C + c and
// j = (n - n0) * pixels + output pixel; zero where the window hangs over the padding.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, std::size_t n0, std::size_t count, std::vector<T>& cols) {
    const std::size_t pixels = g.out_pixels();
    const std::size_t width = count * pixels;
    const std::size_t plane = g.in_h * g.in_w;
    cols.resize(g.patch() * width);  // every cell is written below
    for (std::size_t kh = 0; kh < g.kernel; ++kh)
        for (std::size_t kw = 0; kw < g.kernel; ++kw) {
            const auto [lo, hi] = valid_range(g.out_w, g.in_w, g.stride, kw, g.pad_left);
            for (std::size_t c = 0; c < g.in_c; ++c) {
                T* dst = cols.data() + ((kh * g.kernel + kw) * g.in_c + c) * width;
                for (std::size_t n = 0; n < count; ++n) {
                    const T* src = x + ((n0 + n) * g.in_c + c) * plane;
                    T* d = dst + n * pixels;
                    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                        T* drow = d + oh * g.out_w;
                        const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad_top);
                        if (ih < 0 || ih >= static_cast<long>(g.in_h)) {
                            std::fill(drow, drow + g.out_w, T(0));
                            continue;
                        }
                        const T* srow = src + static_cast<std::size_t>(ih) * g.in_w + kw - g.pad_left;
                        std::fill(drow, drow + lo, T(0));
                        if (g.stride == 1)
                            std::copy(srow + lo, srow + hi, drow + lo);
                        else
                            for (std::size_t ow = lo; ow < hi; ++ow) drow[ow] = srow[ow * g.stride];
                        std::fill(drow + hi, drow + g.out_w, T(0));
                    }
                }
            }
        }
}

template <typename T>
void col2im_add(const std::vector<T>& cols, const ConvGeometry& g, std::size_t n0, std::size_t count, T* dx) {
    const std::size_t pixels = g.out_pixels();
    const std::size_t width = count * pixels;
    const std::size_t plane = g.in_h * g.in_w;
    for (std::size_t kh = 0; kh < g.kernel; ++kh)
        for (std::size_t kw = 0; kw < g.kernel; ++kw)
            for (std::size_t c = 0; c < g.in_c; ++c) {
                const T* src = cols.data() + ((kh * g.kernel + kw) * g.in_c + c) * width;
                for (std::size_t n = 0; n < count; ++n) {
                    T* dst = dx + ((n0 + n) * g.in_c + c) * plane;
                    const T* s = src + n * pixels;
                    const auto [lo, hi] = valid_range(g.out_w, g.in_w, g.stride, kw, g.pad_left);
                    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                        const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad_top);
                        if (ih < 0 || ih >= static_cast<long>(g.in_h)) continue;
                        T* drow = dst + static_cast<std::size_t>(ih) * g.in_w + kw - g.pad_left;
                        const T* srow = s + oh * g.out_w;
                        for (std::size_t ow = lo; ow < hi; ++ow) drow[ow * g.stride] += srow[ow];
                    }
                }
            }
}

// dy of samples [n0, n0 + count) as dyc[o][j].
template <typename T>
void gather_dy(const T* dy, const ConvGeometry& g, std::size_t n0, std::size_t count, std::vector<T>& dyc) {
    const std::size_t pixels = g.out_pixels();
    const std::size_t width = count * pixels;
    dyc.resize(g.out_c * width);
    for (std::size_t o = 0; o < g.out_c; ++o)
        for (std::size_t n = 0; n < count; ++n)
            std::copy_n(dy + ((n0 + n) * g.out_c + o) * pixels, pixels, dyc.data() + o * width + n * pixels);
}

}  // namespace

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const ConvGeometry& g) {
    Tensor<T> y({g.batch, g.out_c, g.out_h, g.out_w});
    const std::size_t patch = g.patch();
    const std::size_t pixels = g.out_pixels();
    const std::size_t per_chunk = chunk_samples(g);
    // wt[o][q]
    std::vector<T> wt(g.out_c * patch);
    const T* wd = w.data().data();
    for (std::size_t q = 0; q < patch; ++q)
        for (std::size_t o = 0; o < g.out_c; ++o) wt[o * patch + q] = wd[q * g.out_c + o];
    std::vector<T> cols, acc;
    for (std::size_t n0 = 0; n0 < g.batch; n0 += per_chunk) {
        const std::size_t count = std::min(per_chunk, g.batch - n0);
        const std::size_t width = count * pixels;
        im2col(x.data().data(), g, n0, count, cols);
        acc.assign(g.out_c * width, T(0));
        gemm_acc(wt.data(), cols.data(), acc.data(), g.out_c, patch, width);
        for (std::size_t o = 0; o < g.out_c; ++o)
            for (std::size_t n = 0; n < count; ++n)
                std::copy_n(acc.data() + o * width + n * pixels, pixels,
                            y.data().data() + ((n0 + n) * g.out_c + o) * pixels);
    }
    return y;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                     const ConvGeometry& g, Tensor<T>* dx, Tensor<T>* dw) {
    const std::size_t patch = g.patch();
    const std::size_t pixels = g.out_pixels();
    const std::size_t per_chunk = chunk_samples(g);
    if (dx) *dx = Tensor<T>::zeros({g.batch, g.in_c, g.in_h, g.in_w});
    if (dw) *dw = Tensor<T>::zeros(w.shape());
    std::vector<T> cols, dcols, dyc, dyt;
    for (std::size_t n0 = 0; n0 < g.batch; n0 += per_chunk) {
        const std::size_t count = std::min(per_chunk, g.batch - n0);
        const std::size_t width = count * pixels;
        gather_dy(dy.data().data(), g, n0, count, dyc);
        if (dw) {
            im2col(x.data().data(), g, n0, count, cols);
            dyt.resize(width * g.out_c);
            for (std::size_t o = 0; o < g.out_c; ++o)
                for (std::size_t j = 0; j < width; ++j) dyt[j * g.out_c + o] = dyc[o * width + j];
            gemm_acc(cols.data(), dyt.data(), dw->data().data(), patch, width, g.out_c);
        }
        if (dx) {
            dcols.assign(patch * width, T(0));
            gemm_acc(w.data().data(), dyc.data(), dcols.data(), patch, g.out_c, width);
            col2im_add(dcols, g, n0, count, dx->data().data());
        }
    }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t n = a.dim(0), d = a.dim(1), m = b.dim(1);
    Tensor<T> out({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        T* oi = out.data().data() + i * m;
        for (std::size_t k = 0; k < d; ++k) {
            const T aik = a[i * d + k];
            const T* bk = b.data().data() + k * m;
            for (std::size_t j = 0; j < m; ++j) oi[j] += aik * bk[j];
        }
    }
    return out;
}

template Tensor<float> conv2d_forward(const Tensor<float>&, const Tensor<float>&, const ConvGeometry&);
template Tensor<double> conv2d_forward(const Tensor<double>&, const Tensor<double>&, const ConvGeometry&);
template void conv2d_backward(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                              const ConvGeometry&, Tensor<float>*, Tensor<float>*);
template void conv2d_backward(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                              const ConvGeometry&, Tensor<double>*, Tensor<double>*);
template Tensor<float> matmul(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> matmul(const Tensor<double>&, const Tensor<double>&);

}  // namespace cascade
