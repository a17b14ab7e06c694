#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>

#include "p2p/kernels/kernels.hpp"

namespace p2p::kernels {
namespace {

template <typename T>
void gemm(T* c, const T* a, const T* b, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        if (!accumulate)
            for (std::size_t j = 0; j < n; ++j) crow[j] = T(0);
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a[i * k + p];
            if (aip == T(0)) continue;
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

template <typename T>
void transpose(T* dst, const T* src, std::size_t rows, std::size_t cols) {
    constexpr std::size_t kBlock = 16;
    for (std::size_t i0 = 0; i0 < rows; i0 += kBlock)
        for (std::size_t j0 = 0; j0 < cols; j0 += kBlock) {
            const std::size_t i1 = std::min(rows, i0 + kBlock);
            const std::size_t j1 = std::min(cols, j0 + kBlock);
            for (std::size_t i = i0; i < i1; ++i)
                for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
        }
}

template <typename T>
void add(T* c, const T* a, const T* b, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) c[i] = a[i] + b[i];
}

template <typename T>
void axpy(T* y, T alpha, const T* x, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) y[i] += alpha * x[i];
}

template <typename T>
void scale(T* x, T alpha, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) x[i] *= alpha;
}

template <typename T>
void leaky_forward(T* y, const T* x, T slope, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) y[i] = x[i] > T(0) ? x[i] : slope * x[i];
}

template <typename T>
void leaky_backward(T* dx, const T* x, const T* dy, T slope, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) dx[i] += dy[i] * (x[i] > T(0) ? T(1) : slope);
}

template <typename T>
T reduce_sum(const T* x, std::size_t len) {
    T s = T(0);
    for (std::size_t i = 0; i < len; ++i) s += x[i];
    return s;
}

template <typename T>
T dot(const T* a, const T* b, std::size_t len) {
    T s = T(0);
    for (std::size_t i = 0; i < len; ++i) s += a[i] * b[i];
    return s;
}

template <typename T>
std::size_t argmax(const T* x, std::size_t len) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < len; ++i)
        if (x[i] > x[best]) best = i;
    return best;
}

template <typename T>
void softmax_row(T* x, std::size_t len) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = x[i] > mx ? x[i] : mx;
    T sum = T(0);
    for (std::size_t i = 0; i < len; ++i) {
        // exp(-inf - mx) == 0, so masked entries drop out exactly.
        x[i] = std::exp(x[i] - mx);
        sum += x[i];
    }
    const T inv = T(1) / sum;
    for (std::size_t i = 0; i < len; ++i) x[i] *= inv;
}

template <typename T>
void mean_var(const T* x, std::size_t len, T* mean, T* var) {
    T s = T(0);
    for (std::size_t i = 0; i < len; ++i) s += x[i];
    const T mu = s / T(len);
    T v = T(0);
    for (std::size_t i = 0; i < len; ++i) {
        const T d = x[i] - mu;
        v += d * d;
    }
    *mean = mu;
    *var = v / T(len);
}

template <typename T>
void adam_update(T* p, const T* g, T* m, T* v, std::size_t len, T lr, T beta1, T beta2, T eps,
                 T bc1, T bc2) {
    for (std::size_t i = 0; i < len; ++i) {
        m[i] = beta1 * m[i] + (T(1) - beta1) * g[i];
        v[i] = beta2 * v[i] + (T(1) - beta2) * g[i] * g[i];
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

template <typename T>
Ops<T> make_ops() {
    Ops<T> o;
    o.gemm = &gemm<T>;
    o.transpose = &transpose<T>;
    o.add = &add<T>;
    o.axpy = &axpy<T>;
    o.scale = &scale<T>;
    o.leaky_forward = &leaky_forward<T>;
    o.leaky_backward = &leaky_backward<T>;
    o.reduce_sum = &reduce_sum<T>;
    o.dot = &dot<T>;
    o.argmax = &argmax<T>;
    o.softmax_row = &softmax_row<T>;
    o.mean_var = &mean_var<T>;
    o.adam_update = &adam_update<T>;
    return o;
}

}  // namespace

const Ops<float>& scalar_ops_f32() {
    static const Ops<float> o = make_ops<float>();
    return o;
}

const Ops<double>& scalar_ops_f64() {
    static const Ops<double> o = make_ops<double>();
    return o;
}

}  // namespace p2p::kernels
