#pragma once

#include <cstddef>
#include <string>

namespace p2p::kernels {

// Numeric inner loops used by the autodiff graph and the optimizer. Every
// entry has a scalar reference implementation and, on x86 hosts with
// AVX2+FMA, a vectorized variant selected once at startup. The two backends
// are equivalence-tested against each other; differences are limited to
// floating-point reassociation and FMA contraction.
template <typename T>
struct Ops {
    // C[m x n] = A[m x k] * B[k x n], row-major. accumulate adds into C.
    void (*gemm)(T* c, const T* a, const T* b, std::size_t m, std::size_t k, std::size_t n,
                 bool accumulate);
    void (*transpose)(T* dst, const T* src, std::size_t rows, std::size_t cols);
    void (*add)(T* c, const T* a, const T* b, std::size_t len);  // c = a + b
    void (*axpy)(T* y, T alpha, const T* x, std::size_t len);    // y += alpha * x
    void (*scale)(T* x, T alpha, std::size_t len);               // x *= alpha
    void (*leaky_forward)(T* y, const T* x, T slope, std::size_t len);
    // dx += dy * (x > 0 ? 1 : slope)
    void (*leaky_backward)(T* dx, const T* x, const T* dy, T slope, std::size_t len);
    T (*reduce_sum)(const T* x, std::size_t len);
    T (*dot)(const T* a, const T* b, std::size_t len);
    // Index of the row maximum, first occurrence on ties. len >= 1.
    std::size_t (*argmax)(const T* x, std::size_t len);
    // In-place stable softmax over one row; -inf entries map to exactly 0.
    // The caller guarantees at least one finite entry.
    void (*softmax_row)(T* x, std::size_t len);
    void (*mean_var)(const T* x, std::size_t len, T* mean, T* var);
    // Adam step with bias corrections bc1 = 1-beta1^t, bc2 = 1-beta2^t.
    void (*adam_update)(T* p, const T* g, T* m, T* v, std::size_t len, T lr, T beta1, T beta2,
                        T eps, T bc1, T bc2);
};

enum class Backend { scalar, avx2 };

const Ops<float>& scalar_ops_f32();
const Ops<double>& scalar_ops_f64();
const Ops<float>& avx2_ops_f32();
const Ops<double>& avx2_ops_f64();

bool avx2_supported();

// Active backend: AVX2 when the CPU supports it, overridable with the
// P2P_KERNELS environment variable ("scalar" or "avx2").
Backend active_backend();
void force_backend(Backend b);  // test hook; throws NumericError if unsupported

template <typename T>
const Ops<T>& ops();

template <>
const Ops<float>& ops<float>();
template <>
const Ops<double>& ops<double>();

std::string backend_name(Backend b);

}  // namespace p2p::kernels
