#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>

#include "p2p/kernels/kernels.hpp"

// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.

namespace p2p::kernels {
namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    const __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    const __m128d swap = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, swap));
}

inline float hsum(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    const __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_hadd_ps(lo, lo);
    lo = _mm_hadd_ps(lo, lo);
    return _mm_cvtss_f32(lo);
}

inline double hmax(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    const __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_max_pd(lo, hi);
    const __m128d swap = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_max_sd(lo, swap));
}

inline float hmax(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    const __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_max_ps(lo, hi);
    lo = _mm_max_ps(lo, _mm_movehl_ps(lo, lo));
    lo = _mm_max_ss(lo, _mm_shuffle_ps(lo, lo, 1));
    return _mm_cvtss_f32(lo);
}

// ---------------------------------------------------------------- double gemm

// 4 rows x 8 columns register tile; the workhorse for FFN-sized matmuls.
inline void dkern_4x8(double* c, const double* a, const double* b, std::size_t k, std::size_t n,
                      std::size_t i0, std::size_t j0, bool accumulate) {
    const double* a0 = a + (i0 + 0) * k;
    const double* a1 = a + (i0 + 1) * k;
    const double* a2 = a + (i0 + 2) * k;
    const double* a3 = a + (i0 + 3) * k;
    double* c0 = c + (i0 + 0) * n + j0;
    double* c1 = c + (i0 + 1) * n + j0;
    double* c2 = c + (i0 + 2) * n + j0;
    double* c3 = c + (i0 + 3) * n + j0;
    __m256d s00, s01, s10, s11, s20, s21, s30, s31;
    if (accumulate) {
        s00 = _mm256_loadu_pd(c0), s01 = _mm256_loadu_pd(c0 + 4);
        s10 = _mm256_loadu_pd(c1), s11 = _mm256_loadu_pd(c1 + 4);
        s20 = _mm256_loadu_pd(c2), s21 = _mm256_loadu_pd(c2 + 4);
        s30 = _mm256_loadu_pd(c3), s31 = _mm256_loadu_pd(c3 + 4);
    } else {
        s00 = s01 = s10 = s11 = s20 = s21 = s30 = s31 = _mm256_setzero_pd();
    }
    const double* bp = b + j0;
    for (std::size_t p = 0; p < k; ++p, bp += n) {
        const __m256d b0 = _mm256_loadu_pd(bp);
        const __m256d b1 = _mm256_loadu_pd(bp + 4);
        __m256d av = _mm256_set1_pd(a0[p]);
        s00 = _mm256_fmadd_pd(av, b0, s00), s01 = _mm256_fmadd_pd(av, b1, s01);
        av = _mm256_set1_pd(a1[p]);
        s10 = _mm256_fmadd_pd(av, b0, s10), s11 = _mm256_fmadd_pd(av, b1, s11);
        av = _mm256_set1_pd(a2[p]);
        s20 = _mm256_fmadd_pd(av, b0, s20), s21 = _mm256_fmadd_pd(av, b1, s21);
        av = _mm256_set1_pd(a3[p]);
        s30 = _mm256_fmadd_pd(av, b0, s30), s31 = _mm256_fmadd_pd(av, b1, s31);
    }
    _mm256_storeu_pd(c0, s00), _mm256_storeu_pd(c0 + 4, s01);
    _mm256_storeu_pd(c1, s10), _mm256_storeu_pd(c1 + 4, s11);
    _mm256_storeu_pd(c2, s20), _mm256_storeu_pd(c2 + 4, s21);
    _mm256_storeu_pd(c3, s30), _mm256_storeu_pd(c3 + 4, s31);
}

inline void dkern_4x4(double* c, const double* a, const double* b, std::size_t k, std::size_t n,
                      std::size_t i0, std::size_t j0, bool accumulate) {
    const double* a0 = a + (i0 + 0) * k;
    const double* a1 = a + (i0 + 1) * k;
    const double* a2 = a + (i0 + 2) * k;
    const double* a3 = a + (i0 + 3) * k;
    double* c0 = c + (i0 + 0) * n + j0;
    double* c1 = c + (i0 + 1) * n + j0;
    double* c2 = c + (i0 + 2) * n + j0;
    double* c3 = c + (i0 + 3) * n + j0;
    __m256d s0, s1, s2, s3;
    if (accumulate) {
        s0 = _mm256_loadu_pd(c0), s1 = _mm256_loadu_pd(c1);
        s2 = _mm256_loadu_pd(c2), s3 = _mm256_loadu_pd(c3);
    } else {
        s0 = s1 = s2 = s3 = _mm256_setzero_pd();
    }
    const double* bp = b + j0;
    for (std::size_t p = 0; p < k; ++p, bp += n) {
        const __m256d bv = _mm256_loadu_pd(bp);
        s0 = _mm256_fmadd_pd(_mm256_set1_pd(a0[p]), bv, s0);
        s1 = _mm256_fmadd_pd(_mm256_set1_pd(a1[p]), bv, s1);
        s2 = _mm256_fmadd_pd(_mm256_set1_pd(a2[p]), bv, s2);
        s3 = _mm256_fmadd_pd(_mm256_set1_pd(a3[p]), bv, s3);
    }
    _mm256_storeu_pd(c0, s0), _mm256_storeu_pd(c1, s1);
    _mm256_storeu_pd(c2, s2), _mm256_storeu_pd(c3, s3);
}

inline void dkern_1x8(double* c, const double* a, const double* b, std::size_t k, std::size_t n,
                      std::size_t i, std::size_t j0, bool accumulate) {
    const double* arow = a + i * k;
    double* crow = c + i * n + j0;
    __m256d s0, s1;
    if (accumulate) {
        s0 = _mm256_loadu_pd(crow), s1 = _mm256_loadu_pd(crow + 4);
    } else {
        s0 = s1 = _mm256_setzero_pd();
    }
    const double* bp = b + j0;
    for (std::size_t p = 0; p < k; ++p, bp += n) {
        const __m256d av = _mm256_set1_pd(arow[p]);
        s0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp), s0);
        s1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp + 4), s1);
    }
    _mm256_storeu_pd(crow, s0), _mm256_storeu_pd(crow + 4, s1);
}

inline void dedge(double* c, const double* a, const double* b, std::size_t k, std::size_t n,
                  std::size_t i0, std::size_t rows, std::size_t j0, bool accumulate) {
    for (std::size_t i = i0; i < i0 + rows; ++i)
        for (std::size_t j = j0; j < n; ++j) {
            double s = accumulate ? c[i * n + j] : 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            c[i * n + j] = s;
        }
}

double ddot(const double* a, const double* b, std::size_t len) {
    __m256d s0 = _mm256_setzero_pd();
    __m256d s1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= len; i += 8) {
        s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
        s1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), s1);
    }
    for (; i + 4 <= len; i += 4)
        s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
    double s = hsum(_mm256_add_pd(s0, s1));
    for (; i < len; ++i) s += a[i] * b[i];
    return s;
}

void dgemm(double* c, const double* a, const double* b, std::size_t m, std::size_t k,
           std::size_t n, bool accumulate) {
    if (n == 1) {  // matvec: B is a contiguous column
        for (std::size_t i = 0; i < m; ++i) {
            const double s = ddot(a + i * k, b, k);
            c[i] = accumulate ? c[i] + s : s;
        }
        return;
    }
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        std::size_t j = 0;
        for (; j + 8 <= n; j += 8) dkern_4x8(c, a, b, k, n, i, j, accumulate);
        for (; j + 4 <= n; j += 4) dkern_4x4(c, a, b, k, n, i, j, accumulate);
        if (j < n) dedge(c, a, b, k, n, i, 4, j, accumulate);
    }
    for (; i < m; ++i) {
        std::size_t j = 0;
        for (; j + 8 <= n; j += 8) dkern_1x8(c, a, b, k, n, i, j, accumulate);
        if (j < n) dedge(c, a, b, k, n, i, 1, j, accumulate);
    }
}

// ----------------------------------------------------------------- float gemm

inline void fkern_4x16(float* c, const float* a, const float* b, std::size_t k, std::size_t n,
                       std::size_t i0, std::size_t j0, bool accumulate) {
    const float* a0 = a + (i0 + 0) * k;
    const float* a1 = a + (i0 + 1) * k;
    const float* a2 = a + (i0 + 2) * k;
    const float* a3 = a + (i0 + 3) * k;
    float* c0 = c + (i0 + 0) * n + j0;
    float* c1 = c + (i0 + 1) * n + j0;
    float* c2 = c + (i0 + 2) * n + j0;
    float* c3 = c + (i0 + 3) * n + j0;
    __m256 s00, s01, s10, s11, s20, s21, s30, s31;
    if (accumulate) {
        s00 = _mm256_loadu_ps(c0), s01 = _mm256_loadu_ps(c0 + 8);
        s10 = _mm256_loadu_ps(c1), s11 = _mm256_loadu_ps(c1 + 8);
        s20 = _mm256_loadu_ps(c2), s21 = _mm256_loadu_ps(c2 + 8);
        s30 = _mm256_loadu_ps(c3), s31 = _mm256_loadu_ps(c3 + 8);
    } else {
        s00 = s01 = s10 = s11 = s20 = s21 = s30 = s31 = _mm256_setzero_ps();
    }
    const float* bp = b + j0;
    for (std::size_t p = 0; p < k; ++p, bp += n) {
        const __m256 b0 = _mm256_loadu_ps(bp);
        const __m256 b1 = _mm256_loadu_ps(bp + 8);
        __m256 av = _mm256_set1_ps(a0[p]);
        s00 = _mm256_fmadd_ps(av, b0, s00), s01 = _mm256_fmadd_ps(av, b1, s01);
        av = _mm256_set1_ps(a1[p]);
        s10 = _mm256_fmadd_ps(av, b0, s10), s11 = _mm256_fmadd_ps(av, b1, s11);
        av = _mm256_set1_ps(a2[p]);
        s20 = _mm256_fmadd_ps(av, b0, s20), s21 = _mm256_fmadd_ps(av, b1, s21);
        av = _mm256_set1_ps(a3[p]);
        s30 = _mm256_fmadd_ps(av, b0, s30), s31 = _mm256_fmadd_ps(av, b1, s31);
    }
    _mm256_storeu_ps(c0, s00), _mm256_storeu_ps(c0 + 8, s01);
    _mm256_storeu_ps(c1, s10), _mm256_storeu_ps(c1 + 8, s11);
    _mm256_storeu_ps(c2, s20), _mm256_storeu_ps(c2 + 8, s21);
    _mm256_storeu_ps(c3, s30), _mm256_storeu_ps(c3 + 8, s31);
}

inline void fkern_4x8(float* c, const float* a, const float* b, std::size_t k, std::size_t n,
                      std::size_t i0, std::size_t j0, bool accumulate) {
    const float* a0 = a + (i0 + 0) * k;
    const float* a1 = a + (i0 + 1) * k;
    const float* a2 = a + (i0 + 2) * k;
    const float* a3 = a + (i0 + 3) * k;
    float* c0 = c + (i0 + 0) * n + j0;
    float* c1 = c + (i0 + 1) * n + j0;
    float* c2 = c + (i0 + 2) * n + j0;
    float* c3 = c + (i0 + 3) * n + j0;
    __m256 s0, s1, s2, s3;
    if (accumulate) {
        s0 = _mm256_loadu_ps(c0), s1 = _mm256_loadu_ps(c1);
        s2 = _mm256_loadu_ps(c2), s3 = _mm256_loadu_ps(c3);
    } else {
        s0 = s1 = s2 = s3 = _mm256_setzero_ps();
    }
    const float* bp = b + j0;
    for (std::size_t p = 0; p < k; ++p, bp += n) {
        const __m256 bv = _mm256_loadu_ps(bp);
        s0 = _mm256_fmadd_ps(_mm256_set1_ps(a0[p]), bv, s0);
        s1 = _mm256_fmadd_ps(_mm256_set1_ps(a1[p]), bv, s1);
        s2 = _mm256_fmadd_ps(_mm256_set1_ps(a2[p]), bv, s2);
        s3 = _mm256_fmadd_ps(_mm256_set1_ps(a3[p]), bv, s3);
    }
    _mm256_storeu_ps(c0, s0), _mm256_storeu_ps(c1, s1);
    _mm256_storeu_ps(c2, s2), _mm256_storeu_ps(c3, s3);
}

inline void fkern_1x8(float* c, const float* a, const float* b, std::size_t k, std::size_t n,
                      std::size_t i, std::size_t j0, bool accumulate) {
    const float* arow = a + i * k;
    float* crow = c + i * n + j0;
    __m256 s = accumulate ? _mm256_loadu_ps(crow) : _mm256_setzero_ps();
    const float* bp = b + j0;
    for (std::size_t p = 0; p < k; ++p, bp += n)
        s = _mm256_fmadd_ps(_mm256_set1_ps(arow[p]), _mm256_loadu_ps(bp), s);
    _mm256_storeu_ps(crow, s);
}

inline void fedge(float* c, const float* a, const float* b, std::size_t k, std::size_t n,
                  std::size_t i0, std::size_t rows, std::size_t j0, bool accumulate) {
    for (std::size_t i = i0; i < i0 + rows; ++i)
        for (std::size_t j = j0; j < n; ++j) {
            float s = accumulate ? c[i * n + j] : 0.0f;
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            c[i * n + j] = s;
        }
}

float fdot(const float* a, const float* b, std::size_t len) {
    __m256 s0 = _mm256_setzero_ps();
    __m256 s1 = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 16 <= len; i += 16) {
        s0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), s0);
        s1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), s1);
    }
    for (; i + 8 <= len; i += 8)
        s0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), s0);
    float s = hsum(_mm256_add_ps(s0, s1));
    for (; i < len; ++i) s += a[i] * b[i];
    return s;
}

void fgemm(float* c, const float* a, const float* b, std::size_t m, std::size_t k, std::size_t n,
           bool accumulate) {
    if (n == 1) {
        for (std::size_t i = 0; i < m; ++i) {
            const float s = fdot(a + i * k, b, k);
            c[i] = accumulate ? c[i] + s : s;
        }
        return;
    }
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        std::size_t j = 0;
        for (; j + 16 <= n; j += 16) fkern_4x16(c, a, b, k, n, i, j, accumulate);
        for (; j + 8 <= n; j += 8) fkern_4x8(c, a, b, k, n, i, j, accumulate);
        if (j < n) fedge(c, a, b, k, n, i, 4, j, accumulate);
    }
    for (; i < m; ++i) {
        std::size_t j = 0;
        for (; j + 8 <= n; j += 8) fkern_1x8(c, a, b, k, n, i, j, accumulate);
        if (j < n) fedge(c, a, b, k, n, i, 1, j, accumulate);
    }
}

// ----------------------------------------------------------------- elementwise

void dadd(double* c, const double* a, const double* b, std::size_t len) {
    std::size_t i = 0;
    for (; i + 4 <= len; i += 4)
        _mm256_storeu_pd(c + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < len; ++i) c[i] = a[i] + b[i];
}

void fadd(float* c, const float* a, const float* b, std::size_t len) {
    std::size_t i = 0;
    for (; i + 8 <= len; i += 8)
        _mm256_storeu_ps(c + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < len; ++i) c[i] = a[i] + b[i];
}

void daxpy(double* y, double alpha, const double* x, std::size_t len) {
    const __m256d av = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= len; i += 4)
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < len; ++i) y[i] += alpha * x[i];
}

void faxpy(float* y, float alpha, const float* x, std::size_t len) {
    const __m256 av = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= len; i += 8)
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    for (; i < len; ++i) y[i] += alpha * x[i];
}

void dscale(double* x, double alpha, std::size_t len) {
    const __m256d av = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= len; i += 4)
        _mm256_storeu_pd(x + i, _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
    for (; i < len; ++i) x[i] *= alpha;
}

void fscale(float* x, float alpha, std::size_t len) {
    const __m256 av = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= len; i += 8)
        _mm256_storeu_ps(x + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
    for (; i < len; ++i) x[i] *= alpha;
}

void dleaky_fwd(double* y, const double* x, double slope, std::size_t len) {
    const __m256d sv = _mm256_set1_pd(slope);
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= len; i += 4) {
        const __m256d xv = _mm256_loadu_pd(x + i);
        const __m256d mask = _mm256_cmp_pd(xv, zero, _CMP_GT_OQ);
        _mm256_storeu_pd(y + i, _mm256_blendv_pd(_mm256_mul_pd(sv, xv), xv, mask));
    }
    for (; i < len; ++i) y[i] = x[i] > 0.0 ? x[i] : slope * x[i];
}

void fleaky_fwd(float* y, const float* x, float slope, std::size_t len) {
    const __m256 sv = _mm256_set1_ps(slope);
    const __m256 zero = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= len; i += 8) {
        const __m256 xv = _mm256_loadu_ps(x + i);
        const __m256 mask = _mm256_cmp_ps(xv, zero, _CMP_GT_OQ);
        _mm256_storeu_ps(y + i, _mm256_blendv_ps(_mm256_mul_ps(sv, xv), xv, mask));
    }
    for (; i < len; ++i) y[i] = x[i] > 0.0f ? x[i] : slope * x[i];
}

void dleaky_bwd(double* dx, const double* x, const double* dy, double slope, std::size_t len) {
    const __m256d sv = _mm256_set1_pd(slope);
    const __m256d one = _mm256_set1_pd(1.0);
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= len; i += 4) {
        const __m256d xv = _mm256_loadu_pd(x + i);
        const __m256d mask = _mm256_cmp_pd(xv, zero, _CMP_GT_OQ);
        const __m256d g = _mm256_blendv_pd(sv, one, mask);
        _mm256_storeu_pd(dx + i,
                         _mm256_fmadd_pd(_mm256_loadu_pd(dy + i), g, _mm256_loadu_pd(dx + i)));
    }
    for (; i < len; ++i) dx[i] += dy[i] * (x[i] > 0.0 ? 1.0 : slope);
}

void fleaky_bwd(float* dx, const float* x, const float* dy, float slope, std::size_t len) {
    const __m256 sv = _mm256_set1_ps(slope);
    const __m256 one = _mm256_set1_ps(1.0f);
    const __m256 zero = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= len; i += 8) {
        const __m256 xv = _mm256_loadu_ps(x + i);
        const __m256 mask = _mm256_cmp_ps(xv, zero, _CMP_GT_OQ);
        const __m256 g = _mm256_blendv_ps(sv, one, mask);
        _mm256_storeu_ps(dx + i,
                         _mm256_fmadd_ps(_mm256_loadu_ps(dy + i), g, _mm256_loadu_ps(dx + i)));
    }
    for (; i < len; ++i) dx[i] += dy[i] * (x[i] > 0.0f ? 1.0f : slope);
}

// ----------------------------------------------------------------- reductions

double dsum(const double* x, std::size_t len) {
    __m256d s0 = _mm256_setzero_pd();
    __m256d s1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= len; i += 8) {
        s0 = _mm256_add_pd(s0, _mm256_loadu_pd(x + i));
        s1 = _mm256_add_pd(s1, _mm256_loadu_pd(x + i + 4));
    }
    for (; i + 4 <= len; i += 4) s0 = _mm256_add_pd(s0, _mm256_loadu_pd(x + i));
    double s = hsum(_mm256_add_pd(s0, s1));
    for (; i < len; ++i) s += x[i];
    return s;
}

float fsum(const float* x, std::size_t len) {
    __m256 s0 = _mm256_setzero_ps();
    __m256 s1 = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 16 <= len; i += 16) {
        s0 = _mm256_add_ps(s0, _mm256_loadu_ps(x + i));
        s1 = _mm256_add_ps(s1, _mm256_loadu_ps(x + i + 8));
    }
    for (; i + 8 <= len; i += 8) s0 = _mm256_add_ps(s0, _mm256_loadu_ps(x + i));
    float s = hsum(_mm256_add_ps(s0, s1));
    for (; i < len; ++i) s += x[i];
    return s;
}

std::size_t dargmax(const double* x, std::size_t len) {
    double mx = x[0];
    if (len >= 4) {
        __m256d vm = _mm256_loadu_pd(x);
        std::size_t i = 4;
        for (; i + 4 <= len; i += 4) vm = _mm256_max_pd(vm, _mm256_loadu_pd(x + i));
        mx = hmax(vm);
        for (; i < len; ++i) mx = x[i] > mx ? x[i] : mx;
    } else {
        for (std::size_t i = 1; i < len; ++i) mx = x[i] > mx ? x[i] : mx;
    }
    for (std::size_t i = 0; i < len; ++i)
        if (x[i] == mx) return i;
    return 0;  // unreachable for NaN-free input
}

std::size_t fargmax(const float* x, std::size_t len) {
    float mx = x[0];
    if (len >= 8) {
        __m256 vm = _mm256_loadu_ps(x);
        std::size_t i = 8;
        for (; i + 8 <= len; i += 8) vm = _mm256_max_ps(vm, _mm256_loadu_ps(x + i));
        mx = hmax(vm);
        for (; i < len; ++i) mx = x[i] > mx ? x[i] : mx;
    } else {
        for (std::size_t i = 1; i < len; ++i) mx = x[i] > mx ? x[i] : mx;
    }
    for (std::size_t i = 0; i < len; ++i)
        if (x[i] == mx) return i;
    return 0;
}

void dsoftmax_row(double* x, std::size_t len) {
    double mx = -std::numeric_limits<double>::infinity();
    std::size_t i = 0;
    if (len >= 4) {
        __m256d vm = _mm256_loadu_pd(x);
        i = 4;
        for (; i + 4 <= len; i += 4) vm = _mm256_max_pd(vm, _mm256_loadu_pd(x + i));
        mx = hmax(vm);
    }
    for (; i < len; ++i) mx = x[i] > mx ? x[i] : mx;
    // exp + sum kept scalar so both backends produce identical probabilities.
    double sum = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
        x[j] = std::exp(x[j] - mx);
        sum += x[j];
    }
    dscale(x, 1.0 / sum, len);
}

void fsoftmax_row(float* x, std::size_t len) {
    float mx = -std::numeric_limits<float>::infinity();
    std::size_t i = 0;
    if (len >= 8) {
        __m256 vm = _mm256_loadu_ps(x);
        i = 8;
        for (; i + 8 <= len; i += 8) vm = _mm256_max_ps(vm, _mm256_loadu_ps(x + i));
        mx = hmax(vm);
    }
    for (; i < len; ++i) mx = x[i] > mx ? x[i] : mx;
    float sum = 0.0f;
    for (std::size_t j = 0; j < len; ++j) {
        x[j] = std::exp(x[j] - mx);
        sum += x[j];
    }
    fscale(x, 1.0f / sum, len);
}

void dmean_var(const double* x, std::size_t len, double* mean, double* var) {
    const double mu = dsum(x, len) / double(len);
    const __m256d muv = _mm256_set1_pd(mu);
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= len; i += 4) {
        const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(x + i), muv);
        acc = _mm256_fmadd_pd(d, d, acc);
    }
    double v = hsum(acc);
    for (; i < len; ++i) {
        const double d = x[i] - mu;
        v += d * d;
    }
    *mean = mu;
    *var = v / double(len);
}

void fmean_var(const float* x, std::size_t len, float* mean, float* var) {
    const float mu = fsum(x, len) / float(len);
    const __m256 muv = _mm256_set1_ps(mu);
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= len; i += 8) {
        const __m256 d = _mm256_sub_ps(_mm256_loadu_ps(x + i), muv);
        acc = _mm256_fmadd_ps(d, d, acc);
    }
    float v = hsum(acc);
    for (; i < len; ++i) {
        const float d = x[i] - mu;
        v += d * d;
    }
    *mean = mu;
    *var = v / float(len);
}

void dadam(double* p, const double* g, double* m, double* v, std::size_t len, double lr,
           double beta1, double beta2, double eps, double bc1, double bc2) {
    const __m256d b1 = _mm256_set1_pd(beta1);
    const __m256d b1c = _mm256_set1_pd(1.0 - beta1);
    const __m256d b2 = _mm256_set1_pd(beta2);
    const __m256d b2c = _mm256_set1_pd(1.0 - beta2);
    const __m256d lrv = _mm256_set1_pd(lr);
    const __m256d epsv = _mm256_set1_pd(eps);
    const __m256d ibc1 = _mm256_set1_pd(bc1);
    const __m256d ibc2 = _mm256_set1_pd(bc2);
    std::size_t i = 0;
    for (; i + 4 <= len; i += 4) {
        const __m256d gv = _mm256_loadu_pd(g + i);
        const __m256d mv = _mm256_fmadd_pd(b1, _mm256_loadu_pd(m + i), _mm256_mul_pd(b1c, gv));
        const __m256d vv = _mm256_fmadd_pd(b2, _mm256_loadu_pd(v + i),
                                           _mm256_mul_pd(b2c, _mm256_mul_pd(gv, gv)));
        _mm256_storeu_pd(m + i, mv);
        _mm256_storeu_pd(v + i, vv);
        const __m256d mhat = _mm256_div_pd(mv, ibc1);
        const __m256d vhat = _mm256_div_pd(vv, ibc2);
        const __m256d upd =
            _mm256_div_pd(_mm256_mul_pd(lrv, mhat), _mm256_add_pd(_mm256_sqrt_pd(vhat), epsv));
        _mm256_storeu_pd(p + i, _mm256_sub_pd(_mm256_loadu_pd(p + i), upd));
    }
    for (; i < len; ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
}

void fadam(float* p, const float* g, float* m, float* v, std::size_t len, float lr, float beta1,
           float beta2, float eps, float bc1, float bc2) {
    const __m256 b1 = _mm256_set1_ps(beta1);
    const __m256 b1c = _mm256_set1_ps(1.0f - beta1);
    const __m256 b2 = _mm256_set1_ps(beta2);
    const __m256 b2c = _mm256_set1_ps(1.0f - beta2);
    const __m256 lrv = _mm256_set1_ps(lr);
    const __m256 epsv = _mm256_set1_ps(eps);
    const __m256 ibc1 = _mm256_set1_ps(bc1);
    const __m256 ibc2 = _mm256_set1_ps(bc2);
    std::size_t i = 0;
    for (; i + 8 <= len; i += 8) {
        const __m256 gv = _mm256_loadu_ps(g + i);
        const __m256 mv = _mm256_fmadd_ps(b1, _mm256_loadu_ps(m + i), _mm256_mul_ps(b1c, gv));
        const __m256 vv =
            _mm256_fmadd_ps(b2, _mm256_loadu_ps(v + i), _mm256_mul_ps(b2c, _mm256_mul_ps(gv, gv)));
        _mm256_storeu_ps(m + i, mv);
        _mm256_storeu_ps(v + i, vv);
        const __m256 mhat = _mm256_div_ps(mv, ibc1);
        const __m256 vhat = _mm256_div_ps(vv, ibc2);
        const __m256 upd =
            _mm256_div_ps(_mm256_mul_ps(lrv, mhat), _mm256_add_ps(_mm256_sqrt_ps(vhat), epsv));
        _mm256_storeu_ps(p + i, _mm256_sub_ps(_mm256_loadu_ps(p + i), upd));
    }
    for (; i < len; ++i) {
        m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
        p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
}

template <typename T>
void transpose_blk(T* dst, const T* src, std::size_t rows, std::size_t cols) {
    constexpr std::size_t kBlock = 16;
    for (std::size_t i0 = 0; i0 < rows; i0 += kBlock)
        for (std::size_t j0 = 0; j0 < cols; j0 += kBlock) {
            const std::size_t i1 = std::min(rows, i0 + kBlock);
            const std::size_t j1 = std::min(cols, j0 + kBlock);
            for (std::size_t i = i0; i < i1; ++i)
                for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
        }
}

}  // namespace

const Ops<double>& avx2_ops_f64() {
    static const Ops<double> o = [] {
        Ops<double> t;
        t.gemm = &dgemm;
        t.transpose = &transpose_blk<double>;
        t.add = &dadd;
        t.axpy = &daxpy;
        t.scale = &dscale;
        t.leaky_forward = &dleaky_fwd;
        t.leaky_backward = &dleaky_bwd;
        t.reduce_sum = &dsum;
        t.dot = &ddot;
        t.argmax = &dargmax;
        t.softmax_row = &dsoftmax_row;
        t.mean_var = &dmean_var;
        t.adam_update = &dadam;
        return t;
    }();
    return o;
}

const Ops<float>& avx2_ops_f32() {
    static const Ops<float> o = [] {
        Ops<float> t;
        t.gemm = &fgemm;
        t.transpose = &transpose_blk<float>;
        t.add = &fadd;
        t.axpy = &faxpy;
        t.scale = &fscale;
        t.leaky_forward = &fleaky_fwd;
        t.leaky_backward = &fleaky_bwd;
        t.reduce_sum = &fsum;
        t.dot = &fdot;
        t.argmax = &fargmax;
        t.softmax_row = &fsoftmax_row;
        t.mean_var = &fmean_var;
        t.adam_update = &fadam;
        return t;
    }();
    return o;
}

}  // namespace p2p::kernels
