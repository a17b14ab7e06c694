#include <cstdio>
#include <cstdlib>
#include <string>

#include "p2p/errors.hpp"
#include "p2p/kernels/kernels.hpp"

namespace p2p::kernels {
namespace {

Backend detect() {
    if (const char* env = std::getenv("P2P_KERNELS")) {
        const std::string s(env);
        if (s == "scalar") return Backend::scalar;
        if (s == "avx2") {
            if (avx2_supported()) return Backend::avx2;
            std::fprintf(stderr,
                         "p2p: P2P_KERNELS=avx2 requested but CPU lacks AVX2/FMA; using scalar\n");
            return Backend::scalar;
        }
        std::fprintf(stderr, "p2p: ignoring unknown P2P_KERNELS value '%s'\n", env);
    }
    return avx2_supported() ? Backend::avx2 : Backend::scalar;
}

Backend& backend_slot() {
    static Backend b = detect();
    return b;
}

}  // namespace

bool avx2_supported() {
#if defined(__x86_64__) || defined(__i386__)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Backend active_backend() { return backend_slot(); }

void force_backend(Backend b) {
    if (b == Backend::avx2 && !avx2_supported())
        throw NumericError("cannot force avx2 kernels: CPU lacks AVX2/FMA");
    backend_slot() = b;
}

template <>
const Ops<double>& ops<double>() {
    return backend_slot() == Backend::avx2 ? avx2_ops_f64() : scalar_ops_f64();
}

template <>
const Ops<float>& ops<float>() {
    return backend_slot() == Backend::avx2 ? avx2_ops_f32() : scalar_ops_f32();
}

std::string backend_name(Backend b) { return b == Backend::avx2 ? "avx2" : "scalar"; }

}  // namespace p2p::kernels
