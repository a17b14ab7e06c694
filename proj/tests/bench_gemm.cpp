// Quick gemm throughput probe for sizing training runtime. Not a ctest.
#include <chrono>
#include <cstdio>
#include <vector>

#include "p2p/kernels/kernels.hpp"
#include "p2p/rng.hpp"

using clk = std::chrono::steady_clock;

static void bench(std::size_t m, std::size_t k, std::size_t n, int reps) {
    p2p::Rng rng(1);
    std::vector<double> a(m * k), b(k * n), c(m * n);
    for (auto& x : a) x = rng.uniform(-1, 1);
    for (auto& x : b) x = rng.uniform(-1, 1);
    const auto& o = p2p::kernels::ops<double>();
    o.gemm(c.data(), a.data(), b.data(), m, k, n, false);  // warm
    const auto t0 = clk::now();
    for (int r = 0; r < reps; ++r) o.gemm(c.data(), a.data(), b.data(), m, k, n, false);
    const double sec = std::chrono::duration<double>(clk::now() - t0).count();
    const double gflops = 2.0 * double(m) * double(k) * double(n) * reps / sec / 1e9;
    std::printf("%4zu x %4zu x %4zu  %6.2f GF/s  (%.3f ms/call)\n", m, k, n, gflops,
                sec * 1e3 / reps);
}

int main() {
    std::printf("backend: %s\n",
                p2p::kernels::backend_name(p2p::kernels::active_backend()).c_str());
    bench(1408, 32, 512, 200);
    bench(1408, 512, 32, 200);
    bench(512, 1408, 32, 200);   // weight-gradient shape
    bench(128, 4, 128, 2000);
    bench(128, 128, 4, 2000);
    bench(128, 32, 96, 1000);
    bench(11, 128, 64, 5000);
    return 0;
}
