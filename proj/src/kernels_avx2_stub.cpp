#include "p2p/kernels/kernels.hpp"

// Non-x86 fallback: the avx2 tables alias the scalar reference kernels.
// avx2_supported() returns false on these hosts, so they are never selected.

namespace p2p::kernels {

const Ops<double>& avx2_ops_f64() { return scalar_ops_f64(); }
const Ops<float>& avx2_ops_f32() { return scalar_ops_f32(); }

}  // namespace p2p::kernels
