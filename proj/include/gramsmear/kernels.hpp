#pragma once

namespace gramsmear::kernels {

/// C[M,N] (+)= op(A) * op(B) on contiguous row-major buffers, where op(A) is
/// M x K and op(B) is K x N. Single-threaded; summation order depends only on
/// the sizes, so results are reproducible.
template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const T* a, const T* b, T* c, bool accumulate);

extern template void gemm<float>(bool, bool, int, int, int, const float*, const float*, float*, bool);
extern template void gemm<double>(bool, bool, int, int, int, const double*, const double*, double*, bool);

}  // namespace gramsmear::kernels
