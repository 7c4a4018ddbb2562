#include "gramsmear/kernels.hpp"

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

namespace gramsmear::kernels {

template <class T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const Mat>;
  Eigen::Map<Mat> out(c, m, n);
  if (!accumulate) out.setZero();
  if (m == 0 || n == 0 || k == 0) return;
  if (!trans_a && !trans_b) {
    out.noalias() += ConstMap(a, m, k) * ConstMap(b, k, n);
  } else if (!trans_a && trans_b) {
    out.noalias() += ConstMap(a, m, k) * ConstMap(b, n, k).transpose();
  } else if (trans_a && !trans_b) {
    out.noalias() += ConstMap(a, k, m).transpose() * ConstMap(b, k, n);
  } else {
    out.noalias() += ConstMap(a, k, m).transpose() * ConstMap(b, n, k).transpose();
  }
}

template void gemm<float>(bool, bool, int, int, int, const float*, const float*, float*, bool);
template void gemm<double>(bool, bool, int, int, int, const double*, const double*, double*, bool);

}  // namespace gramsmear::kernels
