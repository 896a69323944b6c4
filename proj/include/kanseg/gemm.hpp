#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace kanseg::detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

/// C[m×n] (=|+=) op(A) · op(B), all row-major. op(A) is m×k, op(B) is k×n.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  ConstMap<T> A(a, trans_a ? K : M, trans_a ? M : K, Eigen::OuterStride<>(trans_a ? M : K));
  ConstMap<T> B(b, trans_b ? N : K, trans_b ? K : N, Eigen::OuterStride<>(trans_b ? K : N));
  MutMap<T> C(c, M, N, Eigen::OuterStride<>(N));
  if (!accumulate) C.setZero();
  if (trans_a && trans_b) {
    C.noalias() += A.transpose() * B.transpose();
  } else if (trans_a) {
    C.noalias() += A.transpose() * B;
  } else if (trans_b) {
    C.noalias() += A * B.transpose();
  } else {
    C.noalias() += A * B;
  }
}

}  // namespace kanseg::detail
