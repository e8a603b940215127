#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace ddad::detail {

/// Row-major C = alpha * op(A) * op(B) + beta * C, where op(A) is m x k and
/// op(B) is k x n. A is stored k x m when trans_a is set, likewise for B.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          T alpha, const T* a, const T* b, T beta, T* c) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using ConstMap = Eigen::Map<const Mat>;
    const auto M = static_cast<Eigen::Index>(m);
    const auto N = static_cast<Eigen::Index>(n);
    const auto K = static_cast<Eigen::Index>(k);

    Eigen::Map<Mat> out(c, M, N);
    if (beta == T(0)) {
        out.setZero();
    } else if (beta != T(1)) {
        out *= beta;
    }
    if (m == 0 || n == 0 || k == 0) return;

    ConstMap a_map(a, trans_a ? K : M, trans_a ? M : K);
    ConstMap b_map(b, trans_b ? N : K, trans_b ? K : N);
    if (!trans_a && !trans_b) {
        out.noalias() += alpha * (a_map * b_map);
    } else if (trans_a && !trans_b) {
        out.noalias() += alpha * (a_map.transpose() * b_map);
    } else if (!trans_a && trans_b) {
        out.noalias() += alpha * (a_map * b_map.transpose());
    } else {
        out.noalias() += alpha * (a_map.transpose() * b_map.transpose());
    }
}

} // namespace ddad::detail
