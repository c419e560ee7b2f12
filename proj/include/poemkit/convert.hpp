#pragma once

// Eigen <-> Tensor copies.

#include <Eigen/Dense>

#include "poemkit/tensor.hpp"

namespace poemkit {

template <typename T = double, typename Derived>
BasicTensor<T> to_tensor(const Eigen::MatrixBase<Derived>& m, bool requires_grad = false) {
  std::vector<T> data(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      data[static_cast<std::size_t>(r * m.cols() + c)] = static_cast<T>(m(r, c));
  return BasicTensor<T>({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, std::move(data),
                        requires_grad);
}

/// Rank-2 tensor as a row-major double matrix.
template <typename T>
Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> to_matrix(const BasicTensor<T>& t) {
  if (t.rank() != 2) throw ShapeError("to_matrix: expected rank 2, got " + shape_str(t.shape()));
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(t.dim(0), t.dim(1));
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) m.data()[i] = static_cast<double>(d[i]);
  return m;
}

}  // namespace poemkit
