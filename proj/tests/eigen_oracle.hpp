// Eigen-based oracles: an independent eigensolver and least-squares fit.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <utility>

#include "colab/tensor.hpp"

namespace testing_support {

inline Eigen::MatrixXd to_eigen(const colab::Tensor& t) {
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    for (std::size_t j = 0; j < t.dim(1); ++j) m(i, j) = t[i * t.dim(1) + j];
  }
  return m;
}

/// Rank from Eigen's self-adjoint solver on the Gram matrix, same threshold rule.
inline std::size_t eigen_rank(const colab::Tensor& t, double fraction) {
  const Eigen::MatrixXd a = to_eigen(t);
  const Eigen::MatrixXd gram = a * a.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram, Eigen::EigenvaluesOnly);
  Eigen::VectorXd ev = solver.eigenvalues().reverse();  // descending
  double total = 0.0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) total += std::max(ev(i), 0.0);
  if (total == 0.0) return 0;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    acc += std::max(ev(i), 0.0);
    if (acc >= fraction * total * (1.0 - 1e-12)) return static_cast<std::size_t>(i + 1);
  }
  return static_cast<std::size_t>(ev.size());
}

/// Least-squares plane through an n x n grid on [0,1]^2; returns the max residual and (c0, c1, c2).
inline std::pair<double, Eigen::Vector3d> plane_fit_residual(const colab::Tensor& grid) {
  const std::size_t n = grid.dim(0);
  Eigen::MatrixXd A(n * n, 3);
  Eigen::VectorXd y(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      A.row(i * n + j) << 1.0, double(i) / double(n - 1), double(j) / double(n - 1);
      y(i * n + j) = grid[i * n + j];
    }
  }
  const Eigen::Vector3d coef = A.colPivHouseholderQr().solve(y);
  return {(A * coef - y).cwiseAbs().maxCoeff(), coef};
}

inline double plane_fit_residual_max(const colab::Tensor& grid) { return plane_fit_residual(grid).first; }

}  // namespace testing_support
