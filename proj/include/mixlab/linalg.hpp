#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include <Eigen/SVD>

#include "mixlab/tensor.hpp"

namespace mixlab {

// Moore-Penrose pseudoinverse of a d x t matrix via SVD. Singular values
// below rcond * sigma_max are treated as zero, which gives the limit of
// (W^T W + aI)^-1 W^T as a -> 0+ without forming W^T W.
template <class T>
Tensor<T> pinv(const Tensor<T>& w, double rcond = 1e-10) {
  if (w.rank() != 2) throw DimensionError("pinv: expected a matrix, got " + shape_str(w.shape()));
  const std::size_t d = w.rows(), t = w.cols();
  Eigen::MatrixXd a = detail::view(w.node()->data, d, t).template cast<double>();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& sigma = svd.singularValues();
  const double cutoff = sigma.size() ? rcond * sigma(0) : 0.0;
  Eigen::VectorXd inv = sigma.unaryExpr([cutoff](double s) { return s > cutoff && s > 0.0 ? 1.0 / s : 0.0; });
  Eigen::MatrixXd p = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
  std::vector<T> out(t * d);
  detail::view(out, t, d) = p.cast<T>();
  return Tensor<T>::matrix(t, d, std::move(out));
}

// Residuals of the four Penrose conditions, each relative to the infinity
// norm of the matrix it should reproduce:
//   W W+ W = W,  W+ W W+ = W+,  (W W+)^T = W W+,  (W+ W)^T = W+ W.
template <class T>
std::array<double, 4> penrose_residuals(const Tensor<T>& w, const Tensor<T>& wp) {
  const Eigen::MatrixXd a = detail::view(w.node()->data, w.rows(), w.cols()).template cast<double>();
  const Eigen::MatrixXd p = detail::view(wp.node()->data, wp.rows(), wp.cols()).template cast<double>();
  auto inf_norm = [](const Eigen::MatrixXd& m) { return m.size() ? m.rowwise().lpNorm<1>().maxCoeff() : 0.0; };
  auto rel = [&](const Eigen::MatrixXd& diff, const Eigen::MatrixXd& ref) {
    const double r = inf_norm(ref);
    return inf_norm(diff) / (r > 0 ? r : 1.0);
  };
  const Eigen::MatrixXd ap = a * p, pa = p * a;
  return {rel(ap * a - a, a), rel(pa * p - p, p), rel(ap.transpose() - ap, ap), rel(pa.transpose() - pa, pa)};
}

}  // namespace mixlab
