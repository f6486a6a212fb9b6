#pragma once

// Dense numeric kernels shared by every layer of the lab. Matrices are
// row-major Eigen types; the products used by the models go through
// `matmul`, whose accumulation order is fixed so that runs are
// bit-reproducible regardless of Eigen's blocking heuristics.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmlab/errors.hpp"

namespace mmlab {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

inline constexpr double kLogClamp = 1e-12;

std::string shape_str(Eigen::Index rows, Eigen::Index cols);

/// Throws NumericError if any entry is NaN or infinite.
template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, std::string_view what) {
  if (!m.derived().allFinite()) {
    throw NumericError(std::string(what) + ": non-finite entry in " +
                       shape_str(m.rows(), m.cols()) + " matrix");
  }
}

/// Checked construction from row-major data.
Matrix make_matrix(Eigen::Index rows, Eigen::Index cols, std::span<const double> data);

// ---------------------------------------------------------------------------
// Random numbers

std::uint64_t splitmix64(std::uint64_t& state);

/// Child seed for a named sub-stream, e.g. derive_seed(root, "task:2").
std::uint64_t derive_seed(std::uint64_t parent, std::string_view name);

/// xoshiro256** seeded through splitmix64. Single owner; never share across threads.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Unbiased integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  /// Standard normal deviate (Box-Muller, second deviate cached).
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::array<std::uint64_t, 4> s_{};
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

// ---------------------------------------------------------------------------
// Kernels

/// C = A * B with a fixed i-k-j loop; each C(i,j) accumulates over k in order.
template <typename Scalar>
MatrixX<Scalar> matmul(const MatrixX<Scalar>& a, const MatrixX<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.rows(), a.cols()) + " by " +
                     shape_str(b.rows(), b.cols()));
  }
  MatrixX<Scalar> c = MatrixX<Scalar>::Zero(a.rows(), b.cols());
  const Eigen::Index n = b.cols();
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    Scalar* out = c.data() + i * n;
    for (Eigen::Index k = 0; k < a.cols(); ++k) {
      const Scalar aik = a(i, k);
      const Scalar* brow = b.data() + k * n;
      for (Eigen::Index j = 0; j < n; ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

/// Aᵀ * B without materializing the transpose.
template <typename Scalar>
MatrixX<Scalar> matmul_tn(const MatrixX<Scalar>& a, const MatrixX<Scalar>& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: cannot multiply transpose of " + shape_str(a.rows(), a.cols()) +
                     " by " + shape_str(b.rows(), b.cols()));
  }
  MatrixX<Scalar> c = MatrixX<Scalar>::Zero(a.cols(), b.cols());
  const Eigen::Index n = b.cols();
  for (Eigen::Index k = 0; k < a.rows(); ++k) {
    const Scalar* brow = b.data() + k * n;
    for (Eigen::Index i = 0; i < a.cols(); ++i) {
      const Scalar aki = a(k, i);
      Scalar* out = c.data() + i * n;
      for (Eigen::Index j = 0; j < n; ++j) out[j] += aki * brow[j];
    }
  }
  return c;
}

/// A * Bᵀ.
template <typename Scalar>
MatrixX<Scalar> matmul_nt(const MatrixX<Scalar>& a, const MatrixX<Scalar>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: cannot multiply " + shape_str(a.rows(), a.cols()) +
                     " by transpose of " + shape_str(b.rows(), b.cols()));
  }
  MatrixX<Scalar> c(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      Scalar acc = 0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) acc += a(i, k) * b(j, k);
      c(i, j) = acc;
    }
  }
  return c;
}

/// Subtract-max stabilized softmax.
template <typename Derived>
VectorX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (logits.size() == 0) throw ShapeError("softmax: empty vector");
  const Scalar peak = logits.maxCoeff();
  VectorX<Scalar> e(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) e(i) = std::exp(logits(i) - peak);
  return e / e.sum();
}

/// Row-wise softmax of a logits batch.
template <typename Scalar>
MatrixX<Scalar> softmax_rows(const MatrixX<Scalar>& logits) {
  MatrixX<Scalar> p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) p.row(r) = softmax(logits.row(r).transpose()).transpose();
  return p;
}

/// KL(target ‖ predicted) with 0·ln 0 = 0 and predicted clamped below at 1e-12.
template <typename DerivedT, typename DerivedP>
typename DerivedT::Scalar kl_divergence(const Eigen::MatrixBase<DerivedT>& target,
                                        const Eigen::MatrixBase<DerivedP>& predicted) {
  using Scalar = typename DerivedT::Scalar;
  if (target.size() != predicted.size()) {
    throw ShapeError("kl_divergence: length " + std::to_string(target.size()) + " vs " +
                     std::to_string(predicted.size()));
  }
  Scalar acc = 0;
  for (Eigen::Index i = 0; i < target.size(); ++i) {
    const Scalar t = target(i);
    if (t <= 0) continue;
    const Scalar p = std::max<Scalar>(predicted(i), Scalar(kLogClamp));
    acc += t * (std::log(t) - std::log(p));
  }
  return acc;
}

template <typename DerivedX, typename DerivedY>
typename DerivedX::Scalar euclidean_distance(const Eigen::MatrixBase<DerivedX>& x,
                                             const Eigen::MatrixBase<DerivedY>& y) {
  if (x.size() != y.size()) {
    throw ShapeError("euclidean_distance: length " + std::to_string(x.size()) + " vs " +
                     std::to_string(y.size()));
  }
  typename DerivedX::Scalar acc = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const auto diff = x(i) - y(i);
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

/// Entrywise l1 norm of MᵀM − I.
template <typename Scalar>
Scalar orth_penalty(const MatrixX<Scalar>& m) {
  if (m.rows() != m.cols()) throw ShapeError("orth_penalty: non-square " + shape_str(m.rows(), m.cols()));
  MatrixX<Scalar> gram = matmul_tn(m, m);
  gram.diagonal().array() -= Scalar(1);
  return gram.cwiseAbs().sum();
}

/// Subgradient of orth_penalty with sign(0) = 0: M (S + Sᵀ), S = sign(MᵀM − I).
template <typename Scalar>
MatrixX<Scalar> orth_penalty_grad(const MatrixX<Scalar>& m) {
  if (m.rows() != m.cols()) throw ShapeError("orth_penalty_grad: non-square " + shape_str(m.rows(), m.cols()));
  MatrixX<Scalar> gram = matmul_tn(m, m);
  gram.diagonal().array() -= Scalar(1);
  const MatrixX<Scalar> s = gram.unaryExpr([](Scalar v) { return Scalar((v > 0) - (v < 0)); });
  const MatrixX<Scalar> sym = s + s.transpose();
  return matmul(m, sym);
}

/// Gram-Schmidt orthonormalization of a Gaussian matrix.
Matrix random_orthogonal(Eigen::Index d, Rng& rng);

/// Index of the largest entry; ties resolve to the lowest index.
template <typename Derived>
Eigen::Index argmax(const Eigen::MatrixBase<Derived>& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = i;
  return best;
}

}  // namespace mmlab
