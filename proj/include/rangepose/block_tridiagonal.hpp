#pragma once
/**
 * block_tridiagonal.hpp - symmetric block-tridiagonal systems.
 *
 * A chain of knots linked only to their neighbours gives an information
 * matrix with blocks D_i on the diagonal and U_i = H(i, i+1) above it.
 * Forward elimination produces the pivots
 *
 *   S_0 = D_0,   S_{i+1} = D_{i+1} - U_i^T S_i^-1 U_i
 *
 * from which solves, selected inverses and Schur complements all follow in
 * linear time.
 */

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cstddef>
#include <vector>

namespace rangepose {

template <int B>
struct BlockTridiagonal {
  using Block = Eigen::Matrix<double, B, B>;
  using Vec = Eigen::Matrix<double, B, 1>;

  std::vector<Block> diag;
  std::vector<Block> upper;  // upper[i] couples block i with block i+1
  std::vector<Vec> rhs;

  BlockTridiagonal() = default;
  explicit BlockTridiagonal(std::size_t n) { resize(n); }

  void resize(std::size_t n) {
    diag.assign(n, Block::Zero());
    upper.assign(n > 0 ? n - 1 : 0, Block::Zero());
    rhs.assign(n, Vec::Zero());
  }

  std::size_t size() const { return diag.size(); }

  Eigen::MatrixXd dense() const {
    const auto n = static_cast<Eigen::Index>(size());
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(n * B, n * B);
    for (Eigen::Index i = 0; i < n; ++i) {
      h.block<B, B>(i * B, i * B) = diag[static_cast<std::size_t>(i)];
      if (i + 1 < n) {
        h.block<B, B>(i * B, (i + 1) * B) = upper[static_cast<std::size_t>(i)];
        h.block<B, B>((i + 1) * B, i * B) = upper[static_cast<std::size_t>(i)].transpose();
      }
    }
    return h;
  }

  Eigen::VectorXd dense_rhs() const {
    Eigen::VectorXd b(static_cast<Eigen::Index>(size()) * B);
    for (std::size_t i = 0; i < size(); ++i) b.segment<B>(static_cast<Eigen::Index>(i) * B) = rhs[i];
    return b;
  }
};

/// Forward elimination of a BlockTridiagonal; `ok` is false if a pivot is not positive definite.
template <int B>
class BlockTridiagonalFactor {
 public:
  using Block = typename BlockTridiagonal<B>::Block;
  using Vec = typename BlockTridiagonal<B>::Vec;

  /// Factors the first `count` blocks (all by default); `damping` is added to each diagonal block.
  explicit BlockTridiagonalFactor(const BlockTridiagonal<B>& sys, std::size_t count = static_cast<std::size_t>(-1),
                                  const std::vector<Vec>* damping = nullptr)
      : sys_(sys) {
    const std::size_t n = std::min(count, sys.size());
    pivots_.reserve(n);
    llt_.reserve(n);
    reduced_rhs_.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      Block s = sys.diag[i];
      if (damping) s.diagonal() += (*damping)[i];
      Vec y = sys.rhs[i];
      if (i > 0) {
        // U^T S^-1 U = W^T W with W = L^-1 U.
        const Block w = llt_[i - 1].matrixL().solve(sys.upper[i - 1]);
        const Vec z = llt_[i - 1].matrixL().solve(reduced_rhs_[i - 1]);
        s.noalias() -= w.transpose().lazyProduct(w);
        y.noalias() -= w.transpose().lazyProduct(z);
      }
      s = 0.5 * (s + s.transpose()).eval();
      pivots_.push_back(s);
      reduced_rhs_.push_back(y);
      llt_.emplace_back(s);
      if (llt_.back().info() != Eigen::Success || !s.allFinite()) {
        ok_ = false;
        failed_at_ = i;
        return;
      }
    }
  }

  bool ok() const { return ok_; }
  std::size_t failed_at() const { return failed_at_; }
  std::size_t size() const { return llt_.size(); }
  const Block& pivot(std::size_t i) const { return pivots_[i]; }
  /// Right-hand side after forward elimination.
  const Vec& reduced_rhs(std::size_t i) const { return reduced_rhs_[i]; }

  /// Back substitution; requires the full system to be factored.
  std::vector<Vec> solve() const {
    const std::size_t n = llt_.size();
    std::vector<Vec> x(n);
    for (std::size_t k = n; k-- > 0;) {
      Vec r = reduced_rhs_[k];
      if (k + 1 < n) r.noalias() -= sys_.upper[k] * x[k + 1];
      x[k] = llt_[k].solve(r);
    }
    return x;
  }

  /// Diagonal blocks of the inverse, plus the first off-diagonal blocks if requested.
  std::vector<Block> selected_inverse(std::vector<Block>* cross = nullptr) const {
    const std::size_t n = llt_.size();
    std::vector<Block> sigma(n);
    if (cross) cross->assign(n > 0 ? n - 1 : 0, Block::Zero());
    if (n == 0) return sigma;
    sigma[n - 1] = llt_[n - 1].solve(Block::Identity());
    for (std::size_t k = n - 1; k-- > 0;) {
      const Block g = llt_[k].solve(sys_.upper[k]);  // S_k^-1 U_k
      const Block c = -g.lazyProduct(sigma[k + 1]);
      Block s = llt_[k].solve(Block::Identity()) - c.lazyProduct(g.transpose());
      sigma[k] = 0.5 * (s + s.transpose());
      if (cross) (*cross)[k] = c;
    }
    return sigma;
  }

 private:
  const BlockTridiagonal<B>& sys_;
  std::vector<Block> pivots_;
  std::vector<Eigen::LLT<Block>> llt_;
  std::vector<Vec> reduced_rhs_;
  bool ok_ = true;
  std::size_t failed_at_ = 0;
};

/**
 * Pivot eigenvalue scan without Cholesky; works on singular systems where
 * BlockTridiagonalFactor would stop at the first failing pivot. Uses a
 * pseudo-inverse of each pivot.
 */
template <int B>
int count_null_directions(const BlockTridiagonal<B>& sys, double rel_tol = 1e-9) {
  using Block = typename BlockTridiagonal<B>::Block;
  int count = 0;
  Block prev_pinv = Block::Zero();
  for (std::size_t i = 0; i < sys.size(); ++i) {
    Block s = sys.diag[i];
    if (i > 0) s -= sys.upper[i - 1].transpose() * prev_pinv * sys.upper[i - 1];
    s = 0.5 * (s + s.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Block> es(s);
    const double scale = std::max(sys.diag[i].cwiseAbs().maxCoeff(), 1e-300);
    Eigen::Matrix<double, B, 1> inv_ev = Eigen::Matrix<double, B, 1>::Zero();
    for (int k = 0; k < B; ++k) {
      if (es.eigenvalues()(k) < rel_tol * scale) {
        ++count;
      } else {
        inv_ev(k) = 1.0 / es.eigenvalues()(k);
      }
    }
    prev_pinv = es.eigenvectors() * inv_ev.asDiagonal() * es.eigenvectors().transpose();
  }
  return count;
}

}  // namespace rangepose
