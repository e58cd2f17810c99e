#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "capgen/corpus.hpp"

namespace capgen {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles. Vectors multiply from the left
/// (y = xW), so a weight matrix is fan_in x fan_out.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// y += x W
void accumulate_xw(std::span<const double> x, const Matrix& w, std::span<double> y);
/// dx += dy W^T
void accumulate_dy_wt(std::span<const double> dy, const Matrix& w, std::span<double> dx);
/// dW += x^T dy
void accumulate_outer(std::span<const double> x, std::span<const double> dy, Matrix& dw);

/// y = x W + b. Throws Errc::shape on mismatch.
Vector affine(std::span<const double> x, const Matrix& w, std::span<const double> b);

/// Gradients of `affine` are accumulated into dx/dw/db; pass an empty span
/// for dx or db to skip it.
void affine_backward(std::span<const double> x, const Matrix& w, std::span<const double> dy,
                     std::span<double> dx, Matrix& dw, std::span<double> db);

enum class Activation { sigmoid, tanh };

double sigmoid(double x);
Vector activation(std::span<const double> x, Activation kind);
/// Uses the forward outputs `y`: sigmoid' = y(1-y), tanh' = 1-y^2.
Vector activation_backward(std::span<const double> y, std::span<const double> dy, Activation kind);

/// Max-subtracted softmax.
Vector softmax(std::span<const double> x);
/// dx = y * (dy - <dy, y>)
Vector softmax_backward(std::span<const double> y, std::span<const double> dy);
Vector log_softmax(std::span<const double> x);

/// Rows of the table are word embeddings. Throws Errc::range.
std::span<const double> embed(const Matrix& table, TokenId id);
void embed_backward(Matrix& dtable, TokenId id, std::span<const double> dy);

struct CrossEntropy {
  double loss = 0.0;
  Matrix dlogits;
};

/// Mean negative log-likelihood over unmasked rows. `normalizer` overrides
/// the divisor (default: number of unmasked rows) so a caller can average
/// over a whole batch of sequences.
CrossEntropy masked_cross_entropy(const Matrix& logits, std::span<const TokenId> targets,
                                  std::span<const std::uint8_t> mask, double normalizer = 0.0);

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Maximum over coordinates of |analytic - numeric| / max(|analytic|,
/// |numeric|, 1e-8), numeric from central differences.
double gradient_check(const ScalarFunction& f, std::span<const double> params,
                      std::span<const double> analytic, double epsilon);

/// Central-difference gradient of f at params.
Vector numeric_gradient(const ScalarFunction& f, std::span<const double> params, double epsilon);

/// Same checks for an objective evaluated in extended precision. The
/// difference quotient is formed before rounding to double, so gradients
/// far below the objective's ulp can still be resolved.
using WideScalarFunction = std::function<long double(std::span<const double>)>;

double gradient_check_wide(const WideScalarFunction& f, std::span<const double> params,
                           std::span<const double> analytic, double epsilon);

Vector numeric_gradient_wide(const WideScalarFunction& f, std::span<const double> params, double epsilon);

/// Throws Errc::numeric if any value is NaN/Inf.
void require_finite(std::span<const double> values, const char* what);

}  // namespace capgen
