#include "capgen/nnmath.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "capgen/error.hpp"

namespace capgen {

namespace {

void check(bool ok, const char* what) {
  if (!ok) throw Error(Errc::shape, std::string("shape mismatch in ") + what);
}

}  // namespace

void accumulate_xw(std::span<const double> x, const Matrix& w, std::span<double> y) {
  check(x.size() == w.rows() && y.size() == w.cols(), "xW");
  const std::size_t cols = w.cols();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* wr = w.row(i).data();
    for (std::size_t j = 0; j < cols; ++j) y[j] += xi * wr[j];
  }
}

void accumulate_dy_wt(std::span<const double> dy, const Matrix& w, std::span<double> dx) {
  check(dx.size() == w.rows() && dy.size() == w.cols(), "dy W^T");
  const std::size_t cols = w.cols();
  for (std::size_t i = 0; i < dx.size(); ++i) {
    const double* wr = w.row(i).data();
    double acc = 0.0;
    for (std::size_t j = 0; j < cols; ++j) acc += dy[j] * wr[j];
    dx[i] += acc;
  }
}

void accumulate_outer(std::span<const double> x, std::span<const double> dy, Matrix& dw) {
  check(x.size() == dw.rows() && dy.size() == dw.cols(), "x^T dy");
  const std::size_t cols = dw.cols();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    double* dr = dw.row(i).data();
    for (std::size_t j = 0; j < cols; ++j) dr[j] += xi * dy[j];
  }
}

Vector affine(std::span<const double> x, const Matrix& w, std::span<const double> b) {
  check(b.size() == w.cols(), "affine bias");
  Vector y(b.begin(), b.end());
  accumulate_xw(x, w, y);
  return y;
}

void affine_backward(std::span<const double> x, const Matrix& w, std::span<const double> dy,
                     std::span<double> dx, Matrix& dw, std::span<double> db) {
  check(dw.same_shape(w), "affine dW");
  if (!dx.empty()) accumulate_dy_wt(dy, w, dx);
  accumulate_outer(x, dy, dw);
  if (!db.empty()) {
    check(db.size() == dy.size(), "affine db");
    for (std::size_t j = 0; j < dy.size(); ++j) db[j] += dy[j];
  }
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Vector activation(std::span<const double> x, Activation kind) {
  Vector y(x.size());
  if (kind == Activation::sigmoid) {
    std::transform(x.begin(), x.end(), y.begin(), [](double v) { return sigmoid(v); });
  } else {
    std::transform(x.begin(), x.end(), y.begin(), [](double v) { return std::tanh(v); });
  }
  return y;
}

Vector activation_backward(std::span<const double> y, std::span<const double> dy, Activation kind) {
  check(y.size() == dy.size(), "activation backward");
  Vector dx(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = kind == Activation::sigmoid ? y[i] * (1.0 - y[i]) : 1.0 - y[i] * y[i];
    dx[i] = dy[i] * d;
  }
  return dx;
}

Vector softmax(std::span<const double> x) {
  Vector y(x.size());
  if (x.empty()) return y;
  const double m = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - m);
    sum += y[i];
  }
  for (auto& v : y) v /= sum;
  return y;
}

Vector softmax_backward(std::span<const double> y, std::span<const double> dy) {
  check(y.size() == dy.size(), "softmax backward");
  double dot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += dy[i] * y[i];
  Vector dx(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] * (dy[i] - dot);
  return dx;
}

Vector log_softmax(std::span<const double> x) {
  Vector y(x.size());
  if (x.empty()) return y;
  const double m = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (double v : x) sum += std::exp(v - m);
  const double lse = m + std::log(sum);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] - lse;
  return y;
}

std::span<const double> embed(const Matrix& table, TokenId id) {
  if (id < 0 || static_cast<std::size_t>(id) >= table.rows()) {
    throw Error(Errc::range, "token id " + std::to_string(id) + " outside embedding table of " +
                                 std::to_string(table.rows()) + " rows");
  }
  return table.row(static_cast<std::size_t>(id));
}

void embed_backward(Matrix& dtable, TokenId id, std::span<const double> dy) {
  if (id < 0 || static_cast<std::size_t>(id) >= dtable.rows()) {
    throw Error(Errc::range, "token id " + std::to_string(id) + " outside embedding table");
  }
  check(dy.size() == dtable.cols(), "embedding backward");
  auto row = dtable.row(static_cast<std::size_t>(id));
  for (std::size_t j = 0; j < dy.size(); ++j) row[j] += dy[j];
}

CrossEntropy masked_cross_entropy(const Matrix& logits, std::span<const TokenId> targets,
                                  std::span<const std::uint8_t> mask, double normalizer) {
  check(targets.size() == logits.rows() && mask.size() == logits.rows(), "cross entropy");
  std::size_t active = 0;
  for (auto m : mask) active += m != 0 ? 1 : 0;
  if (active == 0) throw Error(Errc::usage, "cross entropy over an all-zero mask");
  const double denom = normalizer > 0.0 ? normalizer : static_cast<double>(active);

  CrossEntropy out{0.0, Matrix(logits.rows(), logits.cols())};
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    if (mask[t] == 0) continue;
    const auto target = targets[t];
    if (target < 0 || static_cast<std::size_t>(target) >= logits.cols()) {
      throw Error(Errc::range, "target id " + std::to_string(target) + " outside logits");
    }
    const auto probs = softmax(logits.row(t));
    const auto logp = log_softmax(logits.row(t));
    out.loss -= logp[static_cast<std::size_t>(target)];
    auto drow = out.dlogits.row(t);
    for (std::size_t v = 0; v < probs.size(); ++v) drow[v] = probs[v] / denom;
    drow[static_cast<std::size_t>(target)] -= 1.0 / denom;
  }
  out.loss /= denom;
  return out;
}

namespace {

template <typename Fn>
Vector central_differences(const Fn& f, std::span<const double> params, double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) {
    throw Error(Errc::usage, "gradient check epsilon must lie in [1e-7, 1e-3]");
  }
  using Wide = decltype(f(params));
  Vector p(params.begin(), params.end());
  Vector g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double saved = p[i];
    p[i] = saved + epsilon;
    const Wide up = f(p);
    p[i] = saved - epsilon;
    const Wide down = f(p);
    p[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw Error(Errc::numeric, "gradient check: objective is not finite");
    }
    // Divide by the step actually taken, which may differ from 2*epsilon
    // by rounding of saved +/- epsilon.
    const Wide step = static_cast<Wide>(saved + epsilon) - static_cast<Wide>(saved - epsilon);
    g[i] = static_cast<double>((up - down) / step);
  }
  return g;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) throw Error(Errc::shape, "gradient check: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double a = analytic[i];
    const double n = numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), 1e-8});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

}  // namespace

Vector numeric_gradient(const ScalarFunction& f, std::span<const double> params, double epsilon) {
  return central_differences(f, params, epsilon);
}

Vector numeric_gradient_wide(const WideScalarFunction& f, std::span<const double> params, double epsilon) {
  return central_differences(f, params, epsilon);
}

double gradient_check(const ScalarFunction& f, std::span<const double> params, std::span<const double> analytic,
                      double epsilon) {
  if (analytic.size() != params.size()) throw Error(Errc::shape, "gradient check: size mismatch");
  return max_relative_error(analytic, numeric_gradient(f, params, epsilon));
}

double gradient_check_wide(const WideScalarFunction& f, std::span<const double> params,
                           std::span<const double> analytic, double epsilon) {
  if (analytic.size() != params.size()) throw Error(Errc::shape, "gradient check: size mismatch");
  return max_relative_error(analytic, numeric_gradient_wide(f, params, epsilon));
}

void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(Errc::numeric, std::string("non-finite value in ") + what);
  }
}

}  // namespace capgen
