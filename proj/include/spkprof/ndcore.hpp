#pragma once

// Dense linear algebra and differentiable layers with hand-written gradients.
//
// Everything is 64-bit and row-major. Layers are plain value types; forward
// passes return a cache that the matching backward pass consumes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace spkprof {

using Vec = std::vector<double>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, Vec data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                       " does not match " + shape_string());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix from_rows(const std::vector<Vec>& rows) {
    if (rows.empty()) return {};
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != m.cols_) throw ShapeError("Matrix::from_rows: ragged rows");
      std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  const Vec& data() const { return data_; }

  std::string shape_string() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vec data_;
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + a.shape_string() + " by " + b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot: length " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("squared_distance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

/// Solves (A + ridge*I) x = B for symmetric positive (semi)definite A via Cholesky.
/// B may hold several right-hand sides as columns.
inline Matrix solve_spd(Matrix a, Matrix b, double ridge = 0.0) {
  const std::size_t n = a.rows();
  if (a.cols() != n || b.rows() != n) {
    throw ShapeError("solve_spd: " + a.shape_string() + " with rhs " + b.shape_string());
  }
  for (std::size_t i = 0; i < n; ++i) a(i, i) += ridge;
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
    if (!(d > 0.0)) throw NumericError("solve_spd: matrix is not positive definite");
    const double ljj = std::sqrt(d);
    a(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
      a(i, j) = s / ljj;
    }
  }
  for (std::size_t c = 0; c < b.cols(); ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = b(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= a(i, k) * b(k, c);
      b(i, c) = s / a(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double s = b(ii, c);
      for (std::size_t k = ii + 1; k < n; ++k) s -= a(k, ii) * b(k, c);
      b(ii, c) = s / a(ii, ii);
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { identity, tanh, relu, softplus };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::softplus: return "softplus";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "softplus") return Activation::softplus;
  throw DomainError("unknown activation '" + s + "'");
}

inline double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::tanh: return std::tanh(x);
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::softplus: {
      // Strictly positive even where log1p(exp(x)) underflows.
      const double y = softplus(x);
      return y > 0.0 ? y : std::numeric_limits<double>::min();
    }
  }
  return x;
}

/// Derivative with respect to the pre-activation; `y` is the activated value.
inline double activate_grad(Activation a, double pre, double y) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::tanh: return 1.0 - y * y;
    case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
    case Activation::softplus: return sigmoid(pre);
  }
  return 1.0;
}

// ---------------------------------------------------------------------------
// Dense layer

struct DenseLayer {
  Matrix weights;  // out x in
  Vec bias;        // out
  Activation activation = Activation::identity;

  DenseLayer() = default;
  DenseLayer(std::size_t in, std::size_t out, Activation act)
      : weights(out, in), bias(out, 0.0), activation(act) {}

  std::size_t in() const { return weights.cols(); }
  std::size_t out() const { return weights.rows(); }
  std::size_t parameter_count() const { return weights.size() + bias.size(); }

  bool operator==(const DenseLayer&) const = default;
};

/// Pre-activations and inputs saved by a forward pass. Rows are independent samples.
struct LayerCache {
  const DenseLayer* layer = nullptr;
  Matrix input;  // n x in
  Matrix pre;    // n x out
  Matrix out;    // n x out
};

struct LayerGrads {
  Matrix weights;
  Vec bias;

  LayerGrads() = default;
  explicit LayerGrads(const DenseLayer& l) : weights(l.out(), l.in()), bias(l.out(), 0.0) {}
};

/// Batched forward: every row of `x` is one input vector.
inline LayerCache layer_forward_rows(const DenseLayer& layer, Matrix x) {
  if (x.cols() != layer.in()) {
    throw ShapeError("layer_forward: input " + x.shape_string() + " but layer expects " +
                     std::to_string(layer.in()) + " columns (weights " +
                     layer.weights.shape_string() + ")");
  }
  LayerCache c;
  c.layer = &layer;
  c.pre = Matrix(x.rows(), layer.out());
  c.out = Matrix(x.rows(), layer.out());
  for (std::size_t n = 0; n < x.rows(); ++n) {
    auto xr = x.row(n);
    auto pr = c.pre.row(n);
    auto yr = c.out.row(n);
    for (std::size_t o = 0; o < layer.out(); ++o) {
      const double p = dot(layer.weights.row(o), xr) + layer.bias[o];
      pr[o] = p;
      yr[o] = activate(layer.activation, p);
    }
  }
  c.input = std::move(x);
  return c;
}

inline std::pair<Vec, LayerCache> layer_forward(const DenseLayer& layer, std::span<const double> x) {
  auto cache = layer_forward_rows(layer, Matrix(1, x.size(), Vec(x.begin(), x.end())));
  Vec y(cache.out.row(0).begin(), cache.out.row(0).end());
  return {std::move(y), std::move(cache)};
}

/// Accumulates parameter gradients into (`gw`, `gb`) and returns the input gradient (n x in).
inline Matrix layer_backward_rows(const DenseLayer& layer, const LayerCache& cache, const Matrix& upstream,
                                  Matrix& gw, Vec& gb) {
  if (cache.layer != &layer || cache.input.cols() != layer.in() || cache.pre.cols() != layer.out()) {
    throw ContractError("layer_backward: cache was not produced by this layer");
  }
  if (upstream.rows() != cache.pre.rows() || upstream.cols() != layer.out()) {
    throw ShapeError("layer_backward: upstream " + upstream.shape_string() + " vs output " +
                     cache.pre.shape_string());
  }
  if (gw.rows() != layer.out() || gw.cols() != layer.in() || gb.size() != layer.out()) {
    throw ShapeError("layer_backward: gradient buffer does not mirror layer shape");
  }
  Matrix dx(cache.input.rows(), layer.in());
  for (std::size_t n = 0; n < cache.input.rows(); ++n) {
    auto pr = cache.pre.row(n);
    auto yr = cache.out.row(n);
    auto ur = upstream.row(n);
    auto xr = cache.input.row(n);
    auto dxr = dx.row(n);
    for (std::size_t o = 0; o < layer.out(); ++o) {
      const double g = ur[o] * activate_grad(layer.activation, pr[o], yr[o]);
      if (g == 0.0) continue;
      gb[o] += g;
      auto gwr = gw.row(o);
      auto w = layer.weights.row(o);
      for (std::size_t i = 0; i < layer.in(); ++i) {
        gwr[i] += g * xr[i];
        dxr[i] += g * w[i];
      }
    }
  }
  return dx;
}

inline Matrix layer_backward_rows(const DenseLayer& layer, const LayerCache& cache, const Matrix& upstream,
                                  LayerGrads& grads) {
  return layer_backward_rows(layer, cache, upstream, grads.weights, grads.bias);
}

/// Same, with gradients accumulated into a layer-shaped buffer.
inline Matrix layer_backward_rows(const DenseLayer& layer, const LayerCache& cache, const Matrix& upstream,
                                  DenseLayer& grads) {
  return layer_backward_rows(layer, cache, upstream, grads.weights, grads.bias);
}

inline std::pair<Vec, LayerGrads> layer_backward(const DenseLayer& layer, const LayerCache& cache,
                                                 std::span<const double> upstream) {
  LayerGrads grads(layer);
  Matrix up(1, upstream.size(), Vec(upstream.begin(), upstream.end()));
  Matrix dx = layer_backward_rows(layer, cache, up, grads);
  return {Vec(dx.row(0).begin(), dx.row(0).end()), std::move(grads)};
}

// ---------------------------------------------------------------------------
// Parameter sets
//
// A parameter set is any type exposing
//   template <class F> void visit(F&& f)        -> f(name, std::span<double>)
//   template <class F> void visit(F&& f) const  -> f(name, std::span<const double>)
// The visit order defines the flattened layout used by optimizers, gradient
// tapes and checkpoints.

inline void visit_layer(const std::string& prefix, DenseLayer& l, auto&& f) {
  f(prefix + ".weight", l.weights.flat());
  f(prefix + ".bias", std::span<double>(l.bias));
}

inline void visit_layer(const std::string& prefix, const DenseLayer& l, auto&& f) {
  f(prefix + ".weight", l.weights.flat());
  f(prefix + ".bias", std::span<const double>(l.bias));
}

template <class P>
std::size_t parameter_count(const P& p) {
  std::size_t n = 0;
  p.visit([&](const std::string&, std::span<const double> s) { n += s.size(); });
  return n;
}

template <class P>
Vec flatten(const P& p) {
  Vec out;
  p.visit([&](const std::string&, std::span<const double> s) { out.insert(out.end(), s.begin(), s.end()); });
  return out;
}

template <class P>
void unflatten(P& p, std::span<const double> flat) {
  std::size_t off = 0;
  p.visit([&](const std::string& name, std::span<double> s) {
    if (off + s.size() > flat.size()) throw ShapeError("unflatten: too few values for " + name);
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), s.size(), s.begin());
    off += s.size();
  });
  if (off != flat.size()) throw ShapeError("unflatten: trailing values");
}

template <class P>
void zero_fill(P& p) {
  p.visit([](const std::string&, std::span<double> s) { std::fill(s.begin(), s.end(), 0.0); });
}

/// Gradient buffers shaped exactly like a parameter set.
template <class P>
struct GradientTape {
  P grads;

  explicit GradientTape(const P& params) : grads(params) { zero(); }
  void zero() { zero_fill(grads); }
};

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Vec m;
  Vec v;
  long step = 0;
};

template <class P>
AdamState make_adam_state(const P& params) {
  const auto n = parameter_count(params);
  return AdamState{Vec(n, 0.0), Vec(n, 0.0), 0};
}

/// One Adam update. Entries of `frozen` (by parameter name prefix) are left untouched.
template <class P>
void adam_update(P& params, const P& grads, AdamState& state, const AdamConfig& cfg,
                 const std::function<bool(const std::string&)>& trainable = {}) {
  Vec g = flatten(grads);
  if (state.m.size() != g.size()) throw ShapeError("adam_update: optimizer state does not match parameters");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  std::size_t off = 0;
  params.visit([&](const std::string& name, std::span<double> s) {
    const bool train = !trainable || trainable(name);
    for (std::size_t i = 0; i < s.size(); ++i, ++off) {
      if (!train) continue;
      state.m[off] = cfg.beta1 * state.m[off] + (1.0 - cfg.beta1) * g[off];
      state.v[off] = cfg.beta2 * state.v[off] + (1.0 - cfg.beta2) * g[off] * g[off];
      const double mhat = state.m[off] / bc1;
      const double vhat = state.v[off] / bc2;
      s[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares `analytic` against central differences of `f` at the given
/// coordinates of `x`. `f` must be deterministic in `x`.
/// Gradients smaller than 1e-6 in magnitude are judged against that floor,
/// since central-difference roundoff is about eps * |f| / h there.
inline GradCheckResult grad_check(const std::function<double(std::span<const double>)>& f, Vec x,
                                  std::span<const double> analytic,
                                  std::span<const std::size_t> coords, double h = 1e-5) {
  if (analytic.size() != x.size()) throw ShapeError("grad_check: gradient length mismatch");
  GradCheckResult r;
  for (std::size_t idx : coords) {
    if (idx >= x.size()) throw ShapeError("grad_check: coordinate out of range");
    const double orig = x[idx];
    x[idx] = orig + h;
    const double fp = f(x);
    x[idx] = orig - h;
    const double fm = f(x);
    x[idx] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("grad_check: non-finite loss at coordinate " + std::to_string(idx));
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[idx];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    const double rel = std::abs(a - numeric) / denom;
    ++r.checked;
    if (rel > r.max_relative_error) {
      r.max_relative_error = rel;
      r.worst_index = idx;
      r.worst_analytic = a;
      r.worst_numeric = numeric;
    }
  }
  return r;
}

inline GradCheckResult grad_check(const std::function<double(std::span<const double>)>& f, Vec x,
                                  std::span<const double> analytic, double h = 1e-5) {
  std::vector<std::size_t> all(x.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return grad_check(f, std::move(x), analytic, all, h);
}

}  // namespace spkprof
