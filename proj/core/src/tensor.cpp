#include "psdepth/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace psd {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<double> values) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  return node;
}

[[noreturn]] void shape_fail(const std::string& op, const std::string& detail) {
  throw ShapeError(op + ": " + detail);
}

void check_rank(const std::string& op, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    shape_fail(op, "expected rank " + std::to_string(rank) + " tensor, got shape " +
                       shape_str(x.shape()));
  }
}

void check_axis(const std::string& op, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    shape_fail(op, "axis " + std::to_string(axis) + " out of range for shape " +
                       shape_str(x.shape()));
  }
}

// Lane decomposition for axis-wise ops: index = (o*len + k)*inner + i.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.len = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

enum class Broadcast { same, scalar_lhs, scalar_rhs, row_rhs };

Broadcast classify_broadcast(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.size() == 1) return Broadcast::scalar_rhs;
  if (a.size() == 1) return Broadcast::scalar_lhs;
  if (b.rank() == 1 && !a.shape().empty() && b.size() == a.shape().back())
    return Broadcast::row_rhs;
  shape_fail(op, "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not broadcast");
}

// Builds the op-output node. Parents are recorded (and a backward recorded)
// only when gradient can flow.
Tensor finish_op(std::vector<double> values, Shape shape,
                 std::vector<Tensor> inputs,
                 std::function<void(TensorNode&)> backward_fn) {
  auto node = make_node(std::move(shape), std::move(values));
  bool needs_grad = false;
  for (const Tensor& t : inputs) needs_grad = needs_grad || t.requires_grad();
  if (needs_grad) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor::wrap(std::move(node));
}

using BinaryFn = double (*)(double, double);
using BinaryGrad = void (*)(double a, double b, double dy, double& da, double& db);

Tensor binary_op(const std::string& op, const Tensor& a, const Tensor& b,
                 BinaryFn f, BinaryGrad g) {
  const Broadcast mode = classify_broadcast(op, a, b);
  const Shape& out_shape = (mode == Broadcast::scalar_lhs) ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  const std::size_t last = out_shape.empty() ? 1 : out_shape.back();

  auto index_a = [&](std::size_t i) { return mode == Broadcast::scalar_lhs ? 0 : i; };
  auto index_b = [&](std::size_t i) -> std::size_t {
    switch (mode) {
      case Broadcast::same: return i;
      case Broadcast::scalar_lhs: return i;
      case Broadcast::scalar_rhs: return 0;
      case Broadcast::row_rhs: return i % last;
    }
    return i;
  };

  std::vector<double> out(n);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[index_a(i)], bv[index_b(i)]);

  auto backward = [mode, last, g](TensorNode& self) {
    TensorNode& pa = *self.parents[0];
    TensorNode& pb = *self.parents[1];
    const bool wa = pa.requires_grad;
    const bool wb = pb.requires_grad;
    if (wa) pa.ensure_grad();
    if (wb) pb.ensure_grad();
    const std::size_t n = self.values.size();
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t ia = (mode == Broadcast::scalar_lhs) ? 0 : i;
      std::size_t ib = i;
      if (mode == Broadcast::scalar_rhs) ib = 0;
      else if (mode == Broadcast::row_rhs) ib = i % last;
      double da = 0.0, db = 0.0;
      g(pa.values[ia], pb.values[ib], self.grad[i], da, db);
      if (wa) pa.grad[ia] += da;
      if (wb) pb.grad[ib] += db;
    }
  };

  return finish_op(std::move(out), out_shape, {a, b}, backward);
}

using UnaryFn = double (*)(double);
using UnaryGrad = double (*)(double x, double y);  // dy/dx from input and output

Tensor unary_op(const Tensor& x, UnaryFn f, UnaryGrad g) {
  const std::size_t n = x.size();
  std::vector<double> out(n);
  const auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(xv[i]);

  auto backward = [g](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < self.values.size(); ++i) {
      p.grad[i] += self.grad[i] * g(p.values[i], self.values[i]);
    }
  };
  return finish_op(std::move(out), x.shape(), {x}, backward);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

double pairwise_sum(std::span<const double> xs) {
  const std::size_t n = xs.size();
  if (n <= 8) {
    double s = 0.0;
    for (double v : xs) s += v;
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

void TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
}

void TensorNode::accumulate_grad(std::span<const double> g) {
  ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " expects " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto node = make_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from(std::move(shape), std::vector<double>(shape_numel(shape), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  return from(std::move(shape), std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("Tensor::item: expected a single element, got shape " + shape_str(shape()));
  }
  return node_->values[0];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!node_->is_leaf()) {
    throw NumericError("set_requires_grad: only leaf tensors can change grad tracking");
  }
  node_->requires_grad = flag;
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (node_->grad.empty()) {
    static const std::vector<double> empty;
    return empty;
  }
  return node_->grad;
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

std::vector<double>& Tensor::raw_values() {
  if (!node_->is_leaf()) {
    throw NumericError("raw_values: in-place mutation is limited to leaf tensors");
  }
  return node_->values;
}

Tensor Tensor::wrap(std::shared_ptr<TensorNode> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double dy, double& da, double& db) {
        da = dy;
        db = dy;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double dy, double& da, double& db) {
        da = dy;
        db = -dy;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double dy, double& da, double& db) {
        da = dy * y;
        db = dy * x;
      });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  return binary_op(
      "divide", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double dy, double& da, double& db) {
        da = dy / y;
        db = -dy * x / (y * y);
      });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& x, double c) {
  const std::size_t n = x.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.value_at(i) * c;
  auto backward = [c](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.values.size(); ++i) p.grad[i] += self.grad[i] * c;
  };
  return finish_op(std::move(out), x.shape(), {x}, backward);
}

Tensor add_const(const Tensor& x, double c) {
  const std::size_t n = x.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.value_at(i) + c;
  auto backward = [](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.values.size(); ++i) p.grad[i] += self.grad[i];
  };
  return finish_op(std::move(out), x.shape(), {x}, backward);
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor atan(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::atan(v); },
      [](double v, double) { return 1.0 / (1.0 + v * v); });
}

Tensor acos(const Tensor& x) {
  // Inputs a hair outside [-1,1] from rounding are clamped; the derivative is
  // evaluated at the clamped point.
  return unary_op(
      x,
      [](double v) { return std::acos(std::clamp(v, -1.0, 1.0)); },
      [](double v, double) {
        double c = std::clamp(v, -1.0, 1.0);
        return -1.0 / std::sqrt(std::max(1.0 - c * c, 1e-300));
      });
}

Tensor gelu(const Tensor& x) {
  return unary_op(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) +
               v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      });
}

Tensor square(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank("matmul", a, 2);
  check_rank("matmul", b, 2);
  const std::size_t n = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], m = b.shape()[1];
  if (k != k2) {
    shape_fail("matmul", "incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = &bv[p * m];
      double* orow = &out[i * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }

  auto backward = [n, k, m](TensorNode& self) {
    TensorNode& pa = *self.parents[0];
    TensorNode& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      // dA = dY * B^T
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* dy = &self.grad[i * m];
          const double* brow = &pb.values[p * m];
          for (std::size_t j = 0; j < m; ++j) acc += dy[j] * brow[j];
          pa.grad[i * k + p] += acc;
        }
      }
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      // dB = A^T * dY
      for (std::size_t p = 0; p < k; ++p) {
        for (std::size_t i = 0; i < n; ++i) {
          const double aip = pa.values[i * k + p];
          const double* dy = &self.grad[i * m];
          double* dbrow = &pb.grad[p * m];
          for (std::size_t j = 0; j < m; ++j) dbrow[j] += aip * dy[j];
        }
      }
    }
  };
  return finish_op(std::move(out), {n, m}, {a, b}, backward);
}

Tensor transpose(const Tensor& x) {
  check_rank("transpose", x, 2);
  const std::size_t n = x.shape()[0], m = x.shape()[1];
  std::vector<double> out(n * m);
  const auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = xv[i * m + j];

  auto backward = [n, m](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) p.grad[i * m + j] += self.grad[j * n + i];
  };
  return finish_op(std::move(out), {m, n}, {x}, backward);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    shape_fail("reshape", "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  auto backward = [](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.accumulate_grad(self.grad);
  };
  return finish_op(std::move(out), std::move(shape), {x}, backward);
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& x) {
  std::vector<double> out = {pairwise_sum(x.values())};
  auto backward = [](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    const double dy = self.grad[0];
    for (double& g : p.grad) g += dy;
  };
  return finish_op(std::move(out), {1}, {x}, backward);
}

Tensor mean(const Tensor& x) {
  const double inv_n = 1.0 / static_cast<double>(x.size());
  std::vector<double> out = {pairwise_sum(x.values()) * inv_n};
  auto backward = [inv_n](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    const double dy = self.grad[0] * inv_n;
    for (double& g : p.grad) g += dy;
  };
  return finish_op(std::move(out), {1}, {x}, backward);
}

namespace {

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t d = 0; d < shape.size(); ++d)
    if (d != axis) out.push_back(shape[d]);
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  check_axis("mean_axis", x, axis);
  const AxisSplit s = split_axis(x.shape(), axis);
  const double inv = 1.0 / static_cast<double>(s.len);
  std::vector<double> out(s.outer * s.inner);
  std::vector<double> lane(s.len);
  const auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      for (std::size_t k = 0; k < s.len; ++k) lane[k] = xv[(o * s.len + k) * s.inner + i];
      out[o * s.inner + i] = pairwise_sum(lane) * inv;
    }
  }
  auto backward = [s, inv](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const double dy = self.grad[o * s.inner + i] * inv;
        for (std::size_t k = 0; k < s.len; ++k) p.grad[(o * s.len + k) * s.inner + i] += dy;
      }
  };
  return finish_op(std::move(out), drop_axis(x.shape(), axis), {x}, backward);
}

Tensor var_axis(const Tensor& x, std::size_t axis) {
  check_axis("var_axis", x, axis);
  const AxisSplit s = split_axis(x.shape(), axis);
  const double inv = 1.0 / static_cast<double>(s.len);
  std::vector<double> out(s.outer * s.inner);
  std::vector<double> means(s.outer * s.inner);
  std::vector<double> lane(s.len);
  const auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      for (std::size_t k = 0; k < s.len; ++k) lane[k] = xv[(o * s.len + k) * s.inner + i];
      const double m = pairwise_sum(lane) * inv;
      for (std::size_t k = 0; k < s.len; ++k) {
        const double d = lane[k] - m;
        lane[k] = d * d;
      }
      means[o * s.inner + i] = m;
      out[o * s.inner + i] = pairwise_sum(lane) * inv;
    }
  }
  auto backward = [s, inv, means](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const double m = means[o * s.inner + i];
        const double dy = self.grad[o * s.inner + i];
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t idx = (o * s.len + k) * s.inner + i;
          p.grad[idx] += dy * 2.0 * (p.values[idx] - m) * inv;
        }
      }
  };
  return finish_op(std::move(out), drop_axis(x.shape(), axis), {x}, backward);
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  check_axis("softmax", x, axis);
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<double> out(x.size());
  std::vector<double> lane(s.len);
  const auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double mx = -HUGE_VAL;
      for (std::size_t k = 0; k < s.len; ++k)
        mx = std::max(mx, xv[(o * s.len + k) * s.inner + i]);
      for (std::size_t k = 0; k < s.len; ++k)
        lane[k] = std::exp(xv[(o * s.len + k) * s.inner + i] - mx);
      const double z = pairwise_sum(lane);
      for (std::size_t k = 0; k < s.len; ++k)
        out[(o * s.len + k) * s.inner + i] = lane[k] / z;
    }
  }
  auto backward = [s](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    std::vector<double> lane(s.len);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t idx = (o * s.len + k) * s.inner + i;
          lane[k] = self.grad[idx] * self.values[idx];
        }
        const double dot = pairwise_sum(lane);
        for (std::size_t k = 0; k < s.len; ++k) {
          const std::size_t idx = (o * s.len + k) * s.inner + i;
          p.grad[idx] += self.values[idx] * (self.grad[idx] - dot);
        }
      }
  };
  return finish_op(std::move(out), x.shape(), {x}, backward);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() < 1) shape_fail("layer_norm", "input must have rank >= 1");
  const std::size_t c = x.shape().back();
  if (gain.rank() != 1 || gain.size() != c || bias.rank() != 1 || bias.size() != c) {
    shape_fail("layer_norm", "gain/bias must be rank-1 of extent " + std::to_string(c) +
                                 ", got " + shape_str(gain.shape()) + " and " +
                                 shape_str(bias.shape()));
  }
  const std::size_t rows = x.size() / c;
  std::vector<double> out(x.size());
  std::vector<double> mu(rows), sigma(rows);
  std::vector<double> lane(c);
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &xv[r * c];
    for (std::size_t j = 0; j < c; ++j) lane[j] = row[j];
    const double m = pairwise_sum(lane) / static_cast<double>(c);
    for (std::size_t j = 0; j < c; ++j) {
      const double d = row[j] - m;
      lane[j] = d * d;
    }
    const double v = pairwise_sum(lane) / static_cast<double>(c);
    const double sd = std::sqrt(v + eps);
    mu[r] = m;
    sigma[r] = sd;
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = (row[j] - m) / sd * gv[j] + bv[j];
  }

  auto backward = [c, rows, mu, sigma](TensorNode& self) {
    TensorNode& px = *self.parents[0];
    TensorNode& pg = *self.parents[1];
    TensorNode& pb = *self.parents[2];
    if (px.requires_grad) px.ensure_grad();
    if (pg.requires_grad) pg.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    std::vector<double> ghat(c), xhat(c), prod(c);
    for (std::size_t r = 0; r < rows; ++r) {
      const double m = mu[r], sd = sigma[r];
      for (std::size_t j = 0; j < c; ++j) {
        xhat[j] = (px.values[r * c + j] - m) / sd;
        ghat[j] = self.grad[r * c + j] * pg.values[j];
        prod[j] = ghat[j] * xhat[j];
      }
      if (px.requires_grad) {
        const double mean_g = pairwise_sum(ghat) / static_cast<double>(c);
        const double mean_gx = pairwise_sum(prod) / static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) {
          px.grad[r * c + j] += (ghat[j] - mean_g - xhat[j] * mean_gx) / sd;
        }
      }
      if (pg.requires_grad) {
        for (std::size_t j = 0; j < c; ++j) pg.grad[j] += self.grad[r * c + j] * xhat[j];
      }
      if (pb.requires_grad) {
        for (std::size_t j = 0; j < c; ++j) pb.grad[j] += self.grad[r * c + j];
      }
    }
  };
  return finish_op(std::move(out), x.shape(), {x, gain, bias}, backward);
}

// ---- structural -------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  const Shape& base = parts[0].shape();
  if (axis >= base.size()) {
    shape_fail("concat", "axis " + std::to_string(axis) + " out of range for shape " +
                             shape_str(base));
  }
  std::size_t total = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != base.size()) {
      shape_fail("concat", "rank mismatch: " + shape_str(base) + " vs " + shape_str(t.shape()));
    }
    for (std::size_t d = 0; d < base.size(); ++d) {
      if (d != axis && t.shape()[d] != base[d]) {
        shape_fail("concat",
                   "extent mismatch: " + shape_str(base) + " vs " + shape_str(t.shape()));
      }
    }
    total += t.shape()[axis];
  }
  Shape out_shape = base;
  out_shape[axis] = total;

  const AxisSplit so = split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& t : parts) {
    offsets.push_back(off);
    const std::size_t len = t.shape()[axis];
    const auto tv = t.values();
    for (std::size_t o = 0; o < so.outer; ++o)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t i = 0; i < so.inner; ++i)
          out[(o * so.len + off + k) * so.inner + i] = tv[(o * len + k) * so.inner + i];
    off += len;
  }

  auto backward = [so, offsets](TensorNode& self) {
    for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
      TensorNode& p = *self.parents[pi];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      const std::size_t len = p.values.size() / (so.outer * so.inner);
      const std::size_t off = offsets[pi];
      for (std::size_t o = 0; o < so.outer; ++o)
        for (std::size_t k = 0; k < len; ++k)
          for (std::size_t i = 0; i < so.inner; ++i)
            p.grad[(o * len + k) * so.inner + i] +=
                self.grad[(o * so.len + off + k) * so.inner + i];
    }
  };
  return finish_op(std::move(out), out_shape, parts, backward);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  check_axis("slice", x, axis);
  if (start + len > x.shape()[axis]) {
    shape_fail("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                            ") exceeds axis extent " + std::to_string(x.shape()[axis]));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  std::vector<double> out(shape_numel(out_shape));
  const auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[(o * len + k) * s.inner + i] = xv[(o * s.len + start + k) * s.inner + i];

  auto backward = [s, start, len](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t i = 0; i < s.inner; ++i)
          p.grad[(o * s.len + start + k) * s.inner + i] += self.grad[(o * len + k) * s.inner + i];
  };
  return finish_op(std::move(out), out_shape, {x}, backward);
}

Tensor norm_l1(const Tensor& x) {
  std::vector<double> mags(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) mags[i] = std::abs(x.value_at(i));
  std::vector<double> out = {pairwise_sum(mags)};
  auto backward = [](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    const double dy = self.grad[0];
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      const double v = p.values[i];
      p.grad[i] += dy * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
    }
  };
  return finish_op(std::move(out), {1}, {x}, backward);
}

Tensor norm_l2(const Tensor& x) {
  std::vector<double> sq(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) sq[i] = x.value_at(i) * x.value_at(i);
  const double n2 = std::sqrt(pairwise_sum(sq));
  std::vector<double> out = {n2};
  auto backward = [](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    const double y = self.values[0];
    if (y == 0.0) return;  // subgradient 0 at the origin
    const double dy = self.grad[0] / y;
    for (std::size_t i = 0; i < p.values.size(); ++i) p.grad[i] += dy * p.values[i];
  };
  return finish_op(std::move(out), {1}, {x}, backward);
}

// ---- spatial ----------------------------------------------------------------

std::size_t SampleGrid::valid_count() const {
  std::size_t n = 0;
  for (std::uint8_t v : valid) n += (v != 0);
  return n;
}

namespace {

struct Corner {
  std::size_t idx;
  double w;
};

// Bilinear footprint of a center-based coordinate in a (h,w) map with edge
// clamping. Returns false when the coordinate lies outside [0,w]x[0,h].
bool bilinear_footprint(double x, double y, std::size_t w, std::size_t h, Corner out[4]) {
  if (!(x >= 0.0 && x <= static_cast<double>(w) && y >= 0.0 && y <= static_cast<double>(h)))
    return false;
  const double u = x - 0.5;
  const double v = y - 0.5;
  const double fu = std::floor(u);
  const double fv = std::floor(v);
  const double wx1 = u - fu, wx0 = 1.0 - wx1;
  const double wy1 = v - fv, wy0 = 1.0 - wy1;
  const std::int64_t iw = static_cast<std::int64_t>(w) - 1;
  const std::int64_t ih = static_cast<std::int64_t>(h) - 1;
  const std::size_t x0 = static_cast<std::size_t>(std::clamp<std::int64_t>((std::int64_t)fu, 0, iw));
  const std::size_t x1 = static_cast<std::size_t>(std::clamp<std::int64_t>((std::int64_t)fu + 1, 0, iw));
  const std::size_t y0 = static_cast<std::size_t>(std::clamp<std::int64_t>((std::int64_t)fv, 0, ih));
  const std::size_t y1 = static_cast<std::size_t>(std::clamp<std::int64_t>((std::int64_t)fv + 1, 0, ih));
  out[0] = {y0 * w + x0, wy0 * wx0};
  out[1] = {y0 * w + x1, wy0 * wx1};
  out[2] = {y1 * w + x0, wy1 * wx0};
  out[3] = {y1 * w + x1, wy1 * wx1};
  return true;
}

}  // namespace

Tensor grid_sample_bilinear(const Tensor& src, const SampleGrid& grid) {
  check_rank("grid_sample_bilinear", src, 3);
  if (grid.x.size() != grid.width * grid.height || grid.y.size() != grid.x.size() ||
      grid.valid.size() != grid.x.size()) {
    shape_fail("grid_sample_bilinear", "inconsistent grid buffers");
  }
  const std::size_t h = src.shape()[0], w = src.shape()[1], c = src.shape()[2];
  std::vector<double> out(grid.height * grid.width * c, 0.0);
  const auto sv = src.values();
  Corner corners[4];
  for (std::size_t g = 0; g < grid.size(); ++g) {
    if (!grid.valid[g]) continue;
    if (!bilinear_footprint(grid.x[g], grid.y[g], w, h, corners)) continue;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (const Corner& cr : corners) acc += cr.w * sv[cr.idx * c + ch];
      out[g * c + ch] = acc;
    }
  }

  auto backward = [grid, w, h, c](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    Corner corners[4];
    for (std::size_t g = 0; g < grid.size(); ++g) {
      if (!grid.valid[g]) continue;
      if (!bilinear_footprint(grid.x[g], grid.y[g], w, h, corners)) continue;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double dy = self.grad[g * c + ch];
        for (const Corner& cr : corners) p.grad[cr.idx * c + ch] += cr.w * dy;
      }
    }
  };
  return finish_op(std::move(out), {grid.height, grid.width, c}, {src}, backward);
}

Tensor upsample2x_nearest(const Tensor& x) {
  check_rank("upsample2x_nearest", x, 3);
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  std::vector<double> out(4 * h * w * c);
  const auto xv = x.values();
  for (std::size_t y = 0; y < 2 * h; ++y)
    for (std::size_t xx = 0; xx < 2 * w; ++xx)
      for (std::size_t ch = 0; ch < c; ++ch)
        out[(y * 2 * w + xx) * c + ch] = xv[((y / 2) * w + xx / 2) * c + ch];

  auto backward = [h, w, c](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        for (std::size_t ch = 0; ch < c; ++ch)
          p.grad[((y / 2) * w + xx / 2) * c + ch] += self.grad[(y * 2 * w + xx) * c + ch];
  };
  return finish_op(std::move(out), {2 * h, 2 * w, c}, {x}, backward);
}

Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  check_rank("resize_bilinear", x, 3);
  if (out_h == 0 || out_w == 0) shape_fail("resize_bilinear", "output extents must be >= 1");
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  std::vector<double> out(out_h * out_w * c, 0.0);
  const auto xv = x.values();
  Corner corners[4];
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t xx = 0; xx < out_w; ++xx) {
      bilinear_footprint((static_cast<double>(xx) + 0.5) * sx,
                         (static_cast<double>(y) + 0.5) * sy, w, h, corners);
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (const Corner& cr : corners) acc += cr.w * xv[cr.idx * c + ch];
        out[(y * out_w + xx) * c + ch] = acc;
      }
    }
  }
  auto backward = [out_h, out_w, h, w, c, sx, sy](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    p.ensure_grad();
    Corner corners[4];
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        bilinear_footprint((static_cast<double>(xx) + 0.5) * sx,
                           (static_cast<double>(y) + 0.5) * sy, w, h, corners);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double dy = self.grad[(y * out_w + xx) * c + ch];
          for (const Corner& cr : corners) p.grad[cr.idx * c + ch] += cr.w * dy;
        }
      }
  };
  return finish_op(std::move(out), {out_h, out_w, c}, {x}, backward);
}

Tensor upsample2x_bilinear(const Tensor& x) {
  check_rank("upsample2x_bilinear", x, 3);
  return resize_bilinear(x, 2 * x.shape()[0], 2 * x.shape()[1]);
}

Tensor depthwise_conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  check_rank("depthwise_conv3x3", x, 3);
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  if (weight.shape() != Shape{c, 3, 3} || bias.shape() != Shape{c}) {
    shape_fail("depthwise_conv3x3", "weight must be (" + std::to_string(c) +
                                        ",3,3) and bias (" + std::to_string(c) + "), got " +
                                        shape_str(weight.shape()) + " / " +
                                        shape_str(bias.shape()));
  }
  std::vector<double> out(h * w * c);
  const auto xv = x.values();
  const auto wv = weight.values();
  const auto bv = bias.values();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t xx = 0; xx < w; ++xx) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = bv[ch];
        for (int dy = -1; dy <= 1; ++dy) {
          const std::int64_t yy = static_cast<std::int64_t>(y) + dy;
          if (yy < 0 || yy >= static_cast<std::int64_t>(h)) continue;
          for (int dx = -1; dx <= 1; ++dx) {
            const std::int64_t xs = static_cast<std::int64_t>(xx) + dx;
            if (xs < 0 || xs >= static_cast<std::int64_t>(w)) continue;
            acc += wv[(ch * 3 + (dy + 1)) * 3 + (dx + 1)] *
                   xv[(static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xs)) * c + ch];
          }
        }
        out[(y * w + xx) * c + ch] = acc;
      }
    }
  }

  auto backward = [h, w, c](TensorNode& self) {
    TensorNode& px = *self.parents[0];
    TensorNode& pw = *self.parents[1];
    TensorNode& pb = *self.parents[2];
    if (px.requires_grad) px.ensure_grad();
    if (pw.requires_grad) pw.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double dy_out = self.grad[(y * w + xx) * c + ch];
          if (pb.requires_grad) pb.grad[ch] += dy_out;
          for (int dy = -1; dy <= 1; ++dy) {
            const std::int64_t yy = static_cast<std::int64_t>(y) + dy;
            if (yy < 0 || yy >= static_cast<std::int64_t>(h)) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              const std::int64_t xs = static_cast<std::int64_t>(xx) + dx;
              if (xs < 0 || xs >= static_cast<std::int64_t>(w)) continue;
              const std::size_t xidx =
                  (static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xs)) * c + ch;
              const std::size_t widx = (ch * 3 + (dy + 1)) * 3 + (dx + 1);
              if (px.requires_grad) px.grad[xidx] += pw.values[widx] * dy_out;
              if (pw.requires_grad) pw.grad[widx] += px.values[xidx] * dy_out;
            }
          }
        }
      }
    }
  };
  return finish_op(std::move(out), {h, w, c}, {x, weight, bias}, backward);
}

Tensor detach(const Tensor& x) {
  return Tensor::from(x.shape(), std::vector<double>(x.values().begin(), x.values().end()),
                      false);
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw NumericError("backward: loss must be scalar-shaped, got " + shape_str(loss.shape()));
  }
  TensorNode* root = loss.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS; the reversed finish order is a valid reverse
  // topological order.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    TensorNode* node;
    std::size_t next_child;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  visited.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_child < f.node->parents.size()) {
      TensorNode* child = f.node->parents[f.next_child++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (!node->backward_fn) continue;
    node->ensure_grad();
    node->backward_fn(*node);
  }
}

}  // namespace psd
