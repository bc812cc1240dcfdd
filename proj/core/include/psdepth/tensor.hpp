#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "psdepth/error.hpp"

namespace psd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Deterministic pairwise (cascade) summation; accumulation order is fixed
// regardless of how callers might partition work.
double pairwise_sum(std::span<const double> xs);

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated on first accumulation, same length as values
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Pulls this node's grad into the parents' grads. Only set on op outputs.
  std::function<void(TensorNode&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }
  void ensure_grad();
  void accumulate_grad(std::span<const double> g);
};

// Dense 64-bit real tensor participating in reverse-mode differentiation.
// Value-semantic handle; the underlying node is shared. Values are immutable
// after construction except through raw_values(), which is reserved for
// optimizer updates on leaf parameters between tape builds.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->values.size(); }

  std::span<const double> values() const { return node_->values; }
  double value_at(std::size_t i) const { return node_->values[i]; }
  // The single element of a scalar-shaped tensor.
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const;
  void zero_grad();

  // Leaf-only mutable access (optimizer updates).
  std::vector<double>& raw_values();

  const std::shared_ptr<TensorNode>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<TensorNode> node);

 private:
  std::shared_ptr<TensorNode> node_;
};

// ---- op suite -------------------------------------------------------------
// Binary elementwise ops broadcast in three cases: identical shapes, one
// operand scalar-shaped, or a rank-1 right operand matching the left's last
// extent (row broadcast). Anything else is a ShapeError naming the op.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double c);       // x * c
Tensor add_const(const Tensor& x, double c);   // x + c

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor atan(const Tensor& x);
Tensor acos(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor square(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);  // (n,k) x (k,m)
Tensor transpose(const Tensor& x);                // rank 2
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar
Tensor mean_axis(const Tensor& x, std::size_t axis);
Tensor var_axis(const Tensor& x, std::size_t axis);  // population (1/N)
Tensor softmax(const Tensor& x, std::size_t axis);
// Normalizes over the last axis; gain/bias are rank-1 of that extent.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len);

Tensor norm_l1(const Tensor& x);  // sum |x_i|
Tensor norm_l2(const Tensor& x);  // sqrt(sum x_i^2)

// Continuous sample locations for bilinear gathering from an (h,w,c) map.
// Coordinates are center-based: (0.5, 0.5) is the center of cell (0,0) and
// valid content spans [0,w] x [0,h]. Cells marked invalid, or whose location
// falls outside that box, produce zeros and receive no gradient.
struct SampleGrid {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> x;  // height*width, row-major
  std::vector<double> y;
  std::vector<std::uint8_t> valid;

  std::size_t size() const { return x.size(); }
  std::size_t valid_count() const;
};

// Gradients flow to the sampled values only; coordinates are constants.
Tensor grid_sample_bilinear(const Tensor& src, const SampleGrid& grid);

Tensor upsample2x_nearest(const Tensor& x);                                // (h,w,c) -> (2h,2w,c)
Tensor upsample2x_bilinear(const Tensor& x);                               // (h,w,c) -> (2h,2w,c)
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);

// 3x3 depthwise convolution with zero padding; weight (c,3,3), bias (c).
Tensor depthwise_conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Value-identical leaf that never receives gradient from the graph that
// produced its source.
Tensor detach(const Tensor& x);

// Reverse-mode sweep from a scalar loss. Visits reachable nodes in reverse
// topological order exactly once; fan-out gradients accumulate additively.
void backward(const Tensor& loss);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }

}  // namespace psd
