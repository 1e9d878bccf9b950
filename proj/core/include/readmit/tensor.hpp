#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "readmit/rng.hpp"

namespace readmit {

// Run-wide numeric mode. f64 is used by tests and gradient checks; training
// defaults to f32, which quantizes every stored value through float while
// computing in double. Gradients always accumulate in 64-bit.
enum class Precision { f64, f32 };

Precision precision();
void set_precision(Precision p);

// Scoped precision override, mostly for tests.
class PrecisionGuard {
 public:
  explicit PrecisionGuard(Precision p) : prev_(precision()) { set_precision(p); }
  ~PrecisionGuard() { set_precision(prev_); }
  PrecisionGuard(const PrecisionGuard&) = delete;
  PrecisionGuard& operator=(const PrecisionGuard&) = delete;

 private:
  Precision prev_;
};

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  // same length as values once anything has been accumulated; empty = absent
  std::vector<double> grad;

  void accumulate_grad(const std::vector<double>& g);
  std::vector<double>& ensure_grad();
};

// Dense row-major array with shape metadata. Value semantics over a shared
// node: copies alias the same storage. Values are immutable after creation
// except through values_mut(), which is reserved for optimizer updates and
// loaders between passes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);
  static Tensor gaussian(Shape shape, double mean, double stddev, Rng& rng,
                         bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const;
  std::int64_t extent(int axis) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  const std::vector<double>& values() const { return node_->values; }
  std::vector<double>& values_mut() { return node_->values; }

  // empty when no gradient has been accumulated
  const std::vector<double>& grad() const { return node_->grad; }
  std::vector<double>& grad_mut() { return node_->grad; }
  void zero_grad();

  double item() const;  // requires numel() == 1
  double at(std::initializer_list<std::int64_t> idx) const;

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<TensorNode> node_;

  friend Tensor make_tensor(Shape, std::vector<double>, bool);
};

// Records every executed op while alive on the constructing thread, in
// execution order (a valid topological order by construction). backward()
// replays the recorded gradient rules in reverse. One record is
// single-threaded by contract; distinct records may live on distinct threads.
class GradientTape {
 public:
  GradientTape();
  ~GradientTape();
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and pulls gradients back through every
  // recorded op. loss must be scalar. Grads accumulate (+=) so parameters
  // shared across ops collect contributions from every use.
  void backward(const Tensor& loss);

  std::size_t size() const { return steps_.size(); }

  static GradientTape* active();

  void record(const char* op, std::vector<std::shared_ptr<TensorNode>> inputs,
              std::shared_ptr<TensorNode> output, std::function<void()> pull);

 private:
  struct Step {
    const char* op;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::shared_ptr<TensorNode> output;
    std::function<void()> pull;
  };
  std::vector<Step> steps_;
};

// ---- operations ------------------------------------------------------
// Elementwise ops require equal shapes, except that the second operand may
// be a trailing suffix of the first (leading-batch expansion, e.g. a [d]
// bias added to [a,L,d]); its gradient sums over the expanded axes. Any
// other mismatch is a ShapeError.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

// 2D x 2D, [B..,m,k] x [k,n], [m,k] x [B..,k,n], or batched with equal
// leading extents. Gradient rules dA = dC.B^T, dB = A^T.dC per block.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Inverted dropout: keeps with probability 1-p and rescales by 1/(1-p).
// Callers invoke this only on the training path.
Tensor dropout(const Tensor& x, double p, Rng& rng);

Tensor reshape(const Tensor& x, Shape shape);
Tensor swap_axes(const Tensor& x, int axis_a, int axis_b);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len);

// [suffix...] -> [leading..., suffix...]; gradient sums over leading axes.
Tensor broadcast_leading(const Tensor& x, const Shape& leading);

// Reduces the axis away. Gradient is one-hot at the argmax; ties break to
// the lowest index.
Tensor max_along_axis(const Tensor& x, int axis);

// x: [a,L,d], mask: [a,L] of {0,1}. Masked positions are excluded via -inf
// substitution; every row needs at least one valid position.
Tensor masked_max_tokens(const Tensor& x, const Tensor& mask);

// Masked mean over the middle (time) axis; x: [a,l,d], mask: [a,l].
Tensor masked_mean_time(const Tensor& x, const Tensor& mask);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// Stable binary cross entropy on logits, mean over included positions.
// labels/include hold {0,1}; include may be undefined (all included).
// pos_weight scales the y=1 term.
Tensor bce_with_logits(const Tensor& logits, const Tensor& labels, const Tensor& include,
                       double pos_weight = 1.0);

}  // namespace readmit
