#include "readmit/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "readmit/errors.hpp"

namespace readmit {

namespace {

thread_local Precision g_precision = Precision::f64;
thread_local std::vector<GradientTape*> g_tapes;

double q(double v) {
  return g_precision == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

void quantize(std::vector<double>& v) {
  if (g_precision == Precision::f32)
    for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

using i64 = std::int64_t;

i64 prod(const Shape& s, int from, int to) {
  i64 p = 1;
  for (int i = from; i < to; ++i) p *= s[i];
  return p;
}

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<double> values) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  return n;
}

// Records the op if a tape is active and any input carries gradient.
void maybe_record(const char* op, const std::vector<Tensor>& inputs, const Tensor& out,
                  std::function<void()> pull) {
  GradientTape* tape = GradientTape::active();
  if (!tape) return;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return;
  out.node()->requires_grad = true;
  std::vector<std::shared_ptr<TensorNode>> ins;
  ins.reserve(inputs.size());
  for (const auto& in : inputs) ins.push_back(in.node());
  tape->record(op, std::move(ins), out.node(), std::move(pull));
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// C(m,n) (+)= op(A) * op(B) with row-major storage.
void gemm(bool ta, bool tb, i64 m, i64 n, i64 k, const double* A, const double* B, double* C,
          bool accumulate) {
  ConstMap a(A, ta ? k : m, ta ? m : k);
  ConstMap b(B, tb ? n : k, tb ? k : n);
  MutMap c(C, m, n);
  auto assign = [&](const auto& expr) {
    if (accumulate)
      c.noalias() += expr;
    else
      c.noalias() = expr;
  };
  if (!ta && !tb)
    assign(a * b);
  else if (ta && !tb)
    assign(a.transpose() * b);
  else if (!ta && tb)
    assign(a * b.transpose());
  else
    assign(a.transpose() * b.transpose());
}

// b broadcastable onto a when b's shape is a trailing suffix of a's.
bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

void check_axis(const Tensor& x, int axis, const char* op) {
  if (axis < 0 || axis >= x.rank())
    throw ContractError(std::string(op) + ": axis " + std::to_string(axis) +
                        " out of range for rank " + std::to_string(x.rank()));
}

}  // namespace

Precision precision() { return g_precision; }
void set_precision(Precision p) { g_precision = p; }

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& s) { return prod(s, 0, static_cast<int>(s.size())); }

void TensorNode::accumulate_grad(const std::vector<double>& g) {
  auto& dst = ensure_grad();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

std::vector<double>& TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
  return grad;
}

// Friend factory; the only way to mint a Tensor around a fresh node.
Tensor make_tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  auto n = make_node(std::move(shape), std::move(values));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  return make_tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), q(value));
  return make_tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<i64>(values.size()))
    throw ShapeError("tensor: " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  quantize(values);
  return make_tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = q(rng.uniform(lo, hi));
  return make_tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::gaussian(Shape shape, double mean, double stddev, Rng& rng, bool requires_grad) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = q(mean + stddev * rng.normal());
  return make_tensor(std::move(shape), std::move(v), requires_grad);
}

std::int64_t Tensor::numel() const { return shape_numel(node_->shape); }

std::int64_t Tensor::extent(int axis) const {
  check_axis(*this, axis, "extent");
  return node_->shape[axis];
}

void Tensor::zero_grad() { node_->grad.clear(); }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor " + shape_str(shape()) + " is not scalar");
  return node_->values[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
  const Shape& s = node_->shape;
  if (idx.size() != s.size()) throw ContractError("at: index rank mismatch");
  i64 off = 0;
  int d = 0;
  for (i64 i : idx) {
    off = off * s[d] + i;
    ++d;
  }
  return node_->values[static_cast<std::size_t>(off)];
}

// ---- tape ------------------------------------------------------------

GradientTape::GradientTape() { g_tapes.push_back(this); }

GradientTape::~GradientTape() {
  if (!g_tapes.empty() && g_tapes.back() == this) g_tapes.pop_back();
}

GradientTape* GradientTape::active() { return g_tapes.empty() ? nullptr : g_tapes.back(); }

void GradientTape::record(const char* op, std::vector<std::shared_ptr<TensorNode>> inputs,
                          std::shared_ptr<TensorNode> output, std::function<void()> pull) {
  steps_.push_back(Step{op, std::move(inputs), std::move(output), std::move(pull)});
}

void GradientTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward: loss must be a defined scalar tensor");
  // intermediates restart from zero every pass; only leaf grads accumulate
  // across calls
  for (auto& step : steps_) step.output->grad.clear();
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
    if (!it->output->grad.empty()) it->pull();
  }
}

// ---- elementwise ------------------------------------------------------

namespace {

// Shared core for add/mul with trailing-suffix expansion of b.
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, bool is_mul) {
  if (!is_suffix(a.shape(), b.shape()))
    throw ShapeError(std::string(name) + ": " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  const std::size_t nb = bv.size();
  std::vector<double> out(av.size());
  if (is_mul)
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = q(av[i] * bv[i % nb]);
  else
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = q(av[i] + bv[i % nb]);
  Tensor res = make_tensor(a.shape(), std::move(out), false);

  auto an = a.node();
  auto bn = b.node();
  auto on = res.node();
  maybe_record(name, {a, b}, res, [an, bn, on, nb, is_mul]() {
    const auto& go = on->grad;
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      if (is_mul)
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bn->values[i % nb];
      else
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      if (is_mul)
        for (std::size_t i = 0; i < go.size(); ++i) gb[i % nb] += go[i] * an->values[i];
      else
        for (std::size_t i = 0; i < go.size(); ++i) gb[i % nb] += go[i];
    }
  });
  return res;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", a, b, false); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", a, b, true); }
Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = q(a.values()[i] * c);
  Tensor res = make_tensor(a.shape(), std::move(out), false);
  auto an = a.node();
  auto on = res.node();
  maybe_record("scale", {a}, res, [an, on, c]() {
    if (!an->requires_grad) return;
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * on->grad[i];
  });
  return res;
}

// ---- matmul ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const int ra = a.rank();
  const int rb = b.rank();
  auto fail = [&]() -> ShapeError {
    return ShapeError("matmul: " + shape_str(sa) + " vs " + shape_str(sb));
  };
  if (ra < 2 || rb < 2) throw fail();
  const i64 m = sa[ra - 2], k = sa[ra - 1];
  const i64 kb = sb[rb - 2], n = sb[rb - 1];
  if (k != kb) throw fail();

  enum class Mode { plain, left_batched, right_shared, batched };
  Mode mode;
  Shape out_shape;
  i64 batches = 1;
  if (ra == 2 && rb == 2) {
    mode = Mode::plain;
    out_shape = {m, n};
  } else if (rb == 2) {
    mode = Mode::right_shared;  // [B..,m,k] x [k,n]
    out_shape = sa;
    out_shape[ra - 1] = n;
    batches = prod(sa, 0, ra - 2);
  } else if (ra == 2) {
    mode = Mode::left_batched;  // [m,k] x [B..,k,n]
    out_shape = sb;
    out_shape[rb - 2] = m;
    batches = prod(sb, 0, rb - 2);
  } else if (ra == rb && std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
    mode = Mode::batched;
    out_shape = sa;
    out_shape[ra - 1] = n;
    batches = prod(sa, 0, ra - 2);
  } else {
    throw fail();
  }

  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = out.data();
  switch (mode) {
    case Mode::plain:
      gemm(false, false, m, n, k, pa, pb, pc, false);
      break;
    case Mode::right_shared:
      // contiguous [B*m, k] x [k, n]
      gemm(false, false, batches * m, n, k, pa, pb, pc, false);
      break;
    case Mode::left_batched:
      for (i64 i = 0; i < batches; ++i)
        gemm(false, false, m, n, k, pa, pb + i * k * n, pc + i * m * n, false);
      break;
    case Mode::batched:
      for (i64 i = 0; i < batches; ++i)
        gemm(false, false, m, n, k, pa + i * m * k, pb + i * k * n, pc + i * m * n, false);
      break;
  }
  quantize(out);
  Tensor res = make_tensor(std::move(out_shape), std::move(out), false);

  auto an = a.node();
  auto bn = b.node();
  auto on = res.node();
  maybe_record("matmul", {a, b}, res, [an, bn, on, mode, m, n, k, batches]() {
    const double* go = on->grad.data();
    const double* va = an->values.data();
    const double* vb = bn->values.data();
    if (an->requires_grad) {
      double* ga = an->ensure_grad().data();
      switch (mode) {
        case Mode::plain:
          gemm(false, true, m, k, n, go, vb, ga, true);  // dA += dC.B^T
          break;
        case Mode::right_shared:
          gemm(false, true, batches * m, k, n, go, vb, ga, true);
          break;
        case Mode::left_batched:
          for (i64 i = 0; i < batches; ++i)
            gemm(false, true, m, k, n, go + i * m * n, vb + i * k * n, ga, true);
          break;
        case Mode::batched:
          for (i64 i = 0; i < batches; ++i)
            gemm(false, true, m, k, n, go + i * m * n, vb + i * k * n, ga + i * m * k, true);
          break;
      }
    }
    if (bn->requires_grad) {
      double* gb = bn->ensure_grad().data();
      switch (mode) {
        case Mode::plain:
          gemm(true, false, k, n, m, va, go, gb, true);  // dB += A^T.dC
          break;
        case Mode::right_shared:
          gemm(true, false, k, n, batches * m, va, go, gb, true);
          break;
        case Mode::left_batched:
          for (i64 i = 0; i < batches; ++i)
            gemm(true, false, k, n, m, va, go + i * m * n, gb + i * k * n, true);
          break;
        case Mode::batched:
          for (i64 i = 0; i < batches; ++i)
            gemm(true, false, k, n, m, va + i * m * k, go + i * m * n, gb + i * k * n, true);
          break;
      }
    }
  });
  return res;
}

// ---- activations -------------------------------------------------------

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
  Tensor res = make_tensor(x.shape(), std::move(out), false);
  auto xn = x.node();
  auto on = res.node();
  maybe_record("relu", {x}, res, [xn, on]() {
    if (!xn->requires_grad) return;
    auto& gx = xn->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (xn->values[i] > 0.0) gx[i] += on->grad[i];
  });
  return res;
}

Tensor softmax(const Tensor& x, int axis) {
  check_axis(x, axis, "softmax");
  const Shape& s = x.shape();
  const i64 ext = s[axis];
  const i64 inner = prod(s, axis + 1, x.rank());
  const i64 outer = prod(s, 0, axis);
  std::vector<double> out(x.values().size());
  const double* px = x.values().data();
  for (i64 o = 0; o < outer; ++o) {
    for (i64 in = 0; in < inner; ++in) {
      const i64 base = o * ext * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (i64 e = 0; e < ext; ++e) mx = std::max(mx, px[base + e * inner]);
      double sum = 0.0;
      for (i64 e = 0; e < ext; ++e) {
        const double v = std::exp(px[base + e * inner] - mx);
        out[static_cast<std::size_t>(base + e * inner)] = v;
        sum += v;
      }
      for (i64 e = 0; e < ext; ++e) out[static_cast<std::size_t>(base + e * inner)] = q(out[base + e * inner] / sum);
    }
  }
  Tensor res = make_tensor(s, std::move(out), false);
  auto xn = x.node();
  auto on = res.node();
  maybe_record("softmax", {x}, res, [xn, on, ext, inner, outer]() {
    if (!xn->requires_grad) return;
    auto& gx = xn->ensure_grad();
    const auto& y = on->values;
    const auto& gy = on->grad;
    for (i64 o = 0; o < outer; ++o) {
      for (i64 in = 0; in < inner; ++in) {
        const i64 base = o * ext * inner + in;
        double dot = 0.0;
        for (i64 e = 0; e < ext; ++e) dot += gy[base + e * inner] * y[base + e * inner];
        for (i64 e = 0; e < ext; ++e) {
          const i64 idx = base + e * inner;
          gx[idx] += y[idx] * (gy[idx] - dot);
        }
      }
    }
  });
  return res;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const i64 d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layer_norm: gain/bias " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " vs feature extent " + std::to_string(d));
  const i64 rows = x.numel() / d;
  std::vector<double> out(x.values().size());
  auto xhat = std::make_shared<std::vector<double>>(x.values().size());
  auto invstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  const double* px = x.values().data();
  const double* pg = gamma.values().data();
  const double* pb = beta.values().data();
  for (i64 r = 0; r < rows; ++r) {
    const double* row = px + r * d;
    double mean = 0.0;
    for (i64 j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (i64 j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*invstd)[static_cast<std::size_t>(r)] = is;
    for (i64 j = 0; j < d; ++j) {
      const double xh = (row[j] - mean) * is;
      (*xhat)[static_cast<std::size_t>(r * d + j)] = xh;
      out[static_cast<std::size_t>(r * d + j)] = q(pg[j] * xh + pb[j]);
    }
  }
  Tensor res = make_tensor(x.shape(), std::move(out), false);
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  auto on = res.node();
  maybe_record("layer_norm", {x, gamma, beta}, res, [xn, gn, bn, on, xhat, invstd, rows, d]() {
    const auto& gy = on->grad;
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (i64 r = 0; r < rows; ++r)
        for (i64 j = 0; j < d; ++j) gb[j] += gy[r * d + j];
    }
    if (gn->requires_grad) {
      auto& gg = gn->ensure_grad();
      for (i64 r = 0; r < rows; ++r)
        for (i64 j = 0; j < d; ++j) gg[j] += gy[r * d + j] * (*xhat)[r * d + j];
    }
    if (xn->requires_grad) {
      auto& gx = xn->ensure_grad();
      const auto& gv = gn->values;
      for (i64 r = 0; r < rows; ++r) {
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (i64 j = 0; j < d; ++j) {
          const double dxh = gy[r * d + j] * gv[j];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * (*xhat)[r * d + j];
        }
        mean_dxh /= static_cast<double>(d);
        mean_dxh_xh /= static_cast<double>(d);
        const double is = (*invstd)[static_cast<std::size_t>(r)];
        for (i64 j = 0; j < d; ++j) {
          const double dxh = gy[r * d + j] * gv[j];
          gx[r * d + j] += is * (dxh - mean_dxh - (*xhat)[r * d + j] * mean_dxh_xh);
        }
      }
    }
  });
  return res;
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout: p must lie in [0,1)");
  if (p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.values().size());
  std::vector<double> out(x.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = rng.bernoulli(p) ? 0.0 : keep_scale;
    (*mask)[i] = m;
    out[i] = q(x.values()[i] * m);
  }
  Tensor res = make_tensor(x.shape(), std::move(out), false);
  auto xn = x.node();
  auto on = res.node();
  maybe_record("dropout", {x}, res, [xn, on, mask]() {
    if (!xn->requires_grad) return;
    auto& gx = xn->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i] * (*mask)[i];
  });
  return res;
}

// ---- shape ops ---------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  Tensor res = make_tensor(std::move(shape), x.values(), false);
  auto xn = x.node();
  auto on = res.node();
  maybe_record("reshape", {x}, res, [xn, on]() {
    if (!xn->requires_grad) return;
    xn->accumulate_grad(on->grad);
  });
  return res;
}

namespace {

// out[l] = in[coords with axes a,b swapped]; optionally accumulates the
// reverse mapping for gradients.
void swap_axes_kernel(const double* in, double* out, const Shape& out_shape, int a, int b,
                      bool accumulate) {
  const int rank = static_cast<int>(out_shape.size());
  Shape in_shape = out_shape;
  std::swap(in_shape[a], in_shape[b]);
  std::vector<i64> in_strides(rank, 1);
  for (int i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
  std::vector<i64> coord(rank, 0);
  const i64 n = shape_numel(out_shape);
  for (i64 l = 0; l < n; ++l) {
    i64 off = 0;
    for (int i = 0; i < rank; ++i) {
      int src = i == a ? b : (i == b ? a : i);
      off += coord[i] * in_strides[src];
    }
    if (accumulate)
      out[off] += in[l];
    else
      out[l] = in[off];
    for (int i = rank - 1; i >= 0; --i) {
      if (++coord[i] < out_shape[i]) break;
      coord[i] = 0;
    }
  }
}

}  // namespace

Tensor swap_axes(const Tensor& x, int axis_a, int axis_b) {
  check_axis(x, axis_a, "swap_axes");
  check_axis(x, axis_b, "swap_axes");
  if (axis_a == axis_b) return reshape(x, x.shape());
  Shape out_shape = x.shape();
  std::swap(out_shape[axis_a], out_shape[axis_b]);
  std::vector<double> out(x.values().size());
  swap_axes_kernel(x.values().data(), out.data(), out_shape, axis_a, axis_b, false);
  Tensor res = make_tensor(out_shape, std::move(out), false);
  auto xn = x.node();
  auto on = res.node();
  maybe_record("swap_axes", {x}, res, [xn, on, out_shape, axis_a, axis_b]() {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    // same index map run backwards: scatter out-grad into in-grad
    swap_axes_kernel(on->grad.data(), xn->grad.data(), out_shape, axis_a, axis_b, true);
  });
  return res;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  check_axis(parts[0], axis, "concat");
  const Shape& s0 = parts[0].shape();
  Shape out_shape = s0;
  i64 total_ext = 0;
  for (const auto& p : parts) {
    const Shape& sp = p.shape();
    if (sp.size() != s0.size())
      throw ShapeError("concat: " + shape_str(s0) + " vs " + shape_str(sp));
    for (std::size_t i = 0; i < sp.size(); ++i)
      if (static_cast<int>(i) != axis && sp[i] != s0[i])
        throw ShapeError("concat: " + shape_str(s0) + " vs " + shape_str(sp));
    total_ext += sp[axis];
  }
  out_shape[axis] = total_ext;
  const i64 outer = prod(s0, 0, axis);
  const i64 inner = prod(s0, axis + 1, static_cast<int>(s0.size()));
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  i64 off_ext = 0;
  for (const auto& p : parts) {
    const i64 ext = p.shape()[axis];
    const double* src = p.values().data();
    for (i64 o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * total_ext + off_ext) * inner, src + o * ext * inner,
                  static_cast<std::size_t>(ext * inner) * sizeof(double));
    off_ext += ext;
  }
  Tensor res = make_tensor(std::move(out_shape), std::move(out), false);

  std::vector<std::shared_ptr<TensorNode>> part_nodes;
  std::vector<i64> exts;
  for (const auto& p : parts) {
    part_nodes.push_back(p.node());
    exts.push_back(p.shape()[axis]);
  }
  auto on = res.node();
  maybe_record("concat", parts, res, [part_nodes, exts, on, outer, inner, total_ext]() {
    const auto& go = on->grad;
    i64 off_ext = 0;
    for (std::size_t pi = 0; pi < part_nodes.size(); ++pi) {
      const i64 ext = exts[pi];
      auto& node = part_nodes[pi];
      if (node->requires_grad) {
        auto& gp = node->ensure_grad();
        for (i64 o = 0; o < outer; ++o) {
          const double* src = go.data() + (o * total_ext + off_ext) * inner;
          double* dst = gp.data() + o * ext * inner;
          for (i64 j = 0; j < ext * inner; ++j) dst[j] += src[j];
        }
      }
      off_ext += ext;
    }
  });
  return res;
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len) {
  check_axis(x, axis, "slice");
  const Shape& s = x.shape();
  if (start < 0 || len < 0 || start + len > s[axis])
    throw ContractError("slice: range [" + std::to_string(start) + "," +
                        std::to_string(start + len) + ") exceeds extent " +
                        std::to_string(s[axis]));
  Shape out_shape = s;
  out_shape[axis] = len;
  const i64 outer = prod(s, 0, axis);
  const i64 inner = prod(s, axis + 1, x.rank());
  const i64 ext = s[axis];
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  for (i64 o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner, x.values().data() + (o * ext + start) * inner,
                static_cast<std::size_t>(len * inner) * sizeof(double));
  Tensor res = make_tensor(std::move(out_shape), std::move(out), false);
  auto xn = x.node();
  auto on = res.node();
  maybe_record("slice", {x}, res, [xn, on, outer, inner, ext, start, len]() {
    if (!xn->requires_grad) return;
    auto& gx = xn->ensure_grad();
    const auto& go = on->grad;
    for (i64 o = 0; o < outer; ++o) {
      const double* src = go.data() + o * len * inner;
      double* dst = gx.data() + (o * ext + start) * inner;
      for (i64 j = 0; j < len * inner; ++j) dst[j] += src[j];
    }
  });
  return res;
}

Tensor broadcast_leading(const Tensor& x, const Shape& leading) {
  Shape out_shape = leading;
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  const i64 reps = shape_numel(leading);
  const std::size_t nb = x.values().size();
  std::vector<double> out(static_cast<std::size_t>(reps) * nb);
  for (i64 r = 0; r < reps; ++r)
    std::memcpy(out.data() + r * nb, x.values().data(), nb * sizeof(double));
  Tensor res = make_tensor(std::move(out_shape), std::move(out), false);
  auto xn = x.node();
  auto on = res.node();
  maybe_record("broadcast_leading", {x}, res, [xn, on, reps, nb]() {
    if (!xn->requires_grad) return;
    auto& gx = xn->ensure_grad();
    const auto& go = on->grad;
    for (i64 r = 0; r < reps; ++r)
      for (std::size_t j = 0; j < nb; ++j) gx[j] += go[r * nb + j];
  });
  return res;
}

// ---- reductions --------------------------------------------------------

Tensor max_along_axis(const Tensor& x, int axis) {
  check_axis(x, axis, "max_along_axis");
  const Shape& s = x.shape();
  const i64 ext = s[axis];
  const i64 inner = prod(s, axis + 1, x.rank());
  const i64 outer = prod(s, 0, axis);
  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(static_cast<std::size_t>(outer * inner));
  auto arg = std::make_shared<std::vector<i64>>(static_cast<std::size_t>(outer * inner));
  const double* px = x.values().data();
  for (i64 o = 0; o < outer; ++o) {
    for (i64 in = 0; in < inner; ++in) {
      const i64 base = o * ext * inner + in;
      double best = px[base];
      i64 best_e = 0;
      for (i64 e = 1; e < ext; ++e) {
        const double v = px[base + e * inner];
        if (v > best) {  // strict: ties keep the lowest index
          best = v;
          best_e = e;
        }
      }
      out[static_cast<std::size_t>(o * inner + in)] = best;
      (*arg)[static_cast<std::size_t>(o * inner + in)] = base + best_e * inner;
    }
  }
  Tensor res = make_tensor(std::move(out_shape), std::move(out), false);
  auto xn = x.node();
  auto on = res.node();
  maybe_record("max_along_axis", {x}, res, [xn, on, arg]() {
    if (!xn->requires_grad) return;
    auto& gx = xn->ensure_grad();
    for (std::size_t i = 0; i < arg->size(); ++i) gx[(*arg)[i]] += on->grad[i];
  });
  return res;
}

Tensor masked_max_tokens(const Tensor& x, const Tensor& mask) {
  if (x.rank() != 3 || mask.rank() != 2 || x.extent(0) != mask.extent(0) ||
      x.extent(1) != mask.extent(1))
    throw ShapeError("masked_max_tokens: " + shape_str(x.shape()) + " vs " +
                     shape_str(mask.shape()));
  const i64 a = x.extent(0), L = x.extent(1), d = x.extent(2);
  std::vector<double> out(static_cast<std::size_t>(a * d));
  auto arg = std::make_shared<std::vector<i64>>(static_cast<std::size_t>(a * d));
  const double* px = x.values().data();
  const double* pm = mask.values().data();
  for (i64 i = 0; i < a; ++i) {
    bool any = false;
    for (i64 t = 0; t < L; ++t) any = any || pm[i * L + t] != 0.0;
    if (!any)
      throw ContractError("masked_max_tokens: sequence " + std::to_string(i) +
                          " has no valid tokens");
    for (i64 j = 0; j < d; ++j) {
      double best = -std::numeric_limits<double>::infinity();
      i64 best_idx = -1;
      for (i64 t = 0; t < L; ++t) {
        if (pm[i * L + t] == 0.0) continue;  // -inf substitution
        const double v = px[(i * L + t) * d + j];
        if (v > best) {
          best = v;
          best_idx = (i * L + t) * d + j;
        }
      }
      out[static_cast<std::size_t>(i * d + j)] = best;
      (*arg)[static_cast<std::size_t>(i * d + j)] = best_idx;
    }
  }
  Tensor res = make_tensor({a, d}, std::move(out), false);
  auto xn = x.node();
  auto on = res.node();
  maybe_record("masked_max_tokens", {x, mask}, res, [xn, on, arg]() {
    if (!xn->requires_grad) return;
    auto& gx = xn->ensure_grad();
    for (std::size_t i = 0; i < arg->size(); ++i) gx[(*arg)[i]] += on->grad[i];
  });
  return res;
}

Tensor masked_mean_time(const Tensor& x, const Tensor& mask) {
  if (x.rank() != 3 || mask.rank() != 2 || x.extent(0) != mask.extent(0) ||
      x.extent(1) != mask.extent(1))
    throw ShapeError("masked_mean_time: " + shape_str(x.shape()) + " vs " +
                     shape_str(mask.shape()));
  const i64 a = x.extent(0), L = x.extent(1), d = x.extent(2);
  auto counts = std::make_shared<std::vector<double>>(static_cast<std::size_t>(a), 0.0);
  const double* pm = mask.values().data();
  for (i64 i = 0; i < a; ++i) {
    double c = 0.0;
    for (i64 t = 0; t < L; ++t) c += pm[i * L + t] != 0.0 ? 1.0 : 0.0;
    if (c == 0.0)
      throw ContractError("masked_mean_time: sequence " + std::to_string(i) +
                          " has no valid steps");
    (*counts)[static_cast<std::size_t>(i)] = c;
  }
  std::vector<double> out(static_cast<std::size_t>(a * d), 0.0);
  const double* px = x.values().data();
  for (i64 i = 0; i < a; ++i) {
    for (i64 t = 0; t < L; ++t) {
      if (pm[i * L + t] == 0.0) continue;
      for (i64 j = 0; j < d; ++j) out[static_cast<std::size_t>(i * d + j)] += px[(i * L + t) * d + j];
    }
    for (i64 j = 0; j < d; ++j)
      out[static_cast<std::size_t>(i * d + j)] =
          q(out[static_cast<std::size_t>(i * d + j)] / (*counts)[static_cast<std::size_t>(i)]);
  }
  Tensor res = make_tensor({a, d}, std::move(out), false);
  auto xn = x.node();
  auto mn = mask.node();
  auto on = res.node();
  maybe_record("masked_mean_time", {x, mask}, res, [xn, mn, on, counts, a, L, d]() {
    if (!xn->requires_grad) return;
    auto& gx = xn->ensure_grad();
    const auto& go = on->grad;
    for (i64 i = 0; i < a; ++i) {
      const double inv = 1.0 / (*counts)[static_cast<std::size_t>(i)];
      for (i64 t = 0; t < L; ++t) {
        if (mn->values[i * L + t] == 0.0) continue;
        for (i64 j = 0; j < d; ++j) gx[(i * L + t) * d + j] += go[i * d + j] * inv;
      }
    }
  });
  return res;
}

namespace {

Tensor reduce_all(const Tensor& x, bool mean) {
  const double n = static_cast<double>(x.numel());
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  if (mean) acc /= n;
  Tensor res = make_tensor({1}, {q(acc)}, false);
  auto xn = x.node();
  auto on = res.node();
  const double w = mean ? 1.0 / n : 1.0;
  maybe_record(mean ? "mean_all" : "sum_all", {x}, res, [xn, on, w]() {
    if (!xn->requires_grad) return;
    auto& gx = xn->ensure_grad();
    const double g = on->grad[0] * w;
    for (auto& v : gx) v += g;
  });
  return res;
}

}  // namespace

Tensor sum_all(const Tensor& x) { return reduce_all(x, false); }
Tensor mean_all(const Tensor& x) { return reduce_all(x, true); }

// ---- loss --------------------------------------------------------------

namespace {
double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }
double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
}  // namespace

Tensor bce_with_logits(const Tensor& logits, const Tensor& labels, const Tensor& include,
                       double pos_weight) {
  const i64 n = logits.numel();
  if (labels.numel() != n)
    throw ShapeError("bce_with_logits: " + shape_str(logits.shape()) + " vs " +
                     shape_str(labels.shape()));
  if (include.defined() && include.numel() != n)
    throw ShapeError("bce_with_logits: include mask " + shape_str(include.shape()) +
                     " vs logits " + shape_str(logits.shape()));
  const double* pz = logits.values().data();
  const double* py = labels.values().data();
  const double* pinc = include.defined() ? include.values().data() : nullptr;
  double total = 0.0;
  i64 n_inc = 0;
  for (i64 i = 0; i < n; ++i) {
    if (pinc && pinc[i] == 0.0) continue;
    const double y = py[i];
    if (y != 0.0 && y != 1.0)
      throw ContractError("bce_with_logits: label " + std::to_string(y) + " is not binary");
    total += pos_weight * y * softplus(-pz[i]) + (1.0 - y) * softplus(pz[i]);
    ++n_inc;
  }
  if (n_inc == 0) throw ContractError("bce_with_logits: empty inclusion set");
  Tensor res = make_tensor({1}, {q(total / static_cast<double>(n_inc))}, false);
  auto zn = logits.node();
  auto yn = labels.node();
  auto in = include.defined() ? include.node() : nullptr;
  auto on = res.node();
  maybe_record("bce_with_logits", {logits, labels}, res, [zn, yn, in, on, n, n_inc, pos_weight]() {
    if (!zn->requires_grad) return;
    auto& gz = zn->ensure_grad();
    const double g = on->grad[0] / static_cast<double>(n_inc);
    for (i64 i = 0; i < n; ++i) {
      if (in && in->values[i] == 0.0) continue;
      const double y = yn->values[i];
      const double s = sigmoid(zn->values[i]);
      gz[i] += g * (pos_weight * y * (s - 1.0) + (1.0 - y) * s);
    }
  });
  return res;
}

}  // namespace readmit
