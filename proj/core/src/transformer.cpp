#include "readmit/transformer.hpp"

#include <cmath>

#include "readmit/errors.hpp"

namespace readmit {

namespace {

constexpr double kMaskBias = -1e30;  // exp underflows to exactly 0 after the shift

void check_batch(const SequenceBatch& z, const char* op) {
  if (!z.values.defined() || !z.mask.defined() || z.values.rank() != 3 || z.mask.rank() != 2 ||
      z.values.extent(0) != z.mask.extent(0) || z.values.extent(1) != z.mask.extent(1))
    throw ShapeError(std::string(op) + ": inconsistent sequence batch");
  const std::int64_t a = z.mask.extent(0), L = z.mask.extent(1);
  const double* m = z.mask.values().data();
  for (std::int64_t i = 0; i < a; ++i) {
    bool any = false;
    for (std::int64_t t = 0; t < L; ++t) any = any || m[i * L + t] != 0.0;
    if (!any)
      throw ContractError(std::string(op) + ": sequence " + std::to_string(i) +
                          " is fully masked");
  }
}

}  // namespace

Tensor expand_mask(const Tensor& mask, std::int64_t d) {
  const std::int64_t a = mask.extent(0), L = mask.extent(1);
  std::vector<double> v(static_cast<std::size_t>(a * L * d));
  const double* m = mask.values().data();
  for (std::int64_t i = 0; i < a * L; ++i)
    for (std::int64_t j = 0; j < d; ++j) v[i * d + j] = m[i] != 0.0 ? 1.0 : 0.0;
  return Tensor::from({a, L, d}, std::move(v));
}

Tensor attention_bias(const Tensor& mask, int heads) {
  const std::int64_t a = mask.extent(0), L = mask.extent(1);
  std::vector<double> v(static_cast<std::size_t>(a * heads * L * L));
  const double* m = mask.values().data();
  for (std::int64_t i = 0; i < a; ++i) {
    for (int h = 0; h < heads; ++h) {
      double* block = v.data() + ((i * heads + h) * L) * L;
      for (std::int64_t q = 0; q < L; ++q)
        for (std::int64_t k = 0; k < L; ++k)
          block[q * L + k] = m[i * L + k] != 0.0 ? 0.0 : kMaskBias;
    }
  }
  return Tensor::from({a * heads, L, L}, std::move(v));
}

Tensor multi_head_attention(const SequenceBatch& z, const TransformerParams& p,
                            Tensor* attention_out) {
  check_batch(z, "multi_head_attention");
  const std::int64_t a = z.values.extent(0);
  const std::int64_t L = z.values.extent(1);
  const std::int64_t d = z.values.extent(2);
  const int J = p.heads;
  if (J < 1 || d % J != 0)
    throw ContractError("multi_head_attention: hidden dim " + std::to_string(d) +
                        " not divisible by " + std::to_string(J) + " heads");
  const std::int64_t dk = d / J;

  auto split_heads = [&](const Tensor& x) {
    // [a,L,d] -> [a*J, L, dk]
    return reshape(swap_axes(reshape(x, {a, L, J, dk}), 1, 2), {a * J, L, dk});
  };
  const Tensor q = split_heads(matmul(z.values, p.w_q));
  const Tensor k = split_heads(matmul(z.values, p.w_k));
  const Tensor v = split_heads(matmul(z.values, p.w_v));

  Tensor scores = matmul(q, swap_axes(k, 1, 2));          // [a*J, L, L]
  scores = scale(scores, 1.0 / std::sqrt(static_cast<double>(dk)));
  scores = add(scores, attention_bias(z.mask, J));
  const Tensor attn = softmax(scores, 2);
  if (attention_out) *attention_out = attn;

  Tensor ctx = matmul(attn, v);                            // [a*J, L, dk]
  ctx = reshape(swap_axes(reshape(ctx, {a, J, L, dk}), 1, 2), {a, L, d});
  Tensor out = matmul(ctx, p.w_o);
  return mul(out, expand_mask(z.mask, d));  // zero masked query rows
}

SequenceBatch transformer_layer(const SequenceBatch& z, const TransformerParams& p,
                                double dropout_p, bool training, Rng* rng) {
  check_batch(z, "transformer_layer");
  if (training && dropout_p > 0.0 && rng == nullptr)
    throw ContractError("transformer_layer: training with dropout needs an rng");

  const std::int64_t d = z.values.extent(2);
  Tensor attn = multi_head_attention({layer_norm(z.values, p.ln1_gain, p.ln1_bias), z.mask}, p);
  if (training && dropout_p > 0.0) attn = dropout(attn, dropout_p, *rng);
  const Tensor y = add(attn, z.values);

  Tensor h = relu(add(matmul(layer_norm(y, p.ln2_gain, p.ln2_bias), p.mlp_w1), p.mlp_b1));
  if (training && dropout_p > 0.0) h = dropout(h, dropout_p, *rng);
  const Tensor m = add(matmul(h, p.mlp_w2), p.mlp_b2);

  // residual, with masked rows pinned back to zero
  Tensor out = mul(add(m, y), expand_mask(z.mask, d));
  return {out, z.mask};
}

Tensor positional_encoding(std::int64_t length, std::int64_t dim) {
  std::vector<double> v(static_cast<std::size_t>(length * dim));
  for (std::int64_t pos = 0; pos < length; ++pos) {
    for (std::int64_t j = 0; j < dim; ++j) {
      const std::int64_t pair = j / 2;
      const double rate = std::pow(10000.0, -2.0 * static_cast<double>(pair) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * rate;
      v[static_cast<std::size_t>(pos * dim + j)] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from({length, dim}, std::move(v));
}

SequenceBatch prepend_cls(const SequenceBatch& z, const Tensor& cls) {
  const std::int64_t a = z.values.extent(0);
  const std::int64_t L = z.values.extent(1);
  const std::int64_t d = z.values.extent(2);
  if (cls.numel() != d)
    throw ShapeError("prepend_cls: cls " + shape_str(cls.shape()) + " vs hidden dim " +
                     std::to_string(d));
  const Tensor cls_tokens = reshape(broadcast_leading(reshape(cls, {d}), {a}), {a, 1, d});
  const Tensor values = concat({cls_tokens, z.values}, 1);

  std::vector<double> m(static_cast<std::size_t>(a * (L + 1)), 1.0);
  const double* src = z.mask.values().data();
  for (std::int64_t i = 0; i < a; ++i)
    for (std::int64_t t = 0; t < L; ++t) m[i * (L + 1) + 1 + t] = src[i * L + t];
  return {values, Tensor::from({a, L + 1}, std::move(m))};
}

Tensor extract_cls(const SequenceBatch& z) {
  const std::int64_t a = z.values.extent(0);
  const std::int64_t d = z.values.extent(2);
  return reshape(slice(z.values, 1, 0, 1), {a, d});
}

SequenceBatch strip_cls(const SequenceBatch& z) {
  const std::int64_t a = z.values.extent(0);
  const std::int64_t L = z.values.extent(1);
  const Tensor values = slice(z.values, 1, 1, L - 1);
  std::vector<double> m(static_cast<std::size_t>(a * (L - 1)));
  const double* src = z.mask.values().data();
  for (std::int64_t i = 0; i < a; ++i)
    for (std::int64_t t = 1; t < L; ++t) m[i * (L - 1) + (t - 1)] = src[i * L + t];
  return {values, Tensor::from({a, L - 1}, std::move(m))};
}

}  // namespace readmit
