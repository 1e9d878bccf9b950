#pragma once

#include <cstdint>

#include "readmit/tensor.hpp"

namespace readmit {

// Weights of one pre-norm encoder layer. d must be divisible by heads.
struct TransformerParams {
  int heads = 1;
  Tensor w_q, w_k, w_v, w_o;        // d x d, no biases
  Tensor ln1_gain, ln1_bias;        // d
  Tensor ln2_gain, ln2_bias;        // d
  Tensor mlp_w1, mlp_b1;            // d x d_ff, d_ff
  Tensor mlp_w2, mlp_b2;            // d_ff x d, d
};

// Token sequences with padding. Masked positions carry zeros and every
// sequence has at least one real token.
struct SequenceBatch {
  Tensor values;  // [a, L, d]
  Tensor mask;    // [a, L] of {0,1}, constant
};

// [a,L] -> [a,L,d] constant, for zeroing masked rows.
Tensor expand_mask(const Tensor& mask, std::int64_t d);

// Additive attention bias: 0 at real keys, a large negative constant at
// masked keys, expanded to [a*heads, L, L]. Masked keys end up with exactly
// zero weight after softmax (the shifted exponent underflows).
Tensor attention_bias(const Tensor& mask, int heads);

// Scaled dot-product self-attention over heads:
// softmax(Q K^T / sqrt(d_k) + bias) V, heads concatenated then projected by
// w_o; masked query rows are zeroed on output. Optionally exposes the
// softmaxed attention weights [a*heads, L, L] for inspection.
Tensor multi_head_attention(const SequenceBatch& z, const TransformerParams& p,
                            Tensor* attention_out = nullptr);

// Pre-norm residual block: y = MSA(LN(z)) + z, out = MLP(LN(y)) + y, with
// MLP = linear -> relu -> dropout -> linear and dropout also on the
// attention output. Dropout fires only when training; rng required then.
SequenceBatch transformer_layer(const SequenceBatch& z, const TransformerParams& p,
                                double dropout_p, bool training, Rng* rng = nullptr);

// Sinusoidal table: PE(pos, 2i) = sin(pos / 10000^{2i/d}), odd dims cos.
Tensor positional_encoding(std::int64_t length, std::int64_t dim);

// Learnable summary token at position 0; mask gains a leading 1.
SequenceBatch prepend_cls(const SequenceBatch& z, const Tensor& cls);
Tensor extract_cls(const SequenceBatch& z);  // [a, d]
SequenceBatch strip_cls(const SequenceBatch& z);

}  // namespace readmit
