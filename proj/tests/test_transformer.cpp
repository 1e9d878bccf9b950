#include <doctest.h>

#include <cmath>

#include "readmit/errors.hpp"
#include "readmit/gradcheck.hpp"
#include "readmit/transformer.hpp"

using namespace readmit;

TEST_SUITE_BEGIN("transformer");

namespace {

TransformerParams random_params(std::int64_t d, std::int64_t d_ff, int heads, Rng& rng) {
  TransformerParams p;
  p.heads = heads;
  p.w_q = Tensor::uniform({d, d}, -0.5, 0.5, rng, true);
  p.w_k = Tensor::uniform({d, d}, -0.5, 0.5, rng, true);
  p.w_v = Tensor::uniform({d, d}, -0.5, 0.5, rng, true);
  p.w_o = Tensor::uniform({d, d}, -0.5, 0.5, rng, true);
  p.ln1_gain = Tensor::full({d}, 1.0, true);
  p.ln1_bias = Tensor::zeros({d}, true);
  p.ln2_gain = Tensor::full({d}, 1.0, true);
  p.ln2_bias = Tensor::zeros({d}, true);
  p.mlp_w1 = Tensor::uniform({d, d_ff}, -0.5, 0.5, rng, true);
  p.mlp_b1 = Tensor::zeros({d_ff}, true);
  p.mlp_w2 = Tensor::uniform({d_ff, d}, -0.5, 0.5, rng, true);
  p.mlp_b2 = Tensor::zeros({d}, true);
  return p;
}

SequenceBatch random_batch(std::int64_t a, std::int64_t L, std::int64_t d,
                           const std::vector<double>& mask, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(a * L * d), 0.0);
  for (std::int64_t i = 0; i < a * L; ++i)
    if (mask[static_cast<std::size_t>(i)] != 0.0)
      for (std::int64_t j = 0; j < d; ++j)
        v[static_cast<std::size_t>(i * d + j)] = rng.uniform(-1, 1);
  return {Tensor::from({a, L, d}, v), Tensor::from({a, L}, mask)};
}

}  // namespace

TEST_CASE("layer_norm: constant rows, unit-variance pairs, gain zero") {
  Tensor c = Tensor::full({2, 3}, 5.0);
  Tensor gain = Tensor::full({3}, 1.0);
  Tensor bias = Tensor::zeros({3});
  const Tensor ln = layer_norm(c, gain, bias);
  for (double v : ln.values()) CHECK(v == 0.0);

  Tensor x = Tensor::from({1, 2}, {1, -1});
  const auto got = layer_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2})).values();
  CHECK(got[0] == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(got[1] == doctest::Approx(-1.0).epsilon(1e-4));

  Tensor beta = Tensor::from({3}, {7, 8, 9});
  const auto only_bias = layer_norm(c, Tensor::zeros({3}), beta).values();
  for (int i = 0; i < 6; ++i) CHECK(only_bias[static_cast<std::size_t>(i)] == beta.values()[i % 3]);
}

TEST_CASE("attention on a singleton sequence routes through w_v then w_o") {
  Rng rng(1);
  const std::int64_t d = 4;
  TransformerParams p = random_params(d, 8, 2, rng);
  SequenceBatch z = random_batch(1, 1, d, {1}, rng);
  Tensor attn;
  const Tensor out = multi_head_attention(z, p, &attn);
  for (double w : attn.values()) CHECK(w == 1.0);  // singleton softmax
  const Tensor expected = matmul(matmul(z.values, p.w_v), p.w_o);
  for (std::size_t i = 0; i < out.values().size(); ++i)
    CHECK(out.values()[i] == doctest::Approx(expected.values()[i]).epsilon(1e-12));
}

TEST_CASE("attention over two identical tokens gives half weight each") {
  Rng rng(2);
  const std::int64_t d = 4;
  TransformerParams p = random_params(d, 8, 2, rng);
  std::vector<double> row(static_cast<std::size_t>(d));
  for (auto& v : row) v = rng.uniform(-1, 1);
  std::vector<double> vals;
  vals.insert(vals.end(), row.begin(), row.end());
  vals.insert(vals.end(), row.begin(), row.end());
  SequenceBatch z{Tensor::from({1, 2, d}, vals), Tensor::from({1, 2}, {1, 1})};
  Tensor attn;
  multi_head_attention(z, p, &attn);
  for (double w : attn.values()) CHECK(w == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("masked keys carry exactly zero weight; rows sum to one") {
  Rng rng(3);
  const std::int64_t a = 2, L = 3, d = 4;
  TransformerParams p = random_params(d, 8, 2, rng);
  SequenceBatch z = random_batch(a, L, d, {1, 1, 0, 1, 1, 1}, rng);
  Tensor attn;
  multi_head_attention(z, p, &attn);
  const auto& w = attn.values();
  // attn is [a*heads, L, L]; admission 0 masks key position 2
  for (std::int64_t h = 0; h < 2; ++h)
    for (std::int64_t q = 0; q < L; ++q) {
      CHECK(w[(h * L + q) * L + 2] == 0.0);
      double total = 0;
      for (std::int64_t k = 0; k < L; ++k) total += w[(h * L + q) * L + k];
      CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("attention with a masked token equals the truncated sequence") {
  Rng rng(4);
  const std::int64_t d = 4;
  TransformerParams p = random_params(d, 8, 2, rng);

  // 3 tokens with the third masked
  SequenceBatch z3 = random_batch(1, 3, d, {1, 1, 0}, rng);
  // same first two tokens, length-2 sequence
  std::vector<double> v2(z3.values.values().begin(), z3.values.values().begin() + 2 * d);
  SequenceBatch z2{Tensor::from({1, 2, d}, v2), Tensor::from({1, 2}, {1, 1})};

  const Tensor out3 = multi_head_attention(z3, p);
  const Tensor out2 = multi_head_attention(z2, p);
  for (std::int64_t t = 0; t < 2; ++t)
    for (std::int64_t j = 0; j < d; ++j)
      CHECK(out3.values()[t * d + j] == doctest::Approx(out2.values()[t * d + j]).epsilon(1e-12));
}

TEST_CASE("fully masked sequences are rejected") {
  Rng rng(5);
  TransformerParams p = random_params(4, 8, 2, rng);
  SequenceBatch z = random_batch(2, 2, 4, {1, 1, 0, 0}, rng);
  CHECK_THROWS_AS(multi_head_attention(z, p), ContractError);
}

TEST_CASE("transformer layer: inference is deterministic even with dropout configured") {
  Rng rng(6);
  const std::int64_t a = 2, L = 3, d = 4;
  TransformerParams p = random_params(d, 8, 2, rng);
  SequenceBatch z = random_batch(a, L, d, {1, 1, 1, 1, 1, 0}, rng);
  const auto out1 = transformer_layer(z, p, 0.1, false, nullptr);
  const auto out2 = transformer_layer(z, p, 0.1, false, nullptr);
  CHECK(out1.values.values() == out2.values.values());
}

TEST_CASE("zeroed output projections make the layer an identity map") {
  Rng rng(7);
  const std::int64_t a = 2, L = 3, d = 4;
  TransformerParams p = random_params(d, 8, 2, rng);
  p.w_o = Tensor::zeros({d, d}, true);
  p.mlp_w2 = Tensor::zeros({8, d}, true);
  p.mlp_b2 = Tensor::zeros({d}, true);
  SequenceBatch z = random_batch(a, L, d, {1, 1, 0, 1, 1, 1}, rng);
  const auto out = transformer_layer(z, p, 0.0, false, nullptr);
  CHECK(out.values.values() == z.values.values());
}

TEST_CASE("layer output equals a step-by-step composition oracle") {
  Rng rng(8);
  const std::int64_t a = 2, L = 3, d = 4, d_ff = 8;
  TransformerParams p = random_params(d, d_ff, 2, rng);
  p.ln1_bias = Tensor::uniform({d}, -0.3, 0.3, rng, true);
  p.ln2_bias = Tensor::uniform({d}, -0.3, 0.3, rng, true);
  p.mlp_b1 = Tensor::uniform({d_ff}, -0.3, 0.3, rng, true);
  p.mlp_b2 = Tensor::uniform({d}, -0.3, 0.3, rng, true);
  SequenceBatch z = random_batch(a, L, d, {1, 1, 1, 1, 0, 1}, rng);

  const auto got = transformer_layer(z, p, 0.0, false, nullptr);

  const Tensor n1 = layer_norm(z.values, p.ln1_gain, p.ln1_bias);
  const Tensor y = add(multi_head_attention({n1, z.mask}, p), z.values);
  const Tensor n2 = layer_norm(y, p.ln2_gain, p.ln2_bias);
  const Tensor h = relu(add(matmul(n2, p.mlp_w1), p.mlp_b1));
  const Tensor m = add(matmul(h, p.mlp_w2), p.mlp_b2);
  const Tensor want = mul(add(m, y), expand_mask(z.mask, d));

  for (std::size_t i = 0; i < want.values().size(); ++i)
    CHECK(got.values.values()[i] == doctest::Approx(want.values()[i]).epsilon(1e-12));
}

TEST_CASE("padded-position perturbation leaves unmasked outputs bit-identical") {
  Rng rng(9);
  const std::int64_t a = 2, L = 4, d = 4;
  TransformerParams p = random_params(d, 8, 2, rng);
  const std::vector<double> mask = {1, 1, 0, 0, 1, 1, 1, 0};
  SequenceBatch z = random_batch(a, L, d, mask, rng);

  SequenceBatch stacked = transformer_layer(z, p, 0.0, false, nullptr);
  stacked = transformer_layer(stacked, p, 0.0, false, nullptr);

  SequenceBatch z2{Tensor::from(z.values.shape(), z.values.values()), z.mask};
  auto& v2 = z2.values.values_mut();
  for (std::int64_t i = 0; i < a * L; ++i)
    if (mask[static_cast<std::size_t>(i)] == 0.0)
      for (std::int64_t j = 0; j < d; ++j) v2[static_cast<std::size_t>(i * d + j)] = 1e3;
  SequenceBatch stacked2 = transformer_layer(z2, p, 0.0, false, nullptr);
  stacked2 = transformer_layer(stacked2, p, 0.0, false, nullptr);

  for (std::int64_t i = 0; i < a * L; ++i)
    if (mask[static_cast<std::size_t>(i)] != 0.0)
      for (std::int64_t j = 0; j < d; ++j)
        CHECK(stacked.values.values()[static_cast<std::size_t>(i * d + j)] ==
              stacked2.values.values()[static_cast<std::size_t>(i * d + j)]);
}

TEST_CASE("attention is permutation-equivariant without positional encoding") {
  Rng rng(10);
  const std::int64_t L = 4, d = 6;
  TransformerParams p = random_params(d, 12, 3, rng);
  SequenceBatch z = random_batch(1, L, d, {1, 1, 1, 1}, rng);
  const Tensor base = multi_head_attention(z, p);

  const std::vector<int> perm = {2, 0, 3, 1};
  std::vector<double> pv(static_cast<std::size_t>(L * d));
  for (int t = 0; t < L; ++t)
    for (int j = 0; j < d; ++j)
      pv[static_cast<std::size_t>(t * d + j)] = z.values.values()[perm[t] * d + j];
  SequenceBatch zp{Tensor::from({1, L, d}, pv), z.mask};
  const Tensor out = multi_head_attention(zp, p);
  for (int t = 0; t < L; ++t)
    for (int j = 0; j < d; ++j)
      CHECK(out.values()[t * d + j] ==
            doctest::Approx(base.values()[perm[t] * d + j]).epsilon(1e-12));
}

TEST_CASE("positional encoding: zero position, pair norms, direct values at pos=1") {
  const Tensor pe = positional_encoding(3, 4);
  CHECK(pe.at({0, 0}) == 0.0);
  CHECK(pe.at({0, 1}) == 1.0);
  CHECK(pe.at({0, 2}) == 0.0);
  CHECK(pe.at({0, 3}) == 1.0);
  for (std::int64_t pos = 0; pos < 3; ++pos)
    for (std::int64_t i = 0; i < 2; ++i) {
      const double s = pe.at({pos, 2 * i});
      const double c = pe.at({pos, 2 * i + 1});
      CHECK(s * s + c * c == doctest::Approx(1.0).epsilon(1e-12));
    }
  CHECK(pe.at({1, 0}) == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
  CHECK(pe.at({1, 1}) == doctest::Approx(std::cos(1.0)).epsilon(1e-15));
  CHECK(pe.at({1, 2}) == doctest::Approx(std::sin(0.01)).epsilon(1e-15));
  CHECK(pe.at({1, 3}) == doctest::Approx(std::cos(0.01)).epsilon(1e-15));
}

TEST_CASE("cls prepend/extract roundtrip and mask growth") {
  Rng rng(11);
  const std::int64_t a = 3, L = 9, d = 4;
  SequenceBatch z = random_batch(a, L, d, std::vector<double>(a * L, 1.0), rng);
  // pad the last two steps of admission 2
  std::vector<double> mask(static_cast<std::size_t>(a * L), 1.0);
  mask[2 * L + 7] = 0.0;
  mask[2 * L + 8] = 0.0;
  z.mask = Tensor::from({a, L}, mask);

  Tensor cls = Tensor::from({d}, {1, 2, 3, 4}, true);
  const SequenceBatch with = prepend_cls(z, cls);
  CHECK(with.values.extent(1) == L + 1);
  for (std::int64_t i = 0; i < a; ++i) {
    CHECK(with.mask.at({i, 0}) == 1.0);
    for (std::int64_t j = 0; j < d; ++j) CHECK(with.values.at({i, 0, j}) == cls.values()[j]);
  }
  CHECK(with.mask.at({2, 8}) == 0.0);

  const Tensor back = extract_cls(with);
  for (std::int64_t i = 0; i < a; ++i)
    for (std::int64_t j = 0; j < d; ++j) CHECK(back.at({i, j}) == cls.values()[j]);

  const SequenceBatch stripped = strip_cls(with);
  CHECK(stripped.values.extent(1) == L);
  CHECK(stripped.values.values() == z.values.values());
  CHECK(stripped.mask.values() == z.mask.values());
}

TEST_CASE("full transformer layer passes finite-difference checks") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(12);
  const std::int64_t a = 2, L = 3, d = 6, d_ff = 8;
  TransformerParams p = random_params(d, d_ff, 2, rng);
  SequenceBatch z = random_batch(a, L, d, {1, 1, 0, 1, 1, 1}, rng);
  z.values.set_requires_grad(true);
  const auto r = check_gradients(
      [&]() {
        const auto out = transformer_layer(z, p, 0.0, false, nullptr);
        return mean_all(out.values);
      },
      {z.values, p.w_q, p.w_k, p.w_v, p.w_o, p.mlp_w1, p.mlp_w2, p.ln1_gain, p.ln2_gain},
      {"x", "w_q", "w_k", "w_v", "w_o", "mlp_w1", "mlp_w2", "ln1_gain", "ln2_gain"});
  INFO(r.worst, " rel err ", r.max_rel_err);
  CHECK(r.ok);
}

TEST_SUITE_END();
