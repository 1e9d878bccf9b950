#include "readmit/gradcheck.hpp"

#include <cmath>
#include <sstream>

#include "readmit/errors.hpp"
#include "readmit/graph.hpp"
#include "readmit/model.hpp"
#include "readmit/optim.hpp"
#include "readmit/transformer.hpp"

namespace readmit {

GradCheckResult check_gradients(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                std::vector<std::string> names, double h, double tol,
                                int coords_per_input, Rng* coord_rng) {
  GradCheckResult result;

  for (auto& in : inputs) in.zero_grad();
  {
    GradientTape tape;
    const Tensor loss = f();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.grad().empty())
      analytic.emplace_back(in.values().size(), 0.0);
    else
      analytic.push_back(in.grad());
  }

  for (std::size_t pi = 0; pi < inputs.size(); ++pi) {
    auto& values = inputs[pi].values_mut();
    std::vector<std::int64_t> coords;
    if (coords_per_input <= 0 || static_cast<std::size_t>(coords_per_input) >= values.size()) {
      coords.resize(values.size());
      for (std::size_t c = 0; c < values.size(); ++c) coords[c] = static_cast<std::int64_t>(c);
    } else {
      for (int c = 0; c < coords_per_input; ++c)
        coords.push_back(coord_rng ? coord_rng->uniform_int(0, static_cast<std::int64_t>(values.size()) - 1)
                                   : c);
    }
    for (const std::int64_t c : coords) {
      const double orig = values[static_cast<std::size_t>(c)];
      values[static_cast<std::size_t>(c)] = orig + h;
      const double up = f().item();
      values[static_cast<std::size_t>(c)] = orig - h;
      const double down = f().item();
      values[static_cast<std::size_t>(c)] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[pi][static_cast<std::size_t>(c)];
      const double rel =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst = names[pi] + "[" + std::to_string(c) + "]";
      }
      if (rel > tol) result.ok = false;
    }
  }
  return result;
}

namespace {

// Uniform values bounded away from zero, for ops with a kink at the origin.
Tensor away_from_zero(Shape shape, Rng& rng, bool requires_grad = true) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) {
    x = rng.uniform(0.2, 1.5);
    if (rng.bernoulli(0.5)) x = -x;
  }
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

Tensor random_mask(std::int64_t a, std::int64_t l, Rng& rng) {
  std::vector<double> m(static_cast<std::size_t>(a * l), 0.0);
  for (std::int64_t i = 0; i < a; ++i) {
    m[static_cast<std::size_t>(i * l + rng.uniform_int(0, l - 1))] = 1.0;  // >=1 valid
    for (std::int64_t t = 0; t < l; ++t)
      if (rng.bernoulli(0.6)) m[static_cast<std::size_t>(i * l + t)] = 1.0;
  }
  return Tensor::from({a, l}, std::move(m));
}

struct SuiteRunner {
  std::ostringstream log;
  bool all_ok = true;
  int seed = 0;

  void run(const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> inputs,
           std::vector<std::string> names, double tol = 1e-4) {
    const auto r = check_gradients(f, std::move(inputs), std::move(names), 1e-5, tol);
    if (!r.ok) {
      all_ok = false;
      log << "  FAIL " << name << " (seed " << seed << "): max rel err " << r.max_rel_err
          << " at " << r.worst << "\n";
    }
  }
};

// weighted sum against a seed-frozen constant, so output grads are
// non-uniform yet identical across repeated evaluations
Tensor probe_loss(const Tensor& y, std::uint64_t probe_seed) {
  Rng rng(probe_seed);
  Tensor w = Tensor::uniform(y.shape(), 0.5, 1.5, rng);
  return sum_all(mul(y, w));
}

void check_ops(SuiteRunner& s, int seed) {
  Rng rng(0xabcdef12u + static_cast<std::uint64_t>(seed));
  s.seed = seed;

  const std::int64_t m = rng.uniform_int(2, 4);
  const std::int64_t k = rng.uniform_int(2, 5);
  const std::int64_t n = rng.uniform_int(2, 4);
  const std::int64_t batch = rng.uniform_int(2, 3);

  {  // add / mul, equal shapes and trailing-suffix expansion
    Tensor a = Tensor::uniform({m, k}, -1, 1, rng, true);
    Tensor b = Tensor::uniform({m, k}, -1, 1, rng, true);
    Tensor bias = Tensor::uniform({k}, -1, 1, rng, true);
    s.run("add", [&]() { return probe_loss(add(a, b), 101); }, {a, b}, {"a", "b"});
    s.run("add_suffix", [&]() { return probe_loss(add(a, bias), 102); }, {a, bias}, {"a", "bias"});
    s.run("mul", [&]() { return probe_loss(mul(a, b), 103); }, {a, b}, {"a", "b"});
    s.run("mul_suffix", [&]() { return probe_loss(mul(a, bias), 104); }, {a, bias}, {"a", "bias"});
    s.run("scale", [&]() { return probe_loss(scale(a, -1.7), 105); }, {a}, {"a"});
    s.run("sub", [&]() { return probe_loss(sub(a, b), 106); }, {a, b}, {"a", "b"});
  }
  {  // matmul in all four dispatch modes
    Tensor a2 = Tensor::uniform({m, k}, -1, 1, rng, true);
    Tensor b2 = Tensor::uniform({k, n}, -1, 1, rng, true);
    Tensor a3 = Tensor::uniform({batch, m, k}, -1, 1, rng, true);
    Tensor b3 = Tensor::uniform({batch, k, n}, -1, 1, rng, true);
    s.run("matmul_2d", [&]() { return probe_loss(matmul(a2, b2), 107); }, {a2, b2}, {"a", "b"});
    s.run("matmul_shared_rhs", [&]() { return probe_loss(matmul(a3, b2), 108); }, {a3, b2},
          {"a", "b"});
    s.run("matmul_shared_lhs", [&]() { return probe_loss(matmul(a2, b3), 109); }, {a2, b3},
          {"a", "b"});
    s.run("matmul_batched", [&]() { return probe_loss(matmul(a3, b3), 110); }, {a3, b3},
          {"a", "b"});
  }
  {  // activations and normalization
    Tensor x = away_from_zero({m, k}, rng);
    s.run("relu", [&]() { return probe_loss(relu(x), 111); }, {x}, {"x"});
    Tensor sx = Tensor::uniform({batch, m, k}, -2, 2, rng, true);
    const int axis = static_cast<int>(rng.uniform_int(0, 2));
    s.run("softmax", [&]() { return probe_loss(softmax(sx, axis), 112); }, {sx}, {"x"});
    Tensor lx = Tensor::uniform({m, k}, -2, 2, rng, true);
    Tensor gamma = Tensor::uniform({k}, 0.5, 1.5, rng, true);
    Tensor beta = Tensor::uniform({k}, -0.5, 0.5, rng, true);
    s.run("layer_norm", [&]() { return probe_loss(layer_norm(lx, gamma, beta), 113); },
          {lx, gamma, beta}, {"x", "gamma", "beta"});
    // dropout with a frozen mask: rebuilding the rng per call repeats the draw
    Tensor dx = Tensor::uniform({m, k}, -1, 1, rng, true);
    s.run("dropout",
          [&]() {
            Rng mask_rng(777);
            return probe_loss(dropout(dx, 0.4, mask_rng), 114);
          },
          {dx}, {"x"});
  }
  {  // shape ops
    Tensor x = Tensor::uniform({batch, m, k}, -1, 1, rng, true);
    s.run("reshape", [&]() { return probe_loss(reshape(x, {batch * m, k}), 115); }, {x}, {"x"});
    s.run("swap_axes", [&]() { return probe_loss(swap_axes(x, 0, 2), 116); }, {x}, {"x"});
    Tensor c1 = Tensor::uniform({m, 2, k}, -1, 1, rng, true);
    Tensor c2 = Tensor::uniform({m, 3, k}, -1, 1, rng, true);
    s.run("concat", [&]() { return probe_loss(concat({c1, c2}, 1), 117); }, {c1, c2}, {"a", "b"});
    s.run("slice", [&]() { return probe_loss(slice(x, 1, 1, m - 1), 118); }, {x}, {"x"});
    Tensor small = Tensor::uniform({k}, -1, 1, rng, true);
    s.run("broadcast_leading",
          [&]() { return probe_loss(broadcast_leading(small, {batch, m}), 119); }, {small}, {"x"});
  }
  {  // reductions
    Tensor x = Tensor::uniform({batch, m, k}, -1, 1, rng, true);
    const int axis = static_cast<int>(rng.uniform_int(0, 2));
    s.run("max_along_axis", [&]() { return probe_loss(max_along_axis(x, axis), 120); }, {x},
          {"x"});
    Tensor mask = random_mask(batch, m, rng);
    Tensor y = Tensor::uniform({batch, m, k}, -1, 1, rng, true);
    s.run("masked_max_tokens", [&]() { return probe_loss(masked_max_tokens(y, mask), 121); }, {y},
          {"x"});
    s.run("masked_mean_time", [&]() { return probe_loss(masked_mean_time(y, mask), 122); }, {y},
          {"x"});
    s.run("sum_all", [&]() { return sum_all(x); }, {x}, {"x"});
    s.run("mean_all", [&]() { return mean_all(x); }, {x}, {"x"});
  }
  {  // loss
    const std::int64_t nl = rng.uniform_int(4, 8);
    Tensor logits = Tensor::uniform({nl}, -2, 2, rng, true);
    std::vector<double> lv(static_cast<std::size_t>(nl)), iv(static_cast<std::size_t>(nl), 1.0);
    for (auto& y : lv) y = rng.bernoulli(0.5) ? 1.0 : 0.0;
    iv[0] = 0.0;  // exercise partial inclusion
    Tensor labels = Tensor::from({nl}, std::move(lv));
    Tensor include = Tensor::from({nl}, std::move(iv));
    s.run("bce_with_logits", [&]() { return bce_with_logits(logits, labels, include, 1.3); },
          {logits}, {"logits"});
  }
  {  // composite blocks: one full transformer layer, one graph layer
    const std::int64_t a = 2, L = 3, d = 6, d_ff = 8;
    const int heads = 2;
    Rng prng(1234 + static_cast<std::uint64_t>(seed));
    TransformerParams p;
    p.heads = heads;
    p.w_q = Tensor::uniform({d, d}, -0.5, 0.5, prng, true);
    p.w_k = Tensor::uniform({d, d}, -0.5, 0.5, prng, true);
    p.w_v = Tensor::uniform({d, d}, -0.5, 0.5, prng, true);
    p.w_o = Tensor::uniform({d, d}, -0.5, 0.5, prng, true);
    p.ln1_gain = Tensor::uniform({d}, 0.7, 1.3, prng, true);
    p.ln1_bias = Tensor::uniform({d}, -0.2, 0.2, prng, true);
    p.ln2_gain = Tensor::uniform({d}, 0.7, 1.3, prng, true);
    p.ln2_bias = Tensor::uniform({d}, -0.2, 0.2, prng, true);
    p.mlp_w1 = Tensor::uniform({d, d_ff}, -0.5, 0.5, prng, true);
    p.mlp_b1 = Tensor::uniform({d_ff}, -0.2, 0.2, prng, true);
    p.mlp_w2 = Tensor::uniform({d_ff, d}, -0.5, 0.5, prng, true);
    p.mlp_b2 = Tensor::uniform({d}, -0.2, 0.2, prng, true);
    Tensor mask = random_mask(a, L, prng);
    std::vector<double> xv(static_cast<std::size_t>(a * L * d));
    for (std::int64_t i = 0; i < a * L; ++i)
      for (std::int64_t j = 0; j < d; ++j)
        xv[static_cast<std::size_t>(i * d + j)] =
            mask.values()[static_cast<std::size_t>(i)] != 0.0 ? prng.uniform(-1, 1) : 0.0;
    Tensor x = Tensor::from({a, L, d}, std::move(xv), true);
    s.run("transformer_layer",
          [&]() {
            const SequenceBatch out = transformer_layer({x, mask}, p, 0.0, false, nullptr);
            return probe_loss(out.values, 123);
          },
          {x, p.w_q, p.w_k, p.w_v, p.w_o, p.ln1_gain, p.ln1_bias, p.ln2_gain, p.ln2_bias, p.mlp_w1,
           p.mlp_b1, p.mlp_w2, p.mlp_b2},
          {"x", "w_q", "w_k", "w_v", "w_o", "ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias",
           "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"});

    const std::int64_t ga = 5, gl = 2, gd = 4;
    Tensor gx = Tensor::uniform({ga, gl, gd}, -1, 1, prng, true);
    SageParams sp;
    sp.w_self = Tensor::uniform({gd, gd}, -0.5, 0.5, prng, true);
    sp.w_neigh = Tensor::uniform({gd, gd}, -0.5, 0.5, prng, true);
    sp.bias = Tensor::uniform({gd}, -0.2, 0.2, prng, true);
    Tensor pooled = Tensor::uniform({ga, gd}, -1, 1, prng);
    const AdjacencyMatrix adj = build_adjacency(pooled, 1.0, 0.3, DistanceMetric::cosine);
    s.run("sage_layer",
          [&]() { return probe_loss(sage_layer(gx, adj, sp), 124); },
          {gx, sp.w_self, sp.w_neigh, sp.bias}, {"x", "w_self", "w_neigh", "bias"});
  }
}

// Hand-built 4-admission batch; small enough that every parameter
// coordinate can be checked against finite differences.
struct ToyModel {
  Model model;
  PreparedBatch batch;
};

ToyModel build_toy_model(int seed) {
  Rng rng(9000 + static_cast<std::uint64_t>(seed));
  Cohort cohort;
  const int labels[4] = {0, 1, 0, 1};
  for (int i = 0; i < 4; ++i) {
    AdmissionRecord rec;
    rec.admission_id = "toy" + std::to_string(i);
    rec.patient_id = "pat" + std::to_string(i);
    rec.label = labels[i];
    rec.split = Split::train;
    const int visits = 1 + i % 3;
    for (int t = 0; t < visits; ++t) {
      std::vector<double> e(5), im(4);
      for (auto& v : e) v = rng.uniform(-1, 1);
      for (auto& v : im) v = rng.uniform(-1, 1);
      rec.ehr.push_back(e);
      rec.image.push_back(im);
    }
    const int toks = static_cast<int>(rng.uniform_int(3, 30));
    for (int t = 0; t < toks; ++t)
      rec.note_tokens.push_back("tok" + std::to_string(rng.uniform_int(0, 9)));
    cohort.admissions.push_back(rec);
  }
  cohort.admissions[0].note_tokens.clear();  // exercise the empty-note path

  ModelConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.d_ff = 16;
  cfg.temporal_layers = 1;
  cfg.fusion_layers = 1;
  cfg.dropout = 0.0;
  cfg.delta = 0.3;
  cfg.sigma = 0.0;
  Model model(cfg, 5, 4, 8, 4242 + static_cast<std::uint64_t>(seed));
  // summary tokens init to zero, a constant row where layer_norm's
  // curvature is O(1/eps) and central differences lose accuracy; check the
  // gradient rules at a generic point instead
  for (const char* name : {"ehr.cls", "image.cls"}) {
    Tensor cls = model.params().get(name);
    for (auto& v : cls.values_mut()) v = rng.uniform(-0.5, 0.5);
  }
  HashingEmbedder embedder(8, 99);
  PreparedBatch batch = model.prepare(cohort, embedder);
  return {std::move(model), std::move(batch)};
}

bool check_toy_model(SuiteRunner& s, int seed, int coords_per_param) {
  ToyModel toy = build_toy_model(seed);
  auto f = [&]() {
    const Tensor logits = toy.model.forward(toy.batch, false, nullptr);
    return bce_loss(logits, toy.batch.labels, Tensor());
  };
  std::vector<Tensor> inputs;
  std::vector<std::string> names;
  for (const auto& [name, t] : toy.model.params().entries()) {
    inputs.push_back(t);
    names.push_back(name);
  }
  Rng coord_rng(31337 + static_cast<std::uint64_t>(seed));
  s.seed = seed;
  const auto r = check_gradients(f, inputs, names, 1e-5, 1e-4, coords_per_param, &coord_rng);
  if (!r.ok) {
    s.all_ok = false;
    s.log << "  FAIL end_to_end (seed " << seed << "): max rel err " << r.max_rel_err << " at "
          << r.worst << "\n";
  }
  return r.ok;
}

}  // namespace

bool run_gradcheck_suite(int seeds, std::string& log) {
  PrecisionGuard precision_guard(Precision::f64);
  SuiteRunner s;
  for (int seed = 0; seed < seeds; ++seed) check_ops(s, seed);
  // one exhaustive end-to-end pass, then sampled coordinates across seeds
  check_toy_model(s, 0, 0);
  for (int seed = 1; seed < seeds; ++seed) check_toy_model(s, seed, 3);
  log = s.log.str();
  return s.all_ok;
}

}  // namespace readmit
