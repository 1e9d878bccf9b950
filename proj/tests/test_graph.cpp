#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "readmit/errors.hpp"
#include "readmit/gradcheck.hpp"
#include "readmit/graph.hpp"

using namespace readmit;

TEST_SUITE_BEGIN("graph");

namespace {

// plain per-node loop over weighted neighbor means, the oracle for the
// vectorized layer
std::vector<double> sage_loop_oracle(const Tensor& values, const AdjacencyMatrix& adj,
                                     const SageParams& p) {
  const std::int64_t a = values.extent(0), l = values.extent(1), d = values.extent(2);
  const auto& v = values.values();
  const auto& ws = p.w_self.values();
  const auto& wn = p.w_neigh.values();
  const auto& bias = p.bias.values();
  std::vector<double> out(static_cast<std::size_t>(a * l * d), 0.0);
  for (std::int64_t t = 0; t < l; ++t) {
    for (std::int64_t i = 0; i < a; ++i) {
      std::vector<double> neigh(static_cast<std::size_t>(d), 0.0);
      double total = 0.0;
      for (std::int64_t j = 0; j < a; ++j) {
        if (j == i) continue;
        const double w = adj.at(i, j);
        if (w == 0.0) continue;
        total += w;
        for (std::int64_t f = 0; f < d; ++f) neigh[f] += w * v[(j * l + t) * d + f];
      }
      if (total > 0.0)
        for (std::int64_t f = 0; f < d; ++f) neigh[f] /= total;
      for (std::int64_t f = 0; f < d; ++f) {
        double acc = bias[f];
        for (std::int64_t g = 0; g < d; ++g) {
          acc += v[(i * l + t) * d + g] * ws[g * d + f];
          acc += neigh[g] * wn[g * d + f];
        }
        out[static_cast<std::size_t>((i * l + t) * d + f)] = acc > 0.0 ? acc : 0.0;
      }
    }
  }
  return out;
}

SageParams random_sage(std::int64_t d, Rng& rng) {
  return {Tensor::uniform({d, d}, -0.5, 0.5, rng, true),
          Tensor::uniform({d, d}, -0.5, 0.5, rng, true),
          Tensor::uniform({d}, -0.2, 0.2, rng, true)};
}

}  // namespace

TEST_CASE("pooling: constants, two-step mean, ragged-mask loop oracle") {
  Tensor c = Tensor::full({2, 3, 2}, 4.5);
  Tensor mask = Tensor::from({2, 3}, {1, 0, 0, 1, 1, 1});
  const Tensor pooled_const = pool_node_features(c, mask);
  for (double v : pooled_const.values()) CHECK(v == 4.5);

  Tensor x = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
  Tensor full = Tensor::from({1, 2}, {1, 1});
  CHECK(pool_node_features(x, full).values() == std::vector<double>{2, 3});

  Rng rng(5);
  Tensor r = Tensor::uniform({4, 5, 3}, -1, 1, rng);
  std::vector<double> mv(20, 0.0);
  for (int i = 0; i < 4; ++i) {
    mv[static_cast<std::size_t>(i * 5 + i)] = 1.0;
    if (i % 2 == 0) mv[static_cast<std::size_t>(i * 5 + 4)] = 1.0;
  }
  Tensor rm = Tensor::from({4, 5}, mv);
  const auto pooled = pool_node_features(r, rm).values();
  for (int i = 0; i < 4; ++i) {
    for (int f = 0; f < 3; ++f) {
      double acc = 0.0, count = 0.0;
      for (int t = 0; t < 5; ++t)
        if (rm.values()[static_cast<std::size_t>(i * 5 + t)] != 0.0) {
          acc += r.values()[static_cast<std::size_t>((i * 5 + t) * 3 + f)];
          count += 1.0;
        }
      CHECK(pooled[static_cast<std::size_t>(i * 3 + f)] ==
            doctest::Approx(acc / count).epsilon(1e-12));
    }
  }

  Tensor dead = Tensor::from({1, 2}, {0, 0});
  CHECK_THROWS_AS(pool_node_features(x, dead), ContractError);
}

TEST_CASE("adjacency: identical rows, huge bandwidth, threshold oracle") {
  Tensor same = Tensor::from({2, 3}, {1, 2, 3, 1, 2, 3});
  auto adj = build_adjacency(same, 1.0, 0.5, DistanceMetric::cosine);
  CHECK(adj.at(0, 1) == 1.0);

  Rng rng(3);
  Tensor pts = Tensor::uniform({5, 4}, -1, 1, rng);
  auto wide = build_adjacency(pts, 1e6, 0.0, DistanceMetric::euclidean);
  for (std::int64_t i = 0; i < 5; ++i)
    for (std::int64_t j = 0; j < 5; ++j) CHECK(wide.at(i, j) == doctest::Approx(1.0).epsilon(1e-6));

  // entry-wise direct evaluation with delta = 0.5
  const double sigma = 0.8;
  auto thr = build_adjacency(pts, sigma, 0.5, DistanceMetric::cosine);
  const auto& p = pts.values();
  for (std::int64_t i = 0; i < 5; ++i) {
    for (std::int64_t j = 0; j < 5; ++j) {
      if (i == j) {
        CHECK(thr.at(i, j) == 1.0);
        continue;
      }
      const double dist = pairwise_distance(p.data() + i * 4, p.data() + j * 4, 4,
                                            DistanceMetric::cosine);
      double expected = std::exp(-dist * dist / (sigma * sigma));
      if (expected < 0.5) expected = 0.0;
      CHECK(thr.at(i, j) == expected);
    }
  }
}

TEST_CASE("adjacency invariants: symmetry, unit diagonal, value range") {
  Rng rng(11);
  Tensor pts = Tensor::uniform({12, 6}, -2, 2, rng);
  const double delta = 0.4;
  auto adj = build_adjacency(pts, 0.9, delta, DistanceMetric::cosine);
  for (std::int64_t i = 0; i < 12; ++i) {
    CHECK(adj.at(i, i) == 1.0);
    for (std::int64_t j = 0; j < 12; ++j) {
      CHECK(adj.at(i, j) == adj.at(j, i));
      const double w = adj.at(i, j);
      CHECK((w == 0.0 || (w >= delta && w <= 1.0)));
    }
  }
}

TEST_CASE("adjacency parameter errors") {
  Tensor pts = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(build_adjacency(pts, 0.0, 0.5, DistanceMetric::cosine), ContractError);
  CHECK_THROWS_AS(build_adjacency(pts, -1.0, 0.5, DistanceMetric::cosine), ContractError);
  CHECK_THROWS_AS(build_adjacency(pts, 1.0, 1.0, DistanceMetric::cosine), ContractError);
}

TEST_CASE("adjacency permutation equivariance is exact") {
  Rng rng(13);
  Tensor pts = Tensor::uniform({6, 3}, -1, 1, rng);
  auto adj = build_adjacency(pts, 0.7, 0.3, DistanceMetric::cosine);
  const std::vector<int> perm = {3, 0, 5, 1, 4, 2};
  std::vector<double> pv(6 * 3);
  for (int i = 0; i < 6; ++i)
    for (int f = 0; f < 3; ++f) pv[i * 3 + f] = pts.values()[perm[i] * 3 + f];
  auto padj = build_adjacency(Tensor::from({6, 3}, pv), 0.7, 0.3, DistanceMetric::cosine);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) CHECK(padj.at(i, j) == adj.at(perm[i], perm[j]));
}

TEST_CASE("median heuristic is permutation invariant and safe for one node") {
  Rng rng(19);
  Tensor pts = Tensor::uniform({7, 3}, -1, 1, rng);
  const double med = median_pairwise_distance(pts, DistanceMetric::euclidean);
  CHECK(med > 0.0);
  CHECK(median_pairwise_distance(Tensor::zeros({1, 3}), DistanceMetric::cosine) == 1.0);
}

TEST_CASE("sage with identity adjacency is a pointwise self-transform") {
  Rng rng(23);
  const std::int64_t a = 4, l = 3, d = 5;
  Tensor v = Tensor::uniform({a, l, d}, -1, 1, rng);
  SageParams p = random_sage(d, rng);
  AdjacencyMatrix eye;
  eye.size = a;
  eye.delta = 0.9;
  eye.sigma = 1.0;
  eye.weights.assign(static_cast<std::size_t>(a * a), 0.0);
  for (std::int64_t i = 0; i < a; ++i) eye.weights[static_cast<std::size_t>(i * a + i)] = 1.0;

  const auto got = sage_layer(v, eye, p).values();
  // expected: relu(W_self . v + bias), neighbor term zero
  for (std::int64_t i = 0; i < a; ++i)
    for (std::int64_t t = 0; t < l; ++t)
      for (std::int64_t f = 0; f < d; ++f) {
        double acc = p.bias.values()[f];
        for (std::int64_t g = 0; g < d; ++g)
          acc += v.values()[(i * l + t) * d + g] * p.w_self.values()[g * d + f];
        if (acc < 0) acc = 0;
        CHECK(got[static_cast<std::size_t>((i * l + t) * d + f)] ==
              doctest::Approx(acc).epsilon(1e-12));
      }

  // changing node j never leaks into node i != j
  Tensor v2 = Tensor::from(v.shape(), v.values());
  for (std::int64_t t = 0; t < l; ++t)
    for (std::int64_t f = 0; f < d; ++f) v2.values_mut()[(0 * l + t) * d + f] += 3.0;
  const auto got2 = sage_layer(v2, eye, p).values();
  for (std::int64_t i = 1; i < a; ++i)
    for (std::int64_t t = 0; t < l; ++t)
      for (std::int64_t f = 0; f < d; ++f)
        CHECK(got2[static_cast<std::size_t>((i * l + t) * d + f)] ==
              got[static_cast<std::size_t>((i * l + t) * d + f)]);
}

TEST_CASE("sage on identical fully connected nodes collapses to (W_self+W_neigh)v + b") {
  Rng rng(29);
  const std::int64_t a = 4, d = 3;
  std::vector<double> row = {0.3, -0.7, 1.2};
  std::vector<double> vv;
  for (std::int64_t i = 0; i < a; ++i) vv.insert(vv.end(), row.begin(), row.end());
  Tensor v = Tensor::from({a, 1, d}, vv);
  SageParams p = random_sage(d, rng);
  AdjacencyMatrix full;
  full.size = a;
  full.delta = 0.0;
  full.sigma = 1.0;
  full.weights.assign(static_cast<std::size_t>(a * a), 0.7);
  for (std::int64_t i = 0; i < a; ++i) full.weights[static_cast<std::size_t>(i * a + i)] = 1.0;

  const auto got = sage_layer(v, full, p).values();
  for (std::int64_t f = 0; f < d; ++f) {
    double acc = p.bias.values()[f];
    for (std::int64_t g = 0; g < d; ++g)
      acc += row[static_cast<std::size_t>(g)] *
             (p.w_self.values()[g * d + f] + p.w_neigh.values()[g * d + f]);
    if (acc < 0) acc = 0;
    for (std::int64_t i = 0; i < a; ++i)
      CHECK(got[static_cast<std::size_t>(i * d + f)] == doctest::Approx(acc).epsilon(1e-12));
  }
}

TEST_CASE("sage equals the loop oracle on random 5-node graphs") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    const std::int64_t a = 5, l = 2, d = 4;
    Tensor v = Tensor::uniform({a, l, d}, -1, 1, rng);
    Tensor pooled = Tensor::uniform({a, d}, -1, 1, rng);
    const auto adj = build_adjacency(pooled, 1.0, 0.35, DistanceMetric::cosine);
    SageParams p = random_sage(d, rng);
    const auto got = sage_layer(v, adj, p).values();
    const auto want = sage_loop_oracle(v, adj, p);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-10));
  }
}

TEST_CASE("sage output depends only on the node and its nonzero-weight neighbors") {
  Rng rng(31);
  const std::int64_t a = 5, d = 3;
  Tensor pooled = Tensor::uniform({a, d}, -1, 1, rng);
  auto adj = build_adjacency(pooled, 0.8, 0.45, DistanceMetric::cosine);
  // find a zero pair (i,j); if none, force one symmetrically
  std::int64_t zi = -1, zj = -1;
  for (std::int64_t i = 0; i < a && zi < 0; ++i)
    for (std::int64_t j = 0; j < a; ++j)
      if (i != j && adj.at(i, j) == 0.0) {
        zi = i;
        zj = j;
        break;
      }
  if (zi < 0) {
    zi = 0;
    zj = 1;
    adj.weights[static_cast<std::size_t>(zi * a + zj)] = 0.0;
    adj.weights[static_cast<std::size_t>(zj * a + zi)] = 0.0;
  }
  Tensor v = Tensor::uniform({a, 2, d}, -1, 1, rng);
  SageParams p = random_sage(d, rng);
  const auto base = sage_layer(v, adj, p).values();
  Tensor v2 = Tensor::from(v.shape(), v.values());
  for (std::int64_t t = 0; t < 2; ++t)
    for (std::int64_t f = 0; f < d; ++f) v2.values_mut()[(zj * 2 + t) * d + f] += 5.0;
  const auto pert = sage_layer(v2, adj, p).values();
  for (std::int64_t t = 0; t < 2; ++t)
    for (std::int64_t f = 0; f < d; ++f)
      CHECK(pert[static_cast<std::size_t>((zi * 2 + t) * d + f)] ==
            base[static_cast<std::size_t>((zi * 2 + t) * d + f)]);
}

TEST_CASE("sage weights pass finite-difference checks") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(37);
  const std::int64_t a = 4, l = 2, d = 3;
  Tensor v = Tensor::uniform({a, l, d}, -1, 1, rng, true);
  Tensor pooled = Tensor::uniform({a, d}, -1, 1, rng);
  const auto adj = build_adjacency(pooled, 1.0, 0.3, DistanceMetric::cosine);
  SageParams p = random_sage(d, rng);
  const auto r = check_gradients(
      [&]() { return mean_all(sage_layer(v, adj, p)); },
      {v, p.w_self, p.w_neigh, p.bias}, {"v", "w_self", "w_neigh", "bias"});
  INFO(r.worst, " rel err ", r.max_rel_err);
  CHECK(r.ok);
}

TEST_CASE("adjacency csv dump has one row per node") {
  Tensor pts = Tensor::from({2, 2}, {1, 0, 0, 1});
  const auto adj = build_adjacency(pts, 1.0, 0.0, DistanceMetric::euclidean);
  const std::string path = "/tmp/readmit_test_adj.csv";
  dump_adjacency_csv(adj, path);
  std::ifstream in(path);
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 1);
  }
  CHECK(rows == 2);
  std::remove(path.c_str());
}

TEST_SUITE_END();
