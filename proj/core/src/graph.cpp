#include "readmit/graph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "readmit/errors.hpp"

namespace readmit {

std::string metric_name(DistanceMetric m) {
  return m == DistanceMetric::cosine ? "cosine" : "euclidean";
}

DistanceMetric metric_from_name(const std::string& name) {
  if (name == "cosine") return DistanceMetric::cosine;
  if (name == "euclidean") return DistanceMetric::euclidean;
  throw UsageError("unknown distance metric '" + name + "'");
}

Tensor pool_node_features(const Tensor& values, const Tensor& mask) {
  return masked_mean_time(values, mask);
}

double pairwise_distance(const double* x, const double* y, std::int64_t d, DistanceMetric metric) {
  if (metric == DistanceMetric::euclidean) {
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = x[j] - y[j];
      s += c * c;
    }
    return std::sqrt(s);
  }
  double dot = 0.0, nx = 0.0, ny = 0.0;
  for (std::int64_t j = 0; j < d; ++j) {
    dot += x[j] * y[j];
    nx += x[j] * x[j];
    ny += y[j] * y[j];
  }
  if (nx <= 0.0 || ny <= 0.0) return 1.0;  // zero vector: treat as orthogonal
  return 1.0 - dot / std::sqrt(nx * ny);
}

double median_pairwise_distance(const Tensor& pooled, DistanceMetric metric) {
  const std::int64_t a = pooled.extent(0);
  const std::int64_t d = pooled.extent(1);
  if (a < 2) return 1.0;
  const double* p = pooled.values().data();
  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>(a * (a - 1) / 2));
  for (std::int64_t i = 0; i < a; ++i)
    for (std::int64_t j = i + 1; j < a; ++j)
      dists.push_back(pairwise_distance(p + i * d, p + j * d, d, metric));
  std::sort(dists.begin(), dists.end());
  const std::size_t n = dists.size();
  return n % 2 == 1 ? dists[n / 2] : 0.5 * (dists[n / 2 - 1] + dists[n / 2]);
}

AdjacencyMatrix build_adjacency(const Tensor& pooled, double sigma, double delta,
                                DistanceMetric metric) {
  if (sigma <= 0.0) throw ContractError("build_adjacency: sigma must be positive");
  if (delta < 0.0 || delta >= 1.0) throw ContractError("build_adjacency: delta must lie in [0,1)");
  if (pooled.rank() != 2)
    throw ShapeError("build_adjacency: pooled features must be [a x d], got " +
                     shape_str(pooled.shape()));
  const std::int64_t a = pooled.extent(0);
  const std::int64_t d = pooled.extent(1);
  AdjacencyMatrix adj;
  adj.size = a;
  adj.delta = delta;
  adj.sigma = sigma;
  adj.weights.assign(static_cast<std::size_t>(a * a), 0.0);
  const double* p = pooled.values().data();
  const double s2 = sigma * sigma;
  for (std::int64_t i = 0; i < a; ++i) {
    adj.weights[i * a + i] = 1.0;
    for (std::int64_t j = i + 1; j < a; ++j) {
      const double dist = pairwise_distance(p + i * d, p + j * d, d, metric);
      double w = std::exp(-dist * dist / s2);
      if (w < delta) w = 0.0;
      adj.weights[i * a + j] = w;
      adj.weights[j * a + i] = w;
    }
  }
  return adj;
}

Tensor neighbor_operator(const AdjacencyMatrix& adj) {
  const std::int64_t a = adj.size;
  std::vector<double> op(static_cast<std::size_t>(a * a), 0.0);
  for (std::int64_t i = 0; i < a; ++i) {
    double total = 0.0;
    for (std::int64_t j = 0; j < a; ++j)
      if (j != i) total += adj.weights[i * a + j];
    if (total <= 0.0) continue;  // isolated node
    for (std::int64_t j = 0; j < a; ++j)
      if (j != i) op[i * a + j] = adj.weights[i * a + j] / total;
  }
  return Tensor::from({a, a}, std::move(op));
}

Tensor sage_layer(const Tensor& values, const AdjacencyMatrix& adj, const SageParams& params) {
  if (values.rank() != 3)
    throw ShapeError("sage_layer: values must be [a x l x d], got " + shape_str(values.shape()));
  if (values.extent(0) != adj.size)
    throw ShapeError("sage_layer: " + std::to_string(values.extent(0)) + " nodes vs adjacency " +
                     std::to_string(adj.size));
  const Tensor op = neighbor_operator(adj);
  const Tensor by_time = swap_axes(values, 0, 1);              // [l,a,d]
  const Tensor agg = matmul(op, by_time);                      // weighted neighbor mean
  const Tensor self_term = matmul(by_time, params.w_self);     // [l,a,d]
  const Tensor neigh_term = matmul(agg, params.w_neigh);
  const Tensor h = relu(add(add(self_term, neigh_term), params.bias));
  return swap_axes(h, 0, 1);
}

void dump_adjacency_csv(const AdjacencyMatrix& adj, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.precision(17);
  for (std::int64_t i = 0; i < adj.size; ++i) {
    for (std::int64_t j = 0; j < adj.size; ++j) {
      if (j) out << ',';
      out << adj.weights[i * adj.size + j];
    }
    out << '\n';
  }
}

}  // namespace readmit
