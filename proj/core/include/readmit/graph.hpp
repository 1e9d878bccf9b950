#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "readmit/tensor.hpp"

namespace readmit {

enum class DistanceMetric { cosine, euclidean };

std::string metric_name(DistanceMetric m);
DistanceMetric metric_from_name(const std::string& name);

// Thresholded Gaussian-kernel similarity over admissions. Symmetric, unit
// diagonal, every entry either 0 or in [delta, 1].
struct AdjacencyMatrix {
  std::int64_t size = 0;
  std::vector<double> weights;  // size x size, row-major
  double delta = 0.0;
  double sigma = 1.0;

  double at(std::int64_t i, std::int64_t j) const { return weights[i * size + j]; }
};

// Masked mean over the time axis; the node representation used for pairwise
// distances. values: [a,l,d], mask: [a,l].
Tensor pool_node_features(const Tensor& values, const Tensor& mask);

double pairwise_distance(const double* x, const double* y, std::int64_t d, DistanceMetric metric);

// Median off-diagonal pairwise distance; 1.0 when there are no pairs.
double median_pairwise_distance(const Tensor& pooled, DistanceMetric metric);

// weights[i][j] = exp(-dist(v_i,v_j)^2 / sigma^2), zeroed below delta,
// diagonal forced to 1. sigma must be positive, delta in [0,1).
AdjacencyMatrix build_adjacency(const Tensor& pooled, double sigma, double delta,
                                DistanceMetric metric);

struct SageParams {
  Tensor w_self;   // d x d
  Tensor w_neigh;  // d x d
  Tensor bias;     // d
};

// One GraphSAGE step applied independently at every timestep with shared
// weights: h_i = relu(W_self v_i + W_neigh (sum_j w_ij v_j / sum_j w_ij) + b)
// over nonzero off-diagonal neighbors. Isolated nodes get a zero neighbor
// term. values: [a,l,d].
Tensor sage_layer(const Tensor& values, const AdjacencyMatrix& adj, const SageParams& params);

// Row-normalized off-diagonal weight operator as a constant tensor [a,a];
// rows of isolated nodes are all zero.
Tensor neighbor_operator(const AdjacencyMatrix& adj);

// Inspection dump: one row per line, comma-separated weights.
void dump_adjacency_csv(const AdjacencyMatrix& adj, const std::string& path);

}  // namespace readmit
