#include "readmit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "readmit/errors.hpp"

namespace readmit {

namespace {

constexpr double kZ975 = 1.959963984540054;  // Phi^-1(0.975)

void check_classes(const std::vector<double>& scores, const std::vector<int>& labels,
                   std::int64_t min_per_class, const char* op) {
  if (scores.size() != labels.size() || scores.empty())
    throw ContractError(std::string(op) + ": scores/labels size mismatch or empty");
  std::int64_t pos = 0, neg = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ContractError(std::string(op) + ": labels must be 0/1");
    (y ? pos : neg)++;
  }
  if (pos < min_per_class)
    throw ContractError(std::string(op) + ": needs >= " + std::to_string(min_per_class) +
                        " positive samples, got " + std::to_string(pos));
  if (neg < min_per_class)
    throw ContractError(std::string(op) + ": needs >= " + std::to_string(min_per_class) +
                        " negative samples, got " + std::to_string(neg));
}

// Midranks (1-based) of v in ascending order; ties share the average rank.
std::vector<double> midranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;  // average of ranks i+1..j+1
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double accuracy(const std::vector<double>& scores, const std::vector<int>& labels,
                double threshold) {
  if (scores.size() != labels.size() || scores.empty())
    throw ContractError("accuracy: scores/labels size mismatch or empty");
  std::int64_t hit = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const int pred = scores[i] >= threshold ? 1 : 0;
    if (pred == labels[i]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(scores.size());
}

namespace detail {

double auc_pairwise(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  std::int64_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      ++pairs;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

double auc_by_ranks(const std::vector<double>& scores, const std::vector<int>& labels) {
  const auto ranks = midranks(scores);
  double rank_sum = 0.0;
  double m = 0.0, n = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i]) {
      rank_sum += ranks[i];
      m += 1.0;
    } else {
      n += 1.0;
    }
  }
  return (rank_sum - m * (m + 1.0) / 2.0) / (m * n);
}

}  // namespace detail

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_classes(scores, labels, 1, "auc");
  if (scores.size() <= 10000) return detail::auc_pairwise(scores, labels);
  return detail::auc_by_ranks(scores, labels);
}

DelongCi delong_ci(const std::vector<double>& scores, const std::vector<int>& labels,
                   double level) {
  check_classes(scores, labels, 2, "delong_ci");
  if (level <= 0.0 || level >= 1.0) throw ContractError("delong_ci: level must lie in (0,1)");

  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] ? pos : neg).push_back(scores[i]);
  const double m = static_cast<double>(pos.size());
  const double n = static_cast<double>(neg.size());

  // Placement values via midranks: V10_i = P(neg < pos_i) + 0.5 P(tie),
  // computed from combined vs within-class ranks.
  std::vector<double> all = pos;
  all.insert(all.end(), neg.begin(), neg.end());
  const auto t_all = midranks(all);
  const auto t_pos = midranks(pos);
  const auto t_neg = midranks(neg);

  std::vector<double> v10(pos.size()), v01(neg.size());
  for (std::size_t i = 0; i < pos.size(); ++i) v10[i] = (t_all[i] - t_pos[i]) / n;
  for (std::size_t j = 0; j < neg.size(); ++j)
    v01[j] = 1.0 - (t_all[pos.size() + j] - t_neg[j]) / m;

  const double auc_hat = std::accumulate(v10.begin(), v10.end(), 0.0) / m;

  auto sample_var = [](const std::vector<double>& v, double mean) {
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return s / static_cast<double>(v.size() - 1);
  };
  const double s10 = sample_var(v10, auc_hat);
  const double mean01 = std::accumulate(v01.begin(), v01.end(), 0.0) / n;
  const double s01 = sample_var(v01, mean01);
  const double var = s10 / m + s01 / n;

  // z for the two-sided level; only 0.95 is used in practice so the constant
  // is exact there and approximated elsewhere via the error function.
  double z = kZ975;
  if (level != 0.95) {
    // invert Phi via bisection on erf
    const double target = 0.5 + level / 2.0;
    double lo = 0.0, hi = 10.0;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      (0.5 * (1.0 + std::erf(mid / std::sqrt(2.0))) < target ? lo : hi) = mid;
    }
    z = 0.5 * (lo + hi);
  }

  const double half = z * std::sqrt(std::max(var, 0.0));
  DelongCi ci;
  ci.auc = auc_hat;
  ci.variance = var;
  ci.low = std::max(0.0, auc_hat - half);
  ci.high = std::min(1.0, auc_hat + half);
  return ci;
}

MetricsReport evaluate_scores(const std::vector<double>& scores, const std::vector<int>& labels,
                              double threshold) {
  MetricsReport r;
  const auto ci = delong_ci(scores, labels);
  r.auc = ci.auc;
  r.ci_low = ci.low;
  r.ci_high = ci.high;
  r.acc = accuracy(scores, labels, threshold);
  r.threshold = threshold;
  for (int y : labels) (y ? r.n_pos : r.n_neg)++;
  return r;
}

std::string MetricsReport::to_json() const {
  std::ostringstream os;
  os.precision(17);
  os << "{\"auc\": " << auc << ", \"ci\": [" << ci_low << ", " << ci_high << "], \"acc\": " << acc
     << ", \"n_pos\": " << n_pos << ", \"n_neg\": " << n_neg << ", \"threshold\": " << threshold
     << "}";
  return os.str();
}

}  // namespace readmit
