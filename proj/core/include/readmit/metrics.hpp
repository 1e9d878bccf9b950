#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace readmit {

struct MetricsReport {
  double auc = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double acc = 0.0;
  std::int64_t n_pos = 0;
  std::int64_t n_neg = 0;
  double threshold = 0.5;

  std::string to_json() const;
};

// Fraction of (score >= threshold) == label.
double accuracy(const std::vector<double>& scores, const std::vector<int>& labels,
                double threshold = 0.5);

// Mann-Whitney AUC with midrank tie handling: P(s_pos > s_neg) + 0.5 P(tie).
// Dispatches to pairwise counting for n <= 10^4 and the rank form beyond;
// both are exposed for cross-checking. Requires at least one sample of each
// class.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

namespace detail {
double auc_pairwise(const std::vector<double>& scores, const std::vector<int>& labels);
double auc_by_ranks(const std::vector<double>& scores, const std::vector<int>& labels);
}  // namespace detail

// AUC variance from positive/negative placement values (the fast structural
// form), normal-approximation CI clipped to [0,1]. Needs >= 2 samples per
// class; zero variance degenerates to a point interval.
struct DelongCi {
  double auc;
  double low;
  double high;
  double variance;
};
DelongCi delong_ci(const std::vector<double>& scores, const std::vector<int>& labels,
                   double level = 0.95);

MetricsReport evaluate_scores(const std::vector<double>& scores, const std::vector<int>& labels,
                              double threshold = 0.5);

}  // namespace readmit
