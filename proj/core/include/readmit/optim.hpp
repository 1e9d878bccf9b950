#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "readmit/model.hpp"
#include "readmit/tensor.hpp"

namespace readmit {

// Numerically stable binary cross entropy on logits (the sigmoid lives in
// here). include selects the admissions that enter the objective; pass an
// undefined tensor to include everything.
Tensor bce_loss(const Tensor& logits, const Tensor& labels, const Tensor& include = Tensor(),
                double pos_weight = 1.0);

// Standard bias-corrected Adam over a ParameterStore. step() consumes the
// accumulated gradients and zeroes them afterward; a non-finite gradient
// aborts with a diagnostic naming the parameter.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(ParameterStore& params, double lr = 0.001, double beta1 = 0.9,
                         double beta2 = 0.999, double eps = 1e-8);
  void step();
  std::int64_t steps() const { return t_; }
  double lr() const { return lr_; }

 private:
  ParameterStore& params_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainConfig {
  double lr = 0.001;
  int epochs = 300;
  bool early_stop = true;
  int patience = 30;
  // stop as soon as validation AUC reaches this value; 0 disables
  double target_val_auc = 0.0;
  double pos_weight = 1.0;
  std::uint64_t seed = 42;
  Precision precision = Precision::f32;

  void validate() const;
};

struct EpochStats {
  int epoch;
  double train_loss;
  double val_auc;
  double val_acc;
};

struct TrainResult {
  std::vector<EpochStats> history;
  std::map<std::string, std::vector<double>> best_params;  // best validation AUC
  int best_epoch = -1;
  double best_val_auc = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

// Full-graph training: every epoch runs one forward/backward over the whole
// admission batch with the loss restricted to train nodes (validation and
// test admissions participate in the graph, never in the objective), then
// logs validation AUC/ACC from a dropout-free forward. The best-validation
// snapshot is retained; loss divergence aborts with the last good one.
TrainResult train_model(Model& model, const PreparedBatch& batch, const TrainConfig& cfg);

// Dropout-free forward; sigmoid scores per admission.
std::vector<double> predict_scores(const Model& model, const PreparedBatch& batch);

void write_history_jsonl(const std::vector<EpochStats>& history, const std::string& path);

}  // namespace readmit
