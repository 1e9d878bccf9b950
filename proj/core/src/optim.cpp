#include "readmit/optim.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "readmit/errors.hpp"
#include "readmit/metrics.hpp"

namespace readmit {

Tensor bce_loss(const Tensor& logits, const Tensor& labels, const Tensor& include,
                double pos_weight) {
  return bce_with_logits(logits, labels, include, pos_weight);
}

AdamOptimizer::AdamOptimizer(ParameterStore& params, double lr, double beta1, double beta2,
                             double eps)
    : params_(params), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [name, t] : params_.entries()) {
    m_.emplace_back(t.values().size(), 0.0);
    v_.emplace_back(t.values().size(), 0.0);
  }
}

void AdamOptimizer::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const bool f32 = precision() == Precision::f32;
  std::size_t idx = 0;
  for (const auto& [name, t] : params_.entries()) {
    auto& m = m_[idx];
    auto& v = v_[idx];
    ++idx;
    Tensor tensor = t;  // shared handle; mutation hits the stored parameter
    const auto& grad = tensor.grad();
    auto& values = tensor.values_mut();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      if (!std::isfinite(g))
        throw NumericError("adam_step: non-finite gradient in parameter '" + name + "'");
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      double x = values[i] - lr_ * m_hat / (std::sqrt(v_hat) + eps_);
      values[i] = f32 ? static_cast<double>(static_cast<float>(x)) : x;
    }
  }
  params_.zero_grads();
}

void TrainConfig::validate() const {
  if (epochs < 1) throw UsageError("train.epochs must be >= 1");
  if (lr < 0.0) throw UsageError("train.lr must be >= 0");
  if (patience < 1) throw UsageError("train.patience must be >= 1");
  if (pos_weight <= 0.0) throw UsageError("train.pos_weight must be positive");
  if (target_val_auc < 0.0 || target_val_auc > 1.0)
    throw UsageError("train.target_val_auc must lie in [0,1]");
}

std::vector<double> predict_scores(const Model& model, const PreparedBatch& batch) {
  const Tensor logits = model.forward(batch, /*training=*/false, nullptr);
  std::vector<double> scores(logits.values().size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double z = logits.values()[i];
    scores[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  return scores;
}

namespace {

void gather(const std::vector<double>& scores, const std::vector<int>& labels,
            const std::vector<int>& idx, std::vector<double>& s_out, std::vector<int>& y_out) {
  s_out.clear();
  y_out.clear();
  for (int i : idx) {
    s_out.push_back(scores[static_cast<std::size_t>(i)]);
    y_out.push_back(labels[static_cast<std::size_t>(i)]);
  }
}

}  // namespace

TrainResult train_model(Model& model, const PreparedBatch& batch, const TrainConfig& cfg) {
  cfg.validate();
  if (batch.train_idx.empty()) throw ContractError("train: no training admissions");
  if (batch.val_idx.empty()) throw ContractError("train: no validation admissions");

  PrecisionGuard precision_guard(cfg.precision);
  Rng root(cfg.seed);
  AdamOptimizer adam(model.params(), cfg.lr);

  TrainResult result;
  result.best_params = model.params().snapshot();  // last-good fallback

  std::vector<double> val_scores;
  std::vector<int> val_labels;
  int epochs_since_best = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng dropout_rng = root.child(1000 + static_cast<std::uint64_t>(epoch));
    double loss_value = 0.0;
    {
      GradientTape tape;
      const Tensor logits = model.forward(batch, /*training=*/true, &dropout_rng);
      const Tensor loss = bce_loss(logits, batch.labels, batch.train_mask, cfg.pos_weight);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        result.aborted = true;
        result.abort_reason =
            "training loss diverged (non-finite) at epoch " + std::to_string(epoch);
        break;
      }
      tape.backward(loss);
    }
    try {
      adam.step();
    } catch (const NumericError& e) {
      result.aborted = true;
      result.abort_reason = e.what();
      break;
    }

    const auto scores = predict_scores(model, batch);
    gather(scores, batch.label_vec, batch.val_idx, val_scores, val_labels);
    const double val_auc = auc(val_scores, val_labels);
    const double val_acc = accuracy(val_scores, val_labels);
    result.history.push_back({epoch, loss_value, val_auc, val_acc});

    if (val_auc > result.best_val_auc || result.best_epoch < 0) {
      result.best_val_auc = val_auc;
      result.best_epoch = epoch;
      result.best_params = model.params().snapshot();
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
    }

    if (cfg.target_val_auc > 0.0 && val_auc >= cfg.target_val_auc) break;
    if (cfg.early_stop && epochs_since_best >= cfg.patience) break;
  }
  return result;
}

void write_history_jsonl(const std::vector<EpochStats>& history, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& e : history) {
    nlohmann::json j;
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    j["val_auc"] = e.val_auc;
    j["val_acc"] = e.val_acc;
    out << j.dump() << '\n';
  }
}

}  // namespace readmit
