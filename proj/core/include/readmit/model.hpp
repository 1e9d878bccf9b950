#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "readmit/cohort.hpp"
#include "readmit/graph.hpp"
#include "readmit/modality.hpp"
#include "readmit/transformer.hpp"

namespace readmit {

// What the fusion stage consumes from each temporal branch: the full output
// sequences (token axis 9+9+25) or just the summary tokens (1+1+25).
enum class FusionInput { sequence, cls };

std::string fusion_input_name(FusionInput f);
FusionInput fusion_input_from_name(const std::string& name);

struct ModelConfig {
  int d = 64;
  int heads = 4;
  int d_ff = 0;  // 0 = 4*d
  int temporal_layers = 1;
  int fusion_layers = 1;
  double dropout = 0.1;
  double delta = 0.5;
  double sigma = 0.0;  // 0 = median pairwise distance heuristic
  DistanceMetric metric = DistanceMetric::cosine;
  FusionInput fusion_input = FusionInput::sequence;
  bool use_ehr = true;
  bool use_image = true;
  bool use_note = true;

  int resolved_d_ff() const { return d_ff > 0 ? d_ff : 4 * d; }
  void validate() const;
};

enum class Init { fan_in_uniform, zeros, ones };

// All learnable weights, registered exactly once each, iterated in
// registration order.
class ParameterStore {
 public:
  Tensor create(const std::string& name, Shape shape, Init init, Rng& rng);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::int64_t total_coords() const;
  void zero_grads();

  std::map<std::string, std::vector<double>> snapshot() const;
  void restore(const std::map<std::string, std::vector<double>>& snap);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

// Everything a forward pass needs for one admission batch, prepared once
// per run: raw feature constants, per-modality adjacency (built on the full
// batch, transductively), embedded note chunks and split bookkeeping.
struct PreparedBatch {
  std::int64_t a = 0;
  ModalityFeatures ehr;
  ModalityFeatures image;
  AdjacencyMatrix ehr_adj;
  AdjacencyMatrix image_adj;
  Tensor note_raw;   // [a, kMaxChunks, d_note]
  Tensor note_mask;  // [a, kMaxChunks]
  Tensor labels;     // [a]
  Tensor train_mask, val_mask, test_mask;  // [a] of {0,1}
  std::vector<int> train_idx, val_idx, test_idx;
  std::vector<int> label_vec;
};

class Model {
 public:
  Model(const ModelConfig& cfg, int d_ehr_raw, int d_img_raw, int d_note, std::uint64_t seed);

  PreparedBatch prepare(const Cohort& cohort, const EmbeddingProvider& provider,
                        const ModalityFeatures* ehr_override = nullptr,
                        const ModalityFeatures* image_override = nullptr) const;

  // One spatiotemporal branch: graph layer, positional encoding, summary
  // token, temporal encoder stack. Returns the token sequence (summary
  // stripped) and the summary vector.
  std::pair<SequenceBatch, Tensor> st_transformer(const ModalityFeatures& projected,
                                                  const AdjacencyMatrix& adj,
                                                  const std::string& branch, bool training,
                                                  Rng* rng) const;

  // Token-axis concatenation of the active branches.
  SequenceBatch fuse(const SequenceBatch* ehr_seq, const Tensor* ehr_cls,
                     const SequenceBatch* img_seq, const Tensor* img_cls,
                     const Tensor* note_values, const Tensor* note_mask) const;

  // Full forward pass to one logit per admission.
  Tensor forward(const PreparedBatch& batch, bool training, Rng* dropout_rng) const;

  const ModelConfig& config() const { return cfg_; }
  int d_ehr_raw() const { return d_ehr_raw_; }
  int d_img_raw() const { return d_img_raw_; }
  int d_note() const { return d_note_; }
  std::uint64_t seed() const { return seed_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  void save_checkpoint(const std::string& path) const;
  static Model load_checkpoint(const std::string& path);

 private:
  TransformerParams layer_params(const std::string& prefix) const;
  void register_parameters(Rng& rng);

  ModelConfig cfg_;
  int d_ehr_raw_ = 0;
  int d_img_raw_ = 0;
  int d_note_ = 0;
  std::uint64_t seed_ = 0;
  ParameterStore params_;
};

}  // namespace readmit
