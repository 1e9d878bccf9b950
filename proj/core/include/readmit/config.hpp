#pragma once

#include <string>
#include <vector>

#include "readmit/cohort.hpp"
#include "readmit/model.hpp"
#include "readmit/optim.hpp"

namespace readmit {

struct PathsConfig {
  std::string out_dir = ".";
  std::string cohort = "cohort.jsonl";
  std::string checkpoint = "checkpoint.json";
  std::string history = "history.jsonl";
  std::string report = "report.json";
  std::string ablation = "ablation.json";
  std::string note_embeddings;  // optional precomputed chunk vectors
  std::string ehr_features;     // optional external feature files
  std::string image_features;
};

// Effective configuration of one run: defaults, overlaid by a JSON config
// file, overlaid by dotted-key overrides ("model.d=32"). One root seed
// drives every random stream.
struct RunConfig {
  std::uint64_t seed = 42;
  int d_note = 48;  // hashing-embedder width; file-backed providers set their own
  ModelConfig model;
  TrainConfig train;
  SyntheticSpec synth;
  PathsConfig paths;

  std::string to_json_string() const;
  // Unknown keys are usage errors so typos cannot silently vanish.
  static RunConfig from_json_string(const std::string& text);

  void apply_override(const std::string& dotted_assignment);  // "train.lr=0.01"

  // out_dir-relative unless absolute
  std::string resolve(const std::string& path) const;
};

RunConfig load_run_config(const std::string& config_path /* empty = defaults */,
                          const std::vector<std::string>& overrides);

std::string precision_name(Precision p);
Precision precision_from_name(const std::string& name);

}  // namespace readmit
