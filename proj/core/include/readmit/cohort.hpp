#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace readmit {

enum class Split { train, val, test };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

// One hospital admission: the patient's visit history per modality (most
// recent last), the note token stream, and the readmission label.
struct AdmissionRecord {
  std::string admission_id;
  std::string patient_id;
  int label = 0;  // readmitted within the window
  Split split = Split::train;
  std::vector<std::vector<double>> ehr;    // visits x d_ehr_raw
  std::vector<std::vector<double>> image;  // visits x d_img_raw
  std::vector<std::string> note_tokens;

  bool operator==(const AdmissionRecord&) const = default;
};

struct Cohort {
  std::vector<AdmissionRecord> admissions;

  std::size_t size() const { return admissions.size(); }
  std::vector<int> indices_of(Split s) const;
  std::vector<int> labels() const;

  bool operator==(const Cohort&) const = default;
};

// Generator for desk-scale cohorts with a cross-modal planted signal: one
// latent vector per admission drives the label; disjoint latent blocks leak
// into each modality, so no single modality carries the whole signal and
// multimodal fusion has measurable headroom.
struct SyntheticSpec {
  int n_admissions = 600;
  double prevalence = 0.17;
  int latent_dim = 6;  // split into three blocks (ehr / image / note)
  double s_ehr = 1.0;
  double s_img = 1.0;
  double s_note = 1.0;
  double noise = 0.5;
  double missing_note_prob = 0.1;
  std::uint64_t seed = 42;

  int d_ehr_raw = 16;
  int d_img_raw = 16;
  int max_visits = 12;

  // label logit scale; larger = more predictable labels
  double label_slope = 3.5;
  // token mixture sharpness for the note block
  double note_sharpness = 2.0;
  int vocab_size = 40;  // per mixture component
  int min_note_tokens = 40;
  int max_note_tokens = 1200;
  double second_admission_prob = 0.15;  // share of patients with two admissions
};

Cohort generate_synthetic_cohort(const SyntheticSpec& spec);

// Stratified, patient-grouped split (admissions of one patient never
// straddle splits). Deterministic under seed. Fractions must sum to 1.
void split_cohort(Cohort& cohort, double train_frac, double val_frac, double test_frac,
                  std::uint64_t seed);

// JSON-lines, one admission per line; load(save(x)) == x.
void save_cohort(const Cohort& cohort, const std::string& path);
Cohort load_cohort(const std::string& path);

}  // namespace readmit
