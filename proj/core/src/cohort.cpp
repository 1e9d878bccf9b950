#include "readmit/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "readmit/errors.hpp"
#include "readmit/rng.hpp"

namespace readmit {

using json = nlohmann::json;

std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw DataError("unknown split tag '" + name + "'");
}

std::vector<int> Cohort::indices_of(Split s) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < admissions.size(); ++i)
    if (admissions[i].split == s) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> Cohort::labels() const {
  std::vector<int> out;
  out.reserve(admissions.size());
  for (const auto& a : admissions) out.push_back(a.label);
  return out;
}

namespace {

double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

void validate(const SyntheticSpec& s) {
  if (s.n_admissions < 10) throw ContractError("synthetic spec: n_admissions must be >= 10");
  if (s.prevalence <= 0.0 || s.prevalence >= 1.0)
    throw ContractError("synthetic spec: prevalence must lie in (0,1)");
  if (s.latent_dim < 3) throw ContractError("synthetic spec: latent_dim must be >= 3");
  if (s.s_ehr < 0 || s.s_img < 0 || s.s_note < 0)
    throw ContractError("synthetic spec: signal strengths must be >= 0");
  if (s.noise < 0) throw ContractError("synthetic spec: noise must be >= 0");
  if (s.missing_note_prob < 0 || s.missing_note_prob > 1)
    throw ContractError("synthetic spec: missing_note_prob must lie in [0,1]");
  if (s.d_ehr_raw < 1 || s.d_img_raw < 1 || s.max_visits < 1 || s.vocab_size < 2)
    throw ContractError("synthetic spec: dimensions must be positive");
}

// Dense mixing of one latent block into d_raw feature channels.
std::vector<std::vector<double>> mixing_matrix(int d_raw, int block, Rng& rng) {
  std::vector<std::vector<double>> m(d_raw, std::vector<double>(block));
  const double scl = 1.0 / std::sqrt(static_cast<double>(block));
  for (auto& row : m)
    for (auto& v : row) v = scl * rng.normal();
  return m;
}

}  // namespace

Cohort generate_synthetic_cohort(const SyntheticSpec& spec) {
  validate(spec);
  Rng root(spec.seed);
  Rng rng_struct = root.child(1);
  Rng rng_latent = root.child(2);
  Rng rng_label = root.child(3);
  Rng rng_feat = root.child(4);
  Rng rng_note = root.child(5);
  Rng rng_patient = root.child(6);

  const int k = spec.latent_dim;
  const int k_e = k / 3;
  const int k_i = k / 3;
  const int k_n = k - k_e - k_i;
  const auto mix_e = mixing_matrix(spec.d_ehr_raw, k_e, rng_struct);
  const auto mix_i = mixing_matrix(spec.d_img_raw, k_i, rng_struct);

  const int n = spec.n_admissions;
  std::vector<std::vector<double>> z(n, std::vector<double>(k));
  for (auto& zi : z)
    for (auto& v : zi) v = rng_latent.normal();

  // label logit: slope-scaled mean of all latents, intercept tuned so the
  // expected prevalence matches the target
  const double w = spec.label_slope / std::sqrt(static_cast<double>(k));
  std::vector<double> raw(n);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : z[i]) s += v;
    raw[i] = w * s;
  }
  double lo = -50.0, hi = 50.0;
  for (int it = 0; it < 200; ++it) {
    const double b = 0.5 * (lo + hi);
    double mean = 0.0;
    for (double r : raw) mean += sigmoid(r + b);
    mean /= static_cast<double>(n);
    (mean < spec.prevalence ? lo : hi) = b;
  }
  const double intercept = 0.5 * (lo + hi);

  Cohort cohort;
  cohort.admissions.resize(n);
  int patient_counter = 0;
  int remaining_in_patient = 0;
  for (int i = 0; i < n; ++i) {
    AdmissionRecord& rec = cohort.admissions[i];
    std::ostringstream aid;
    aid << "adm" << std::setw(6) << std::setfill('0') << i;
    rec.admission_id = aid.str();
    if (remaining_in_patient == 0) {
      ++patient_counter;
      remaining_in_patient = rng_patient.bernoulli(spec.second_admission_prob) ? 2 : 1;
    }
    std::ostringstream pid;
    pid << "pat" << std::setw(6) << std::setfill('0') << patient_counter;
    rec.patient_id = pid.str();
    --remaining_in_patient;

    rec.label = rng_label.bernoulli(sigmoid(raw[i] + intercept)) ? 1 : 0;

    const int visits = static_cast<int>(rng_feat.uniform_int(1, spec.max_visits));
    auto emit_visits = [&](const std::vector<std::vector<double>>& mix, int d_raw, int offset,
                           int block, double strength) {
      std::vector<std::vector<double>> vs(visits, std::vector<double>(d_raw));
      for (int t = 0; t < visits; ++t)
        for (int f = 0; f < d_raw; ++f) {
          double signal = 0.0;
          for (int j = 0; j < block; ++j) signal += mix[f][j] * z[i][offset + j];
          vs[t][f] = strength * signal + spec.noise * rng_feat.normal();
        }
      return vs;
    };
    rec.ehr = emit_visits(mix_e, spec.d_ehr_raw, 0, k_e, spec.s_ehr);
    rec.image = emit_visits(mix_i, spec.d_img_raw, k_e, k_i, spec.s_img);

    if (!rng_note.bernoulli(spec.missing_note_prob)) {
      double zn = 0.0;
      for (int j = 0; j < k_n; ++j) zn += z[i][k_e + k_i + j];
      zn /= std::sqrt(static_cast<double>(k_n));
      const double p_pos = sigmoid(spec.s_note * spec.note_sharpness * zn);
      const int len =
          static_cast<int>(rng_note.uniform_int(spec.min_note_tokens, spec.max_note_tokens));
      rec.note_tokens.reserve(len);
      for (int t = 0; t < len; ++t) {
        const bool from_pos = rng_note.bernoulli(p_pos);
        const int word = static_cast<int>(rng_note.uniform_int(0, spec.vocab_size - 1));
        std::ostringstream tok;
        tok << (from_pos ? 'p' : 'n') << std::setw(3) << std::setfill('0') << word;
        rec.note_tokens.push_back(tok.str());
      }
    }
  }

  split_cohort(cohort, 0.64, 0.16, 0.20, root.child(7).seed());
  return cohort;
}

void split_cohort(Cohort& cohort, double train_frac, double val_frac, double test_frac,
                  std::uint64_t seed) {
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
    throw ContractError("split_cohort: fractions must sum to 1");
  if (cohort.admissions.empty()) return;

  // patient groups, deterministic base order
  std::map<std::string, std::vector<int>> groups;
  for (std::size_t i = 0; i < cohort.admissions.size(); ++i)
    groups[cohort.admissions[i].patient_id].push_back(static_cast<int>(i));

  struct Group {
    std::vector<int> members;
    bool has_pos;
  };
  std::vector<Group> pos_groups, neg_groups;
  for (auto& [pid, members] : groups) {
    bool has_pos = false;
    for (int i : members) has_pos = has_pos || cohort.admissions[i].label == 1;
    (has_pos ? pos_groups : neg_groups).push_back({members, has_pos});
  }

  Rng rng(seed);
  auto shuffle = [&rng](std::vector<Group>& v) {
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  };
  shuffle(pos_groups);
  shuffle(neg_groups);

  const double total = static_cast<double>(cohort.admissions.size());
  const double target[3] = {train_frac * total, val_frac * total, test_frac * total};
  double assigned[3] = {0.0, 0.0, 0.0};
  auto assign_stratum = [&](const std::vector<Group>& stratum) {
    std::size_t next = 0;
    // seed one group per nonempty split so small strata reach every split
    for (int s = 0; s < 3 && next < stratum.size(); ++s) {
      if (target[s] <= 0.0) continue;
      const auto& g = stratum[next++];
      for (int i : g.members) cohort.admissions[i].split = static_cast<Split>(s);
      assigned[s] += static_cast<double>(g.members.size());
    }
    for (; next < stratum.size(); ++next) {
      // lowest fill ratio wins, so each stratum spreads proportionally
      const auto& g = stratum[next];
      int best = -1;
      double best_ratio = 0.0;
      for (int s = 0; s < 3; ++s) {
        if (target[s] <= 0.0) continue;
        const double ratio = (assigned[s] + static_cast<double>(g.members.size())) / target[s];
        if (best < 0 || ratio < best_ratio) {
          best = s;
          best_ratio = ratio;
        }
      }
      if (best < 0) best = 0;
      for (int i : g.members) cohort.admissions[i].split = static_cast<Split>(best);
      assigned[best] += static_cast<double>(g.members.size());
    }
  };
  assign_stratum(pos_groups);
  assign_stratum(neg_groups);

  for (int s = 0; s < 3; ++s) {
    const Split sp = static_cast<Split>(s);
    int pos = 0, neg = 0;
    for (const auto& a : cohort.admissions)
      if (a.split == sp) (a.label ? pos : neg)++;
    if (pos == 0 || neg == 0)
      throw ContractError("split_cohort: split '" + split_name(sp) +
                          "' lacks a class (pos=" + std::to_string(pos) +
                          ", neg=" + std::to_string(neg) + ")");
  }
}

namespace {

json record_to_json(const AdmissionRecord& r) {
  json j;
  j["admission_id"] = r.admission_id;
  j["patient_id"] = r.patient_id;
  j["label"] = r.label;
  j["split"] = split_name(r.split);
  j["ehr"] = r.ehr;
  j["image"] = r.image;
  j["note_tokens"] = r.note_tokens;
  return j;
}

std::vector<std::vector<double>> parse_matrix(const json& j, const char* field, int line_no) {
  std::vector<std::vector<double>> out;
  std::size_t width = 0;
  for (const auto& row : j) {
    std::vector<double> r;
    for (const auto& v : row) {
      const double x = v.get<double>();
      if (!std::isfinite(x))
        throw DataError("line " + std::to_string(line_no) + ": non-finite value in '" + field +
                        "'");
      r.push_back(x);
    }
    if (out.empty())
      width = r.size();
    else if (r.size() != width)
      throw DataError("line " + std::to_string(line_no) + ": ragged rows in '" + field + "'");
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

void save_cohort(const Cohort& cohort, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& r : cohort.admissions) out << record_to_json(r).dump() << '\n';
  if (!out) throw DataError("failed writing '" + path + "'");
}

Cohort load_cohort(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open cohort file '" + path + "'");
  Cohort cohort;
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": malformed JSON (" + e.what() + ")");
    }
    try {
      AdmissionRecord r;
      r.admission_id = j.at("admission_id").get<std::string>();
      r.patient_id = j.at("patient_id").get<std::string>();
      r.label = j.at("label").get<int>();
      if (r.label != 0 && r.label != 1)
        throw DataError("line " + std::to_string(line_no) + ": label must be 0/1");
      r.split = split_from_name(j.at("split").get<std::string>());
      r.ehr = parse_matrix(j.at("ehr"), "ehr", line_no);
      r.image = parse_matrix(j.at("image"), "image", line_no);
      if (r.ehr.empty())
        throw DataError("line " + std::to_string(line_no) + ": admission '" + r.admission_id +
                        "' has no ehr visits");
      for (const auto& t : j.at("note_tokens")) r.note_tokens.push_back(t.get<std::string>());
      if (!seen.insert(r.admission_id).second)
        throw DataError("line " + std::to_string(line_no) + ": duplicate admission id '" +
                        r.admission_id + "'");
      cohort.admissions.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": bad record (" + std::string(e.what()) +
                      ")");
    }
  }
  return cohort;
}

}  // namespace readmit
