#include "readmit/config.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "readmit/errors.hpp"

namespace readmit {

using json = nlohmann::json;

std::string precision_name(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

Precision precision_from_name(const std::string& name) {
  if (name == "f64") return Precision::f64;
  if (name == "f32") return Precision::f32;
  throw UsageError("unknown precision '" + name + "' (f32 or f64)");
}

namespace {

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["d_note"] = c.d_note;

  json m;
  m["d"] = c.model.d;
  m["heads"] = c.model.heads;
  m["d_ff"] = c.model.d_ff;
  m["temporal_layers"] = c.model.temporal_layers;
  m["fusion_layers"] = c.model.fusion_layers;
  m["dropout"] = c.model.dropout;
  m["delta"] = c.model.delta;
  m["sigma"] = c.model.sigma;
  m["metric"] = metric_name(c.model.metric);
  m["fusion_input"] = fusion_input_name(c.model.fusion_input);
  m["use_ehr"] = c.model.use_ehr;
  m["use_image"] = c.model.use_image;
  m["use_note"] = c.model.use_note;
  j["model"] = m;

  json t;
  t["lr"] = c.train.lr;
  t["epochs"] = c.train.epochs;
  t["early_stop"] = c.train.early_stop;
  t["patience"] = c.train.patience;
  t["target_val_auc"] = c.train.target_val_auc;
  t["pos_weight"] = c.train.pos_weight;
  t["precision"] = precision_name(c.train.precision);
  j["train"] = t;

  json s;
  s["n_admissions"] = c.synth.n_admissions;
  s["prevalence"] = c.synth.prevalence;
  s["latent_dim"] = c.synth.latent_dim;
  s["s_ehr"] = c.synth.s_ehr;
  s["s_img"] = c.synth.s_img;
  s["s_note"] = c.synth.s_note;
  s["noise"] = c.synth.noise;
  s["missing_note_prob"] = c.synth.missing_note_prob;
  s["d_ehr_raw"] = c.synth.d_ehr_raw;
  s["d_img_raw"] = c.synth.d_img_raw;
  s["max_visits"] = c.synth.max_visits;
  s["label_slope"] = c.synth.label_slope;
  s["note_sharpness"] = c.synth.note_sharpness;
  s["vocab_size"] = c.synth.vocab_size;
  s["min_note_tokens"] = c.synth.min_note_tokens;
  s["max_note_tokens"] = c.synth.max_note_tokens;
  s["second_admission_prob"] = c.synth.second_admission_prob;
  j["synth"] = s;

  json p;
  p["out_dir"] = c.paths.out_dir;
  p["cohort"] = c.paths.cohort;
  p["checkpoint"] = c.paths.checkpoint;
  p["history"] = c.paths.history;
  p["report"] = c.paths.report;
  p["ablation"] = c.paths.ablation;
  p["note_embeddings"] = c.paths.note_embeddings;
  p["ehr_features"] = c.paths.ehr_features;
  p["image_features"] = c.paths.image_features;
  j["paths"] = p;
  return j;
}

template <typename T>
void read_key(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

RunConfig from_json(const json& j) {
  RunConfig c;
  static const std::map<std::string, std::vector<std::string>> known = {
      {"", {"seed", "d_note", "model", "train", "synth", "paths"}},
      {"model",
       {"d", "heads", "d_ff", "temporal_layers", "fusion_layers", "dropout", "delta", "sigma",
        "metric", "fusion_input", "use_ehr", "use_image", "use_note"}},
      {"train",
       {"lr", "epochs", "early_stop", "patience", "target_val_auc", "pos_weight", "precision"}},
      {"synth",
       {"n_admissions", "prevalence", "latent_dim", "s_ehr", "s_img", "s_note", "noise",
        "missing_note_prob", "d_ehr_raw", "d_img_raw", "max_visits", "label_slope",
        "note_sharpness", "vocab_size", "min_note_tokens", "max_note_tokens",
        "second_admission_prob"}},
      {"paths",
       {"out_dir", "cohort", "checkpoint", "history", "report", "ablation", "note_embeddings",
        "ehr_features", "image_features"}}};
  auto reject_unknown = [&](const json& obj, const std::string& scope) {
    const auto& keys = known.at(scope);
    for (const auto& [key, value] : obj.items()) {
      bool ok = false;
      for (const auto& k : keys) ok = ok || k == key;
      if (!ok)
        throw UsageError("unknown config key '" + (scope.empty() ? key : scope + "." + key) +
                         "'");
    }
  };
  try {
    reject_unknown(j, "");
    read_key(j, "seed", c.seed);
    read_key(j, "d_note", c.d_note);
    if (j.contains("model")) {
      const json& m = j.at("model");
      reject_unknown(m, "model");
      read_key(m, "d", c.model.d);
      read_key(m, "heads", c.model.heads);
      read_key(m, "d_ff", c.model.d_ff);
      read_key(m, "temporal_layers", c.model.temporal_layers);
      read_key(m, "fusion_layers", c.model.fusion_layers);
      read_key(m, "dropout", c.model.dropout);
      read_key(m, "delta", c.model.delta);
      read_key(m, "sigma", c.model.sigma);
      if (m.contains("metric")) c.model.metric = metric_from_name(m.at("metric").get<std::string>());
      if (m.contains("fusion_input"))
        c.model.fusion_input = fusion_input_from_name(m.at("fusion_input").get<std::string>());
      read_key(m, "use_ehr", c.model.use_ehr);
      read_key(m, "use_image", c.model.use_image);
      read_key(m, "use_note", c.model.use_note);
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      reject_unknown(t, "train");
      read_key(t, "lr", c.train.lr);
      read_key(t, "epochs", c.train.epochs);
      read_key(t, "early_stop", c.train.early_stop);
      read_key(t, "patience", c.train.patience);
      read_key(t, "target_val_auc", c.train.target_val_auc);
      read_key(t, "pos_weight", c.train.pos_weight);
      if (t.contains("precision"))
        c.train.precision = precision_from_name(t.at("precision").get<std::string>());
    }
    if (j.contains("synth")) {
      const json& s = j.at("synth");
      reject_unknown(s, "synth");
      read_key(s, "n_admissions", c.synth.n_admissions);
      read_key(s, "prevalence", c.synth.prevalence);
      read_key(s, "latent_dim", c.synth.latent_dim);
      read_key(s, "s_ehr", c.synth.s_ehr);
      read_key(s, "s_img", c.synth.s_img);
      read_key(s, "s_note", c.synth.s_note);
      read_key(s, "noise", c.synth.noise);
      read_key(s, "missing_note_prob", c.synth.missing_note_prob);
      read_key(s, "d_ehr_raw", c.synth.d_ehr_raw);
      read_key(s, "d_img_raw", c.synth.d_img_raw);
      read_key(s, "max_visits", c.synth.max_visits);
      read_key(s, "label_slope", c.synth.label_slope);
      read_key(s, "note_sharpness", c.synth.note_sharpness);
      read_key(s, "vocab_size", c.synth.vocab_size);
      read_key(s, "min_note_tokens", c.synth.min_note_tokens);
      read_key(s, "max_note_tokens", c.synth.max_note_tokens);
      read_key(s, "second_admission_prob", c.synth.second_admission_prob);
    }
    if (j.contains("paths")) {
      const json& p = j.at("paths");
      reject_unknown(p, "paths");
      read_key(p, "out_dir", c.paths.out_dir);
      read_key(p, "cohort", c.paths.cohort);
      read_key(p, "checkpoint", c.paths.checkpoint);
      read_key(p, "history", c.paths.history);
      read_key(p, "report", c.paths.report);
      read_key(p, "ablation", c.paths.ablation);
      read_key(p, "note_embeddings", c.paths.note_embeddings);
      read_key(p, "ehr_features", c.paths.ehr_features);
      read_key(p, "image_features", c.paths.image_features);
    }
  } catch (const json::exception& e) {
    throw UsageError("bad config value: " + std::string(e.what()));
  }
  // seed flows into the sub-configs that carry their own copy
  c.synth.seed = c.seed;
  c.train.seed = c.seed;
  return c;
}

}  // namespace

std::string RunConfig::to_json_string() const { return to_json(*this).dump(2) + "\n"; }

RunConfig RunConfig::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError("malformed config JSON: " + std::string(e.what()));
  }
  return from_json(j);
}

void RunConfig::apply_override(const std::string& dotted_assignment) {
  const auto eq = dotted_assignment.find('=');
  if (eq == std::string::npos)
    throw UsageError("override '" + dotted_assignment + "' is not of the form key=value");
  const std::string key = dotted_assignment.substr(0, eq);
  const std::string value = dotted_assignment.substr(eq + 1);

  json j = to_json(*this);
  json* node = &j;
  std::size_t start = 0;
  std::vector<std::string> parts;
  while (true) {
    const auto dot = key.find('.', start);
    parts.push_back(key.substr(start, dot == std::string::npos ? dot : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object())
      throw UsageError("unknown config key '" + key + "'");
    node = &(*node)[parts[i]];
  }
  if (!node->contains(parts.back())) throw UsageError("unknown config key '" + key + "'");
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // unquoted strings pass through
  }
  if (parsed.is_object() || parsed.is_array())
    throw UsageError("override '" + key + "' must be a scalar");
  (*node)[parts.back()] = parsed;
  *this = from_json(j);
}

std::string RunConfig::resolve(const std::string& path) const {
  if (path.empty() || path.front() == '/') return path;
  if (paths.out_dir.empty() || paths.out_dir == ".") return path;
  return paths.out_dir + "/" + path;
}

RunConfig load_run_config(const std::string& config_path,
                          const std::vector<std::string>& overrides) {
  RunConfig c;
  if (!config_path.empty()) {
    std::ifstream in(config_path, std::ios::binary);
    if (!in) throw UsageError("cannot open config file '" + config_path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    c = RunConfig::from_json_string(buf.str());
  }
  for (const auto& o : overrides) c.apply_override(o);
  return c;
}

}  // namespace readmit
