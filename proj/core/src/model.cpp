#include "readmit/model.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "readmit/errors.hpp"

namespace readmit {

using json = nlohmann::json;

std::string fusion_input_name(FusionInput f) {
  return f == FusionInput::sequence ? "sequence" : "cls";
}

FusionInput fusion_input_from_name(const std::string& name) {
  if (name == "sequence") return FusionInput::sequence;
  if (name == "cls") return FusionInput::cls;
  throw UsageError("unknown fusion input mode '" + name + "'");
}

void ModelConfig::validate() const {
  if (d < 1) throw UsageError("model.d must be positive");
  if (heads < 1 || d % heads != 0)
    throw UsageError("model.d (" + std::to_string(d) + ") must be divisible by model.heads (" +
                     std::to_string(heads) + ")");
  if (d_ff < 0 || temporal_layers < 1 || fusion_layers < 1)
    throw UsageError("model layer counts must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw UsageError("model.dropout must lie in [0,1)");
  if (delta < 0.0 || delta >= 1.0) throw UsageError("model.delta must lie in [0,1)");
  if (sigma < 0.0) throw UsageError("model.sigma must be >= 0 (0 = median heuristic)");
  if (!use_ehr && !use_image && !use_note)
    throw UsageError("at least one modality must be enabled");
}

Tensor ParameterStore::create(const std::string& name, Shape shape, Init init, Rng& rng) {
  if (index_.count(name))
    throw ContractError("parameter '" + name + "' registered twice");
  Tensor t;
  switch (init) {
    case Init::zeros:
      t = Tensor::zeros(shape, true);
      break;
    case Init::ones:
      t = Tensor::full(shape, 1.0, true);
      break;
    case Init::fan_in_uniform: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      t = Tensor::uniform(shape, -bound, bound, rng, true);
      break;
    }
  }
  index_[name] = entries_.size();
  entries_.emplace_back(name, t);
  return t;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

bool ParameterStore::has(const std::string& name) const { return index_.count(name) > 0; }

std::int64_t ParameterStore::total_coords() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

void ParameterStore::zero_grads() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

std::map<std::string, std::vector<double>> ParameterStore::snapshot() const {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, t] : entries_) out[name] = t.values();
  return out;
}

void ParameterStore::restore(const std::map<std::string, std::vector<double>>& snap) {
  for (auto& [name, t] : entries_) {
    const auto it = snap.find(name);
    if (it == snap.end()) throw ContractError("snapshot is missing parameter '" + name + "'");
    if (it->second.size() != t.values().size())
      throw ContractError("snapshot size mismatch for parameter '" + name + "'");
    t.values_mut() = it->second;
  }
}

// ---- model ---------------------------------------------------------------

Model::Model(const ModelConfig& cfg, int d_ehr_raw, int d_img_raw, int d_note, std::uint64_t seed)
    : cfg_(cfg), d_ehr_raw_(d_ehr_raw), d_img_raw_(d_img_raw), d_note_(d_note), seed_(seed) {
  cfg_.validate();
  if ((cfg_.use_ehr && d_ehr_raw_ < 1) || (cfg_.use_image && d_img_raw_ < 1) ||
      (cfg_.use_note && d_note_ < 1))
    throw ContractError("model: raw feature dimensions must be positive for enabled modalities");
  Rng init_rng = Rng(seed).child(100);
  register_parameters(init_rng);
}

void Model::register_parameters(Rng& rng) {
  const std::int64_t d = cfg_.d;
  const std::int64_t d_ff = cfg_.resolved_d_ff();

  auto register_layer = [&](const std::string& prefix) {
    params_.create(prefix + ".w_q", {d, d}, Init::fan_in_uniform, rng);
    params_.create(prefix + ".w_k", {d, d}, Init::fan_in_uniform, rng);
    params_.create(prefix + ".w_v", {d, d}, Init::fan_in_uniform, rng);
    params_.create(prefix + ".w_o", {d, d}, Init::fan_in_uniform, rng);
    params_.create(prefix + ".ln1.gain", {d}, Init::ones, rng);
    params_.create(prefix + ".ln1.bias", {d}, Init::zeros, rng);
    params_.create(prefix + ".ln2.gain", {d}, Init::ones, rng);
    params_.create(prefix + ".ln2.bias", {d}, Init::zeros, rng);
    params_.create(prefix + ".mlp.w1", {d, d_ff}, Init::fan_in_uniform, rng);
    params_.create(prefix + ".mlp.b1", {d_ff}, Init::zeros, rng);
    params_.create(prefix + ".mlp.w2", {d_ff, d}, Init::fan_in_uniform, rng);
    params_.create(prefix + ".mlp.b2", {d}, Init::zeros, rng);
  };
  auto register_branch = [&](const std::string& name, std::int64_t d_raw) {
    params_.create(name + ".proj", {d_raw, d}, Init::fan_in_uniform, rng);
    params_.create(name + ".sage.w_self", {d, d}, Init::fan_in_uniform, rng);
    params_.create(name + ".sage.w_neigh", {d, d}, Init::fan_in_uniform, rng);
    params_.create(name + ".sage.bias", {d}, Init::zeros, rng);
    params_.create(name + ".cls", {d}, Init::zeros, rng);
    for (int l = 0; l < cfg_.temporal_layers; ++l)
      register_layer(name + ".t" + std::to_string(l));
  };

  if (cfg_.use_ehr) register_branch("ehr", d_ehr_raw_);
  if (cfg_.use_image) register_branch("image", d_img_raw_);
  if (cfg_.use_note) params_.create("note.w_d", {d_note_, d}, Init::fan_in_uniform, rng);
  for (int l = 0; l < cfg_.fusion_layers; ++l) register_layer("fusion.f" + std::to_string(l));
  params_.create("head.w1", {d, d}, Init::fan_in_uniform, rng);
  params_.create("head.b1", {d}, Init::zeros, rng);
  params_.create("head.w2", {d, 1}, Init::fan_in_uniform, rng);
  params_.create("head.b2", {1}, Init::zeros, rng);
}

TransformerParams Model::layer_params(const std::string& prefix) const {
  TransformerParams p;
  p.heads = cfg_.heads;
  p.w_q = params_.get(prefix + ".w_q");
  p.w_k = params_.get(prefix + ".w_k");
  p.w_v = params_.get(prefix + ".w_v");
  p.w_o = params_.get(prefix + ".w_o");
  p.ln1_gain = params_.get(prefix + ".ln1.gain");
  p.ln1_bias = params_.get(prefix + ".ln1.bias");
  p.ln2_gain = params_.get(prefix + ".ln2.gain");
  p.ln2_bias = params_.get(prefix + ".ln2.bias");
  p.mlp_w1 = params_.get(prefix + ".mlp.w1");
  p.mlp_b1 = params_.get(prefix + ".mlp.b1");
  p.mlp_w2 = params_.get(prefix + ".mlp.w2");
  p.mlp_b2 = params_.get(prefix + ".mlp.b2");
  return p;
}

namespace {

AdjacencyMatrix modality_adjacency(const ModalityFeatures& feats, const ModelConfig& cfg) {
  const Tensor pooled = pool_node_features(feats.values, feats.mask);
  double sigma = cfg.sigma;
  if (sigma <= 0.0) sigma = std::max(median_pairwise_distance(pooled, cfg.metric), 1e-12);
  return build_adjacency(pooled, sigma, cfg.delta, cfg.metric);
}

Tensor split_mask(const Cohort& cohort, Split s) {
  std::vector<double> m(cohort.size(), 0.0);
  for (std::size_t i = 0; i < cohort.size(); ++i)
    if (cohort.admissions[i].split == s) m[i] = 1.0;
  return Tensor::from({static_cast<std::int64_t>(cohort.size())}, std::move(m));
}

}  // namespace

PreparedBatch Model::prepare(const Cohort& cohort, const EmbeddingProvider& provider,
                             const ModalityFeatures* ehr_override,
                             const ModalityFeatures* image_override) const {
  if (cohort.admissions.empty()) throw ContractError("prepare: empty cohort");
  PreparedBatch b;
  b.a = static_cast<std::int64_t>(cohort.size());

  if (cfg_.use_ehr) {
    b.ehr = ehr_override ? *ehr_override : features_from_cohort(cohort, Modality::ehr);
    if (b.ehr.values.extent(2) != d_ehr_raw_)
      throw DataError("ehr feature width " + std::to_string(b.ehr.values.extent(2)) +
                      " != model's " + std::to_string(d_ehr_raw_));
    b.ehr_adj = modality_adjacency(b.ehr, cfg_);
  }
  if (cfg_.use_image) {
    b.image = image_override ? *image_override : features_from_cohort(cohort, Modality::image);
    if (b.image.values.extent(2) != d_img_raw_)
      throw DataError("image feature width " + std::to_string(b.image.values.extent(2)) +
                      " != model's " + std::to_string(d_img_raw_));
    b.image_adj = modality_adjacency(b.image, cfg_);
  }
  if (cfg_.use_note) {
    std::vector<NoteChunks> notes;
    std::vector<std::string> ids;
    notes.reserve(cohort.size());
    for (const auto& rec : cohort.admissions) {
      notes.push_back(chunk_note(rec.note_tokens));
      ids.push_back(rec.admission_id);
    }
    auto [raw, mask] = note_chunk_matrix(notes, ids, provider);
    if (raw.extent(2) != d_note_)
      throw DataError("note embedding width " + std::to_string(raw.extent(2)) + " != model's " +
                      std::to_string(d_note_));
    b.note_raw = raw;
    b.note_mask = mask;
  }

  std::vector<double> labels(cohort.size());
  for (std::size_t i = 0; i < cohort.size(); ++i)
    labels[i] = static_cast<double>(cohort.admissions[i].label);
  b.labels = Tensor::from({b.a}, std::move(labels));
  b.label_vec = cohort.labels();
  b.train_mask = split_mask(cohort, Split::train);
  b.val_mask = split_mask(cohort, Split::val);
  b.test_mask = split_mask(cohort, Split::test);
  b.train_idx = cohort.indices_of(Split::train);
  b.val_idx = cohort.indices_of(Split::val);
  b.test_idx = cohort.indices_of(Split::test);
  return b;
}

std::pair<SequenceBatch, Tensor> Model::st_transformer(const ModalityFeatures& projected,
                                                       const AdjacencyMatrix& adj,
                                                       const std::string& branch, bool training,
                                                       Rng* rng) const {
  SageParams sp{params_.get(branch + ".sage.w_self"), params_.get(branch + ".sage.w_neigh"),
                params_.get(branch + ".sage.bias")};
  Tensor x = sage_layer(projected.values, adj, sp);

  const std::int64_t L = x.extent(1);
  const std::int64_t d = x.extent(2);
  x = add(x, positional_encoding(L, d));
  x = mul(x, expand_mask(projected.mask, d));  // keep padded rows at zero

  SequenceBatch seq = prepend_cls({x, projected.mask}, params_.get(branch + ".cls"));
  for (int l = 0; l < cfg_.temporal_layers; ++l)
    seq = transformer_layer(seq, layer_params(branch + ".t" + std::to_string(l)), cfg_.dropout,
                            training, rng);
  return {strip_cls(seq), extract_cls(seq)};
}

SequenceBatch Model::fuse(const SequenceBatch* ehr_seq, const Tensor* ehr_cls,
                          const SequenceBatch* img_seq, const Tensor* img_cls,
                          const Tensor* note_values, const Tensor* note_mask) const {
  std::vector<Tensor> parts;
  std::vector<Tensor> masks;
  std::int64_t a = -1, d = -1;

  auto push = [&](const Tensor& values, const Tensor& mask) {
    if (a < 0) {
      a = values.extent(0);
      d = values.extent(2);
    }
    if (values.extent(0) != a || values.extent(2) != d)
      throw ContractError("fuse: branch shape " + shape_str(values.shape()) +
                          " does not match width " + std::to_string(d));
    parts.push_back(values);
    masks.push_back(mask);
  };

  const bool sequences = cfg_.fusion_input == FusionInput::sequence;
  if (ehr_seq) {
    if (sequences)
      push(ehr_seq->values, ehr_seq->mask);
    else
      push(reshape(*ehr_cls, {ehr_cls->extent(0), 1, ehr_cls->extent(1)}),
           Tensor::full({ehr_cls->extent(0), 1}, 1.0));
  }
  if (img_seq) {
    if (sequences)
      push(img_seq->values, img_seq->mask);
    else
      push(reshape(*img_cls, {img_cls->extent(0), 1, img_cls->extent(1)}),
           Tensor::full({img_cls->extent(0), 1}, 1.0));
  }
  if (note_values) push(*note_values, *note_mask);
  if (parts.empty()) throw ContractError("fuse: no active modalities");

  const Tensor values = parts.size() == 1 ? parts[0] : concat(parts, 1);
  // concatenate masks positionally
  std::int64_t total_l = 0;
  for (const auto& m : masks) total_l += m.extent(1);
  std::vector<double> mask(static_cast<std::size_t>(a * total_l));
  std::int64_t off = 0;
  for (const auto& m : masks) {
    const std::int64_t l = m.extent(1);
    const double* src = m.values().data();
    for (std::int64_t i = 0; i < a; ++i)
      for (std::int64_t t = 0; t < l; ++t) mask[i * total_l + off + t] = src[i * l + t];
    off += l;
  }
  return {values, Tensor::from({a, total_l}, std::move(mask))};
}

Tensor Model::forward(const PreparedBatch& batch, bool training, Rng* dropout_rng) const {
  SequenceBatch ehr_seq, img_seq;
  Tensor ehr_cls, img_cls;
  if (cfg_.use_ehr) {
    ModalityFeatures proj{Modality::ehr, matmul(batch.ehr.values, params_.get("ehr.proj")),
                          batch.ehr.mask};
    std::tie(ehr_seq, ehr_cls) = st_transformer(proj, batch.ehr_adj, "ehr", training, dropout_rng);
  }
  if (cfg_.use_image) {
    ModalityFeatures proj{Modality::image, matmul(batch.image.values, params_.get("image.proj")),
                          batch.image.mask};
    std::tie(img_seq, img_cls) =
        st_transformer(proj, batch.image_adj, "image", training, dropout_rng);
  }
  Tensor note_proj;
  if (cfg_.use_note) note_proj = matmul(batch.note_raw, params_.get("note.w_d"));

  SequenceBatch fused = fuse(cfg_.use_ehr ? &ehr_seq : nullptr, cfg_.use_ehr ? &ehr_cls : nullptr,
                             cfg_.use_image ? &img_seq : nullptr,
                             cfg_.use_image ? &img_cls : nullptr,
                             cfg_.use_note ? &note_proj : nullptr,
                             cfg_.use_note ? &batch.note_mask : nullptr);

  for (int l = 0; l < cfg_.fusion_layers; ++l)
    fused = transformer_layer(fused, layer_params("fusion.f" + std::to_string(l)), cfg_.dropout,
                              training, dropout_rng);

  const Tensor pooled = masked_max_tokens(fused.values, fused.mask);  // [a, d]
  const Tensor hidden = relu(add(matmul(pooled, params_.get("head.w1")), params_.get("head.b1")));
  const Tensor logits = add(matmul(hidden, params_.get("head.w2")), params_.get("head.b2"));
  return reshape(logits, {batch.a});
}

// ---- checkpoint ------------------------------------------------------------

void Model::save_checkpoint(const std::string& path) const {
  json j;
  j["format"] = "readmit-checkpoint";
  j["version"] = 1;
  j["seed"] = seed_;
  json m;
  m["d"] = cfg_.d;
  m["heads"] = cfg_.heads;
  m["d_ff"] = cfg_.d_ff;
  m["temporal_layers"] = cfg_.temporal_layers;
  m["fusion_layers"] = cfg_.fusion_layers;
  m["dropout"] = cfg_.dropout;
  m["delta"] = cfg_.delta;
  m["sigma"] = cfg_.sigma;
  m["metric"] = metric_name(cfg_.metric);
  m["fusion_input"] = fusion_input_name(cfg_.fusion_input);
  m["use_ehr"] = cfg_.use_ehr;
  m["use_image"] = cfg_.use_image;
  m["use_note"] = cfg_.use_note;
  m["d_ehr_raw"] = d_ehr_raw_;
  m["d_img_raw"] = d_img_raw_;
  m["d_note"] = d_note_;
  j["model"] = m;
  json params;
  for (const auto& [name, t] : params_.entries()) {
    json p;
    p["shape"] = t.shape();
    p["values"] = t.values();
    params[name] = p;
  }
  j["params"] = params;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << j.dump() << '\n';
  if (!out) throw DataError("failed writing '" + path + "'");
}

Model Model::load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("checkpoint '" + path + "': malformed JSON (" + std::string(e.what()) + ")");
  }
  try {
    if (j.at("format").get<std::string>() != "readmit-checkpoint")
      throw DataError("checkpoint '" + path + "': unknown format tag");
    if (j.at("version").get<int>() != 1)
      throw DataError("checkpoint '" + path + "': unsupported version");
    const json& m = j.at("model");
    ModelConfig cfg;
    cfg.d = m.at("d").get<int>();
    cfg.heads = m.at("heads").get<int>();
    cfg.d_ff = m.at("d_ff").get<int>();
    cfg.temporal_layers = m.at("temporal_layers").get<int>();
    cfg.fusion_layers = m.at("fusion_layers").get<int>();
    cfg.dropout = m.at("dropout").get<double>();
    cfg.delta = m.at("delta").get<double>();
    cfg.sigma = m.at("sigma").get<double>();
    cfg.metric = metric_from_name(m.at("metric").get<std::string>());
    cfg.fusion_input = fusion_input_from_name(m.at("fusion_input").get<std::string>());
    cfg.use_ehr = m.at("use_ehr").get<bool>();
    cfg.use_image = m.at("use_image").get<bool>();
    cfg.use_note = m.at("use_note").get<bool>();
    Model model(cfg, m.at("d_ehr_raw").get<int>(), m.at("d_img_raw").get<int>(),
                m.at("d_note").get<int>(), j.at("seed").get<std::uint64_t>());
    const json& params = j.at("params");
    std::map<std::string, std::vector<double>> snap;
    for (auto& [name, t] : model.params_.entries()) {
      if (!params.contains(name))
        throw DataError("checkpoint '" + path + "': missing parameter '" + name + "'");
      const json& p = params.at(name);
      const auto shape = p.at("shape").get<Shape>();
      if (shape != t.shape())
        throw DataError("checkpoint '" + path + "': parameter '" + name + "' has shape " +
                        shape_str(shape) + ", expected " + shape_str(t.shape()));
      snap[name] = p.at("values").get<std::vector<double>>();
    }
    model.params_.restore(snap);
    return model;
  } catch (const json::exception& e) {
    throw DataError("checkpoint '" + path + "': bad structure (" + std::string(e.what()) + ")");
  }
}

}  // namespace readmit
