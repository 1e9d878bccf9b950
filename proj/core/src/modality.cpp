#include "readmit/modality.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "readmit/errors.hpp"
#include "readmit/rng.hpp"

namespace readmit {

using json = nlohmann::json;

std::string modality_name(Modality m) {
  switch (m) {
    case Modality::ehr: return "ehr";
    case Modality::image: return "image";
    case Modality::note: return "note";
  }
  return "ehr";
}

Modality modality_from_name(const std::string& name) {
  if (name == "ehr") return Modality::ehr;
  if (name == "image") return Modality::image;
  if (name == "note") return Modality::note;
  throw DataError("unknown modality '" + name + "'");
}

NoteChunks chunk_note(const std::vector<std::string>& tokens, int max_len, int max_chunks) {
  if (max_len <= 0) throw ContractError("chunk_note: max_len must be positive");
  NoteChunks out;
  for (std::size_t start = 0; start < tokens.size(); start += static_cast<std::size_t>(max_len)) {
    if (static_cast<int>(out.chunks.size()) == max_chunks) break;  // tail dropped
    const std::size_t end = std::min(tokens.size(), start + static_cast<std::size_t>(max_len));
    out.chunks.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                            tokens.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<std::string> whitespace_tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

namespace {

std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

HashingEmbedder::HashingEmbedder(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim < 1) throw ContractError("HashingEmbedder: dim must be positive");
}

std::vector<double> HashingEmbedder::embed_chunk(const std::string&, int,
                                                 const std::vector<std::string>& tokens) const {
  std::vector<double> acc(static_cast<std::size_t>(dim_), 0.0);
  for (const auto& tok : tokens) {
    Rng rng(mix64(seed_ ^ fnv1a(tok)));
    double norm2 = 0.0;
    std::vector<double> v(static_cast<std::size_t>(dim_));
    for (auto& x : v) {
      x = rng.normal();
      norm2 += x * x;
    }
    const double inv = norm2 > 0.0 ? 1.0 / std::sqrt(norm2) : 0.0;
    for (int j = 0; j < dim_; ++j) acc[j] += v[j] * inv;
  }
  double norm2 = 0.0;
  for (double x : acc) norm2 += x * x;
  if (norm2 > 0.0) {
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& x : acc) x *= inv;
  }
  return acc;
}

FileEmbeddings::FileEmbeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open embedding file '" + path + "'");
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("embeddings line " + std::to_string(line_no) + ": malformed JSON (" +
                      e.what() + ")");
    }
    try {
      const auto id = j.at("admission_id").get<std::string>();
      const int idx = j.at("chunk_index").get<int>();
      std::vector<double> vec;
      for (const auto& v : j.at("vector")) {
        const double x = v.get<double>();
        if (!std::isfinite(x))
          throw DataError("embeddings line " + std::to_string(line_no) + ": non-finite value");
        vec.push_back(x);
      }
      if (dim_ == 0) dim_ = static_cast<int>(vec.size());
      if (static_cast<int>(vec.size()) != dim_)
        throw DataError("embeddings line " + std::to_string(line_no) + ": dimension " +
                        std::to_string(vec.size()) + " != " + std::to_string(dim_));
      vectors_[{id, idx}] = std::move(vec);
    } catch (const json::exception& e) {
      throw DataError("embeddings line " + std::to_string(line_no) + ": bad record (" +
                      std::string(e.what()) + ")");
    }
  }
  if (vectors_.empty()) throw DataError("embedding file '" + path + "' holds no vectors");
}

std::vector<double> FileEmbeddings::embed_chunk(const std::string& admission_id, int chunk_index,
                                                const std::vector<std::string>&) const {
  const auto it = vectors_.find({admission_id, chunk_index});
  if (it == vectors_.end())
    throw DataError("no precomputed embedding for admission '" + admission_id + "' chunk " +
                    std::to_string(chunk_index));
  return it->second;
}

std::pair<Tensor, Tensor> note_chunk_matrix(const std::vector<NoteChunks>& notes,
                                            const std::vector<std::string>& admission_ids,
                                            const EmbeddingProvider& provider) {
  if (notes.size() != admission_ids.size())
    throw ContractError("note_chunk_matrix: notes/ids size mismatch");
  const std::int64_t a = static_cast<std::int64_t>(notes.size());
  const std::int64_t d = provider.dim();
  std::vector<double> values(static_cast<std::size_t>(a * kMaxChunks * d), 0.0);
  std::vector<double> mask(static_cast<std::size_t>(a * kMaxChunks), 0.0);
  for (std::int64_t i = 0; i < a; ++i) {
    const auto& chunks = notes[static_cast<std::size_t>(i)].chunks;
    if (chunks.empty()) {
      // empty-note convention: one real zero token so attention has a key
      mask[static_cast<std::size_t>(i * kMaxChunks)] = 1.0;
      continue;
    }
    const int c = std::min<int>(static_cast<int>(chunks.size()), kMaxChunks);
    for (int j = 0; j < c; ++j) {
      const auto vec = provider.embed_chunk(admission_ids[static_cast<std::size_t>(i)], j,
                                            chunks[static_cast<std::size_t>(j)]);
      if (static_cast<std::int64_t>(vec.size()) != d)
        throw DataError("embedding provider returned dimension " + std::to_string(vec.size()) +
                        ", expected " + std::to_string(d));
      std::copy(vec.begin(), vec.end(), values.begin() + (i * kMaxChunks + j) * d);
      mask[static_cast<std::size_t>(i * kMaxChunks + j)] = 1.0;
    }
  }
  return {Tensor::from({a, kMaxChunks, d}, std::move(values)),
          Tensor::from({a, kMaxChunks}, std::move(mask))};
}

ModalityFeatures embed_notes(const std::vector<NoteChunks>& notes,
                             const std::vector<std::string>& admission_ids,
                             const EmbeddingProvider& provider, const Tensor& w_d) {
  auto [raw, mask] = note_chunk_matrix(notes, admission_ids, provider);
  if (w_d.rank() != 2 || w_d.extent(0) != provider.dim())
    throw ShapeError("embed_notes: projection " + shape_str(w_d.shape()) + " vs provider dim " +
                     std::to_string(provider.dim()));
  return {Modality::note, matmul(raw, w_d), mask};
}

namespace {

ModalityFeatures pack_visits(const std::vector<const std::vector<std::vector<double>>*>& rows,
                             Modality modality, std::int64_t d_raw) {
  const std::int64_t a = static_cast<std::int64_t>(rows.size());
  std::vector<double> values(static_cast<std::size_t>(a * kMaxVisits * d_raw), 0.0);
  std::vector<double> mask(static_cast<std::size_t>(a * kMaxVisits), 0.0);
  for (std::int64_t i = 0; i < a; ++i) {
    const auto& visits = *rows[static_cast<std::size_t>(i)];
    // keep the most recent kMaxVisits visits
    const std::size_t n = visits.size();
    const std::size_t start = n > kMaxVisits ? n - kMaxVisits : 0;
    for (std::size_t t = start; t < n; ++t) {
      const std::size_t slot = t - start;
      std::copy(visits[t].begin(), visits[t].end(),
                values.begin() + (i * kMaxVisits + static_cast<std::int64_t>(slot)) * d_raw);
      mask[static_cast<std::size_t>(i * kMaxVisits + static_cast<std::int64_t>(slot))] = 1.0;
    }
  }
  return {modality, Tensor::from({a, kMaxVisits, d_raw}, std::move(values)),
          Tensor::from({a, kMaxVisits}, std::move(mask))};
}

const std::vector<std::vector<double>>& visits_of(const AdmissionRecord& r, Modality m) {
  return m == Modality::ehr ? r.ehr : r.image;
}

}  // namespace

ModalityFeatures features_from_cohort(const Cohort& cohort, Modality modality) {
  if (modality == Modality::note)
    throw ContractError("features_from_cohort: notes go through the chunk/embed path");
  std::int64_t d_raw = -1;
  std::vector<const std::vector<std::vector<double>>*> rows;
  rows.reserve(cohort.size());
  for (const auto& rec : cohort.admissions) {
    const auto& visits = visits_of(rec, modality);
    for (const auto& v : visits) {
      if (d_raw < 0) d_raw = static_cast<std::int64_t>(v.size());
      if (static_cast<std::int64_t>(v.size()) != d_raw)
        throw DataError("admission '" + rec.admission_id + "': ragged " +
                        modality_name(modality) + " feature rows");
    }
    rows.push_back(&visits);
  }
  if (d_raw < 0) throw DataError("cohort has no " + modality_name(modality) + " visits at all");
  return pack_visits(rows, modality, d_raw);
}

ModalityFeatures ingest_modality_features(const std::string& path, Modality modality,
                                          int expected_d_raw,
                                          const std::vector<std::string>& admission_order,
                                          const std::vector<std::string>& patient_ids) {
  if (modality == Modality::note)
    throw ContractError("ingest_modality_features: notes use the embedding file interface");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file '" + path + "'");

  std::map<std::string, std::vector<std::vector<double>>> by_id;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("features line " + std::to_string(line_no) + ": malformed JSON (" +
                      e.what() + ")");
    }
    try {
      const auto id = j.at("admission_id").get<std::string>();
      const auto mod = modality_from_name(j.at("modality").get<std::string>());
      if (mod != modality)
        throw DataError("features line " + std::to_string(line_no) + ": modality '" +
                        modality_name(mod) + "' does not match requested '" +
                        modality_name(modality) + "'");
      std::vector<std::vector<double>> visits;
      for (const auto& row : j.at("visits")) {
        std::vector<double> r;
        for (const auto& v : row) {
          const double x = v.get<double>();
          if (!std::isfinite(x))
            throw DataError("features line " + std::to_string(line_no) +
                            ": non-finite value for admission '" + id + "'");
          r.push_back(x);
        }
        if (static_cast<int>(r.size()) != expected_d_raw)
          throw DataError("features line " + std::to_string(line_no) + ": row width " +
                          std::to_string(r.size()) + " != expected " +
                          std::to_string(expected_d_raw));
        visits.push_back(std::move(r));
      }
      if (by_id.count(id))
        throw DataError("features line " + std::to_string(line_no) + ": duplicate admission '" +
                        id + "'");
      by_id[id] = std::move(visits);
    } catch (const json::exception& e) {
      throw DataError("features line " + std::to_string(line_no) + ": bad record (" +
                      std::string(e.what()) + ")");
    }
  }

  for (const auto& [id, _] : by_id) {
    bool known = false;
    for (const auto& want : admission_order) known = known || want == id;
    if (!known) throw DataError("feature file names unknown admission '" + id + "'");
  }
  std::vector<std::vector<std::vector<double>>> stored(admission_order.size());
  std::vector<const std::vector<std::vector<double>>*> rows;
  for (std::size_t i = 0; i < admission_order.size(); ++i) {
    const auto it = by_id.find(admission_order[i]);
    if (it == by_id.end())
      throw DataError("feature file is missing admission '" + admission_order[i] + "'");
    stored[i] = it->second;
    rows.push_back(&stored[i]);
  }
  (void)patient_ids;
  return pack_visits(rows, modality, expected_d_raw);
}

void write_feature_file(const std::string& path, const Cohort& cohort, Modality modality) {
  if (modality == Modality::note)
    throw ContractError("write_feature_file: notes use the embedding file interface");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& rec : cohort.admissions) {
    json j;
    j["admission_id"] = rec.admission_id;
    j["patient_id"] = rec.patient_id;
    j["modality"] = modality_name(modality);
    j["visits"] = visits_of(rec, modality);
    out << j.dump() << '\n';
  }
}

}  // namespace readmit
