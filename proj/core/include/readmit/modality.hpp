#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "readmit/cohort.hpp"
#include "readmit/tensor.hpp"

namespace readmit {

enum class Modality { ehr, image, note };

std::string modality_name(Modality m);
Modality modality_from_name(const std::string& name);

// Pipeline constants: notes are split into chunks of at most 512 tokens and
// at most 25 chunks per admission; visit sequences cap at the 9 most recent.
inline constexpr int kMaxChunkTokens = 512;
inline constexpr int kMaxChunks = 25;
inline constexpr int kMaxVisits = 9;

// Per-modality input sequences. For ehr/image, L = kMaxVisits and values
// hold raw features; for notes, L = kMaxChunks. Masked rows are zero.
struct ModalityFeatures {
  Modality modality;
  Tensor values;  // [a, L, d]
  Tensor mask;    // [a, L]
};

// Ordered chunk list for one admission. Empty notes yield zero chunks.
struct NoteChunks {
  std::vector<std::vector<std::string>> chunks;
};

// Greedy split into consecutive chunks of at most max_len tokens; chunks
// beyond max_chunks are dropped (earliest kept).
NoteChunks chunk_note(const std::vector<std::string>& tokens, int max_len = kMaxChunkTokens,
                      int max_chunks = kMaxChunks);

std::vector<std::string> whitespace_tokenize(const std::string& text);

// Produces one vector per note chunk. Deterministic: the same chunk always
// maps to the same vector.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual int dim() const = 0;
  virtual std::vector<double> embed_chunk(const std::string& admission_id, int chunk_index,
                                          const std::vector<std::string>& tokens) const = 0;
};

// Test embedder: every token hashes to a seeded unit vector; a chunk embeds
// as the normalized mean of its token vectors.
class HashingEmbedder : public EmbeddingProvider {
 public:
  HashingEmbedder(int dim, std::uint64_t seed);
  int dim() const override { return dim_; }
  std::vector<double> embed_chunk(const std::string& admission_id, int chunk_index,
                                  const std::vector<std::string>& tokens) const override;

 private:
  int dim_;
  std::uint64_t seed_;
};

// Precomputed chunk vectors keyed by (admission_id, chunk_index), loaded
// from a JSON-lines file: {admission_id, chunk_index, vector}.
class FileEmbeddings : public EmbeddingProvider {
 public:
  explicit FileEmbeddings(const std::string& path);
  int dim() const override { return dim_; }
  std::vector<double> embed_chunk(const std::string& admission_id, int chunk_index,
                                  const std::vector<std::string>& tokens) const override;

 private:
  int dim_ = 0;
  std::map<std::pair<std::string, int>, std::vector<double>> vectors_;
};

// Constant [a, kMaxChunks, d_note] of provider vectors plus the chunk mask.
// Admissions without chunks get one real zero token so every sequence keeps
// at least one valid position.
std::pair<Tensor, Tensor> note_chunk_matrix(const std::vector<NoteChunks>& notes,
                                            const std::vector<std::string>& admission_ids,
                                            const EmbeddingProvider& provider);

// Full note branch input: chunk vectors projected by w_d [d_note, d].
ModalityFeatures embed_notes(const std::vector<NoteChunks>& notes,
                             const std::vector<std::string>& admission_ids,
                             const EmbeddingProvider& provider, const Tensor& w_d);

// EHR/image sequences straight from cohort records: most recent kMaxVisits
// visits kept, zero-padded, masked.
ModalityFeatures features_from_cohort(const Cohort& cohort, Modality modality);

// JSON-lines feature file interface, one object per admission:
// {admission_id, patient_id, modality, visits: [[...]]}. Rows come back in
// admission_order; unknown or missing ids, ragged rows and non-finite
// values are data errors.
ModalityFeatures ingest_modality_features(const std::string& path, Modality modality,
                                          int expected_d_raw,
                                          const std::vector<std::string>& admission_order,
                                          const std::vector<std::string>& patient_ids = {});
void write_feature_file(const std::string& path, const Cohort& cohort, Modality modality);

}  // namespace readmit
