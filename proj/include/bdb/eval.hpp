#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "bdb/data.hpp"
#include "bdb/model.hpp"
#include "json.hpp"

namespace bdb {

struct EmbeddingRecord {
  std::string sample_id;
  int identity = 0;
  int camera_id = 0;
  std::vector<double> vector;

  bool operator==(const EmbeddingRecord&) const = default;
};

struct MetricsReport {
  std::vector<double> cmc;  // cmc[k-1] = CMC@k
  double rank1 = 0.0;
  double map = 0.0;
  std::map<std::size_t, double> recall_at;
  std::size_t num_queries = 0;   // queries that were scored
  std::size_t num_skipped = 0;   // queries without any valid relevant item
  nlohmann::ordered_json config = nlohmann::ordered_json::object();

  nlohmann::ordered_json to_json() const;
};

// Eval-mode descriptors, computed in chunks of `batch_size` records. Records
// are normalized first when a normalizer is given.
std::vector<EmbeddingRecord> extract_embeddings(Model& model, const std::vector<Record>& records,
                                                const Normalizer* normalizer = nullptr,
                                                std::size_t batch_size = 64);

// Row-major |a|×|b| Euclidean distances.
std::vector<double> distance_matrix(const std::vector<EmbeddingRecord>& a,
                                    const std::vector<EmbeddingRecord>& b);

// Single-query re-ID protocol: gallery items sharing identity AND camera with
// the query are removed, the rest ranked by ascending distance (stable on
// gallery order). Queries with no remaining relevant item are skipped.
MetricsReport reid_metrics(const std::vector<EmbeddingRecord>& query,
                           const std::vector<EmbeddingRecord>& gallery, std::size_t max_rank = 50);

// Every embedding queries all others (self excluded).
MetricsReport recall_at_k(const std::vector<EmbeddingRecord>& embeddings,
                          const std::vector<std::size_t>& ks);

// Expected Rank-1 of a uniformly random ranking under the re-ID protocol.
double random_rank1(const std::vector<EmbeddingRecord>& query,
                    const std::vector<EmbeddingRecord>& gallery);

void write_embeddings(std::ostream& out, const std::vector<EmbeddingRecord>& embeddings);
void save_embeddings(const std::filesystem::path& path, const std::vector<EmbeddingRecord>& embeddings);
std::vector<EmbeddingRecord> read_embeddings(std::istream& in);
std::vector<EmbeddingRecord> load_embeddings(const std::filesystem::path& path);

}  // namespace bdb
