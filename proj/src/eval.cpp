#include "bdb/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "bdb/errors.hpp"

namespace bdb {

namespace {

std::size_t common_dim(const std::vector<EmbeddingRecord>& a, const std::vector<EmbeddingRecord>& b) {
  std::size_t dim = a.empty() ? (b.empty() ? 0 : b.front().vector.size()) : a.front().vector.size();
  for (const auto* set : {&a, &b})
    for (const auto& e : *set)
      if (e.vector.size() != dim) {
        throw EvalError("embedding " + e.sample_id + " has dimension " + std::to_string(e.vector.size()) +
                        ", expected " + std::to_string(dim));
      }
  return dim;
}

// Indices of `dist` sorted ascending, ties kept in input order.
std::vector<std::size_t> ranking(const double* dist, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [dist](std::size_t x, std::size_t y) { return dist[x] < dist[y]; });
  return order;
}

}  // namespace

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["rank1"] = rank1;
  j["map"] = map;
  j["cmc"] = cmc;
  nlohmann::ordered_json recall = nlohmann::ordered_json::object();
  for (const auto& [k, v] : recall_at) recall[std::to_string(k)] = v;
  j["recall_at"] = recall;
  j["num_queries"] = num_queries;
  j["num_skipped"] = num_skipped;
  j["config"] = config;
  return j;
}

std::vector<EmbeddingRecord> extract_embeddings(Model& model, const std::vector<Record>& records,
                                                const Normalizer* normalizer, std::size_t batch_size) {
  const auto& bb = model.config().backbone;
  const Geometry g{bb.grid_h, bb.grid_w, bb.in_patch_dim};
  for (const auto& r : records) {
    if (r.patches.size() != g.values()) {
      throw ConfigError("record " + r.sample_id + " has " + std::to_string(r.patches.size()) +
                        " values; model expects " + std::to_string(g.values()));
    }
  }
  NoGradGuard no_grad;
  std::vector<EmbeddingRecord> out;
  out.reserve(records.size());
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const std::size_t end = std::min(records.size(), start + batch_size);
    std::vector<Record> normalized;
    std::vector<const Record*> ptrs;
    if (normalizer) {
      for (std::size_t i = start; i < end; ++i) normalized.push_back(normalizer->apply(records[i]));
      for (const auto& r : normalized) ptrs.push_back(&r);
    } else {
      for (std::size_t i = start; i < end; ++i) ptrs.push_back(&records[i]);
    }
    const ModelOutput o = model.forward(to_batch(ptrs, g), Mode::eval);
    const std::size_t dim = o.descriptor.dim(1);
    const auto d = o.descriptor.data();
    for (std::size_t i = start; i < end; ++i) {
      const auto row = d.subspan((i - start) * dim, dim);
      out.push_back({records[i].sample_id, records[i].identity, records[i].camera_id,
                     std::vector<double>(row.begin(), row.end())});
    }
  }
  return out;
}

std::vector<double> distance_matrix(const std::vector<EmbeddingRecord>& a,
                                    const std::vector<EmbeddingRecord>& b) {
  const std::size_t dim = common_dim(a, b);
  std::vector<double> out(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double diff = a[i].vector[k] - b[j].vector[k];
        s += diff * diff;
      }
      out[i * b.size() + j] = std::sqrt(s);
    }
  return out;
}

MetricsReport reid_metrics(const std::vector<EmbeddingRecord>& query,
                           const std::vector<EmbeddingRecord>& gallery, std::size_t max_rank) {
  if (gallery.empty()) throw EvalError("gallery is empty");
  if (max_rank == 0) throw EvalError("max_rank must be >= 1");
  const auto dist = distance_matrix(query, gallery);
  const std::size_t ng = gallery.size();

  MetricsReport rep;
  std::vector<double> hits(max_rank, 0.0);
  double ap_sum = 0.0;
  for (std::size_t qi = 0; qi < query.size(); ++qi) {
    const auto& q = query[qi];
    std::size_t relevant = 0;
    for (const auto& g : gallery)
      if (g.identity == q.identity && g.camera_id != q.camera_id) ++relevant;
    if (relevant == 0) {
      ++rep.num_skipped;
      continue;
    }
    ++rep.num_queries;

    std::size_t position = 0;  // rank among kept items, 0-based
    std::size_t found = 0;
    std::size_t first_hit = max_rank;
    double ap = 0.0;
    for (std::size_t gi : ranking(dist.data() + qi * ng, ng)) {
      const auto& g = gallery[gi];
      const bool same_id = g.identity == q.identity;
      if (same_id && g.camera_id == q.camera_id) continue;
      if (same_id) {
        ++found;
        ap += static_cast<double>(found) / static_cast<double>(position + 1);
        if (first_hit == max_rank && position < max_rank) first_hit = position;
      }
      ++position;
    }
    ap_sum += ap / static_cast<double>(relevant);
    for (std::size_t k = first_hit; k < max_rank; ++k) hits[k] += 1.0;
  }

  rep.cmc.assign(max_rank, 0.0);
  if (rep.num_queries > 0) {
    const double nq = static_cast<double>(rep.num_queries);
    for (std::size_t k = 0; k < max_rank; ++k) rep.cmc[k] = hits[k] / nq;
    rep.map = ap_sum / nq;
  }
  rep.rank1 = rep.cmc[0];
  rep.config["protocol"] = "reid";
  rep.config["max_rank"] = max_rank;
  return rep;
}

MetricsReport recall_at_k(const std::vector<EmbeddingRecord>& embeddings,
                          const std::vector<std::size_t>& ks) {
  const std::size_t n = embeddings.size();
  if (n < 2) throw EvalError("recall@K needs at least 2 embeddings");
  if (ks.empty()) throw EvalError("recall@K needs at least one K");
  for (std::size_t k : ks) {
    if (k == 0 || k >= n) {
      throw EvalError("K=" + std::to_string(k) + " must lie in [1, " + std::to_string(n - 1) + "]");
    }
  }
  const auto dist = distance_matrix(embeddings, embeddings);
  std::map<std::size_t, std::size_t> hits;
  for (std::size_t k : ks) hits[k] = 0;
  for (std::size_t i = 0; i < n; ++i) {
    // first position (0-based, self removed) holding a same-class item
    std::size_t position = 0;
    std::size_t first = n;
    for (std::size_t j : ranking(dist.data() + i * n, n)) {
      if (j == i) continue;
      if (embeddings[j].identity == embeddings[i].identity) {
        first = position;
        break;
      }
      ++position;
    }
    for (auto& [k, h] : hits)
      if (first < k) ++h;
  }
  MetricsReport rep;
  rep.num_queries = n;
  for (const auto& [k, h] : hits) rep.recall_at[k] = static_cast<double>(h) / static_cast<double>(n);
  rep.rank1 = rep.recall_at.count(1) ? rep.recall_at[1] : 0.0;
  rep.config["protocol"] = "retrieval";
  rep.config["ks"] = ks;
  return rep;
}

double random_rank1(const std::vector<EmbeddingRecord>& query,
                    const std::vector<EmbeddingRecord>& gallery) {
  double total = 0.0;
  std::size_t scored = 0;
  for (const auto& q : query) {
    std::size_t relevant = 0, kept = 0;
    for (const auto& g : gallery) {
      if (g.identity == q.identity && g.camera_id == q.camera_id) continue;
      ++kept;
      if (g.identity == q.identity) ++relevant;
    }
    if (relevant == 0) continue;
    total += static_cast<double>(relevant) / static_cast<double>(kept);
    ++scored;
  }
  return scored ? total / static_cast<double>(scored) : 0.0;
}

// ---- embedding files -------------------------------------------------------------

void write_embeddings(std::ostream& out, const std::vector<EmbeddingRecord>& embeddings) {
  const std::size_t dim = common_dim(embeddings, embeddings);
  out << "bdb-embeddings v1 dim=" << dim << '\n';
  for (const auto& e : embeddings) {
    nlohmann::ordered_json j;
    j["id"] = e.sample_id;
    j["identity"] = e.identity;
    j["camera"] = e.camera_id;
    j["v"] = e.vector;
    out << j.dump() << '\n';
  }
}

void save_embeddings(const std::filesystem::path& path, const std::vector<EmbeddingRecord>& embeddings) {
  std::ofstream out(path);
  if (!out) throw EvalError("cannot write embeddings to " + path.string());
  write_embeddings(out, embeddings);
}

std::vector<EmbeddingRecord> read_embeddings(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing embeddings header");
  std::istringstream hs(line);
  std::string magic, version, dim_token, extra;
  hs >> magic >> version >> dim_token;
  std::size_t dim = 0;
  if (magic != "bdb-embeddings" || version != "v1" || dim_token.rfind("dim=", 0) != 0 || (hs >> extra)) {
    throw ParseError(1, "expected header 'bdb-embeddings v1 dim=<d>'");
  }
  try {
    dim = std::stoull(dim_token.substr(4));
  } catch (const std::exception&) {
    throw ParseError(1, "invalid dim in embeddings header");
  }

  std::vector<EmbeddingRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    EmbeddingRecord e;
    try {
      const auto j = nlohmann::json::parse(line);
      e.sample_id = j.at("id").get<std::string>();
      e.identity = j.at("identity").get<int>();
      e.camera_id = j.at("camera").get<int>();
      e.vector = j.at("v").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(lineno, std::string("malformed embedding: ") + ex.what());
    }
    if (e.vector.size() != dim) {
      throw ParseError(lineno, "embedding has " + std::to_string(e.vector.size()) + " values, header says " +
                                   std::to_string(dim));
    }
    if (!std::all_of(e.vector.begin(), e.vector.end(), [](double v) { return std::isfinite(v); })) {
      throw ParseError(lineno, "embedding contains a non-finite value");
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<EmbeddingRecord> load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw EvalError("cannot open embeddings file " + path.string());
  return read_embeddings(in);
}

}  // namespace bdb
