#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance suite. Nothing here calls the code under test except to read
// tensor values.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "bdb/eval.hpp"
#include "bdb/masks.hpp"
#include "bdb/tensor.hpp"

namespace bdb::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> d(numel_of(shape));
  for (double& v : d) v = n(rng);
  return Tensor::from(std::move(shape), std::move(d), requires_grad);
}

// |a − n| / max(|a|, |n|, floor): relative error that falls back to absolute
// error for near-zero gradients.
inline double rel_err(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central finite differences of scalar f() with respect to every element of
// every leaf; returns the largest rel_err against the tape gradient.
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor*> leaves, double h = 1e-6) {
  for (Tensor* t : leaves) t->zero_grad();
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (Tensor* t : leaves) {
    const auto g = t->grad();
    analytic.emplace_back(g.begin(), g.end());
  }
  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto data = leaves[li]->mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + h;
      const double up = f().item();
      data[i] = keep - h;
      const double down = f().item();
      data[i] = keep;
      worst = std::max(worst, rel_err(analytic[li][i], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

// loss = Σ out ⊙ weights with fixed random weights, so every output element
// receives a distinct upstream gradient.
inline Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> w(out.numel());
  for (double& v : w) v = n(rng);
  return sum(mul(out, Tensor::from(out.shape(), std::move(w))));
}

// ---- mask helpers --------------------------------------------------------------

struct Rect {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

// The bounding box of the zeros in an h×w 0/1 pattern, if the zeros fill it
// exactly; nullopt for no zeros or any other shape.
inline std::optional<Rect> zero_rectangle(const std::uint8_t* p, std::size_t h, std::size_t w) {
  std::size_t top = h, bottom = 0, left = w, right = 0, zeros = 0;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      if (p[i * w + j] == 0) {
        ++zeros;
        top = std::min(top, i);
        bottom = std::max(bottom, i);
        left = std::min(left, j);
        right = std::max(right, j);
      }
  if (zeros == 0) return std::nullopt;
  const Rect r{top, left, bottom - top + 1, right - left + 1};
  if (r.height * r.width != zeros) return std::nullopt;
  return r;
}

// Pearson chi-square test of observed counts against a uniform distribution.
inline double uniform_chi_square_p(const std::vector<std::size_t>& counts) {
  const double n = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  const double expected = n / static_cast<double>(counts.size());
  double stat = 0.0;
  for (std::size_t c : counts) stat += (static_cast<double>(c) - expected) * (static_cast<double>(c) - expected) / expected;
  boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

// Top rows of 1000 Batch DropBlock masks on an h×1 map with block height dh.
inline double bdb_placement_p(std::uint64_t seed, std::size_t h = 10, double r_h = 0.3, std::size_t draws = 1000) {
  Rng rng(seed);
  DropSpec spec;
  spec.r_h = r_h;
  const std::size_t dh = block_extent(r_h, h);
  std::vector<std::size_t> counts(h - dh + 1, 0);
  for (std::size_t i = 0; i < draws; ++i) {
    const DropMask m = batch_drop_block_mask(h, 1, spec, rng);
    ++counts[zero_rectangle(m.pattern.data(), h, 1)->top];
  }
  return uniform_chi_square_p(counts);
}

// ---- metric oracles ------------------------------------------------------------

inline double euclid(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

struct OracleReid {
  std::vector<double> cmc;
  double map = 0.0;
  std::size_t scored = 0;
  std::size_t skipped = 0;
};

// Explicit exclusion, full sort by (distance, gallery index), AP as the sum
// of precision at each relevant position over the relevant count.
inline OracleReid oracle_reid(const std::vector<EmbeddingRecord>& q, const std::vector<EmbeddingRecord>& g,
                              std::size_t max_rank) {
  OracleReid o;
  std::vector<double> hits(max_rank, 0.0);
  double ap_total = 0.0;
  for (const auto& query : q) {
    std::vector<std::pair<double, std::size_t>> kept;
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (g[j].identity == query.identity && g[j].camera_id == query.camera_id) continue;
      kept.emplace_back(euclid(query.vector, g[j].vector), j);
    }
    std::sort(kept.begin(), kept.end());
    std::vector<bool> relevant;
    for (const auto& [d, j] : kept) relevant.push_back(g[j].identity == query.identity);
    const auto n_rel = static_cast<std::size_t>(std::count(relevant.begin(), relevant.end(), true));
    if (n_rel == 0) {
      ++o.skipped;
      continue;
    }
    ++o.scored;
    std::vector<double> precisions;
    std::size_t found = 0;
    for (std::size_t pos = 0; pos < relevant.size(); ++pos) {
      if (!relevant[pos]) continue;
      ++found;
      precisions.push_back(static_cast<double>(found) / static_cast<double>(pos + 1));
    }
    double ap = 0.0;
    for (double p : precisions) ap += p;
    ap_total += ap / static_cast<double>(n_rel);
    for (std::size_t k = 0; k < max_rank; ++k) {
      bool any = false;
      for (std::size_t pos = 0; pos <= k && pos < relevant.size(); ++pos) any = any || relevant[pos];
      if (any) hits[k] += 1.0;
    }
  }
  o.cmc.assign(max_rank, 0.0);
  if (o.scored) {
    for (std::size_t k = 0; k < max_rank; ++k) o.cmc[k] = hits[k] / static_cast<double>(o.scored);
    o.map = ap_total / static_cast<double>(o.scored);
  }
  return o;
}

// Integer coordinates in a small box make distance ties common, exercising
// the tie-break rule.
inline std::vector<EmbeddingRecord> random_embeddings(std::mt19937_64& rng, std::size_t n, std::size_t dim,
                                                      int identities, int cameras, const std::string& prefix) {
  std::uniform_int_distribution<int> coord(-3, 3), id(0, identities - 1), cam(0, cameras - 1);
  std::vector<EmbeddingRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].sample_id = prefix + std::to_string(i);
    out[i].identity = id(rng);
    out[i].camera_id = cam(rng);
    for (std::size_t d = 0; d < dim; ++d) out[i].vector.push_back(coord(rng));
  }
  return out;
}

struct ReidInstance {
  std::vector<EmbeddingRecord> query, gallery;
};

inline ReidInstance random_reid_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> nq(1, 50), ng(1, 200), dim(1, 4);
  std::uniform_int_distribution<int> ids(2, 12), cams(1, 4);
  const std::size_t d = dim(rng);
  const int n_ids = ids(rng), n_cams = cams(rng);
  ReidInstance inst;
  inst.query = random_embeddings(rng, nq(rng), d, n_ids, n_cams, "q");
  inst.gallery = random_embeddings(rng, ng(rng), d, n_ids, n_cams, "g");
  return inst;
}

// Brute-force KNN: sort every other point by (distance, index), check the
// first K for a same-class item.
inline std::vector<double> oracle_recall(const std::vector<EmbeddingRecord>& e, const std::vector<std::size_t>& ks) {
  std::vector<double> out;
  for (std::size_t k : ks) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < e.size(); ++i) {
      std::vector<std::pair<double, std::size_t>> others;
      for (std::size_t j = 0; j < e.size(); ++j)
        if (j != i) others.emplace_back(euclid(e[i].vector, e[j].vector), j);
      std::sort(others.begin(), others.end());
      bool found = false;
      for (std::size_t t = 0; t < k; ++t) found = found || e[others[t].second].identity == e[i].identity;
      if (found) ++hit;
    }
    out.push_back(static_cast<double>(hit) / static_cast<double>(e.size()));
  }
  return out;
}

// ---- loss oracles ------------------------------------------------------------

inline double softplus_ref(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

inline std::vector<std::vector<double>> rows_of(const Tensor& x) {
  std::vector<std::vector<double>> r(x.dim(0), std::vector<double>(x.dim(1)));
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t d = 0; d < x.dim(1); ++d) r[i][d] = x.at({i, d});
  return r;
}

// Triple loop: for each anchor, scan positives and negatives directly.
inline double oracle_triplet(const Tensor& feats, const std::vector<int>& ids) {
  const auto x = rows_of(feats);
  double total = 0.0;
  for (std::size_t a = 0; a < x.size(); ++a) {
    double hardest_pos = -1.0, hardest_neg = INFINITY;
    for (std::size_t p = 0; p < x.size(); ++p) {
      if (p == a || ids[p] != ids[a]) continue;
      for (std::size_t n = 0; n < x.size(); ++n) {
        if (ids[n] == ids[a]) continue;
        hardest_pos = std::max(hardest_pos, euclid(x[a], x[p]));
        hardest_neg = std::min(hardest_neg, euclid(x[a], x[n]));
      }
    }
    total += softplus_ref(hardest_pos - hardest_neg);
  }
  return total;
}

// 1/(2|P|) Σ_{i<j same id} max(0, J_ij)², J_ij = log(Σ_k∉id(i) e^{m−D_ik} + Σ_l∉id(j) e^{m−D_jl}) + D_ij.
inline double oracle_lifted(const Tensor& feats, const std::vector<int>& ids, double margin) {
  const auto x = rows_of(feats);
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      if (ids[i] != ids[j]) continue;
      ++pairs;
      double s = 0.0;
      for (std::size_t k = 0; k < x.size(); ++k) {
        if (ids[k] != ids[i]) s += std::exp(margin - euclid(x[i], x[k]));
        if (ids[k] != ids[j]) s += std::exp(margin - euclid(x[j], x[k]));
      }
      const double jij = std::log(s) + euclid(x[i], x[j]);
      total += std::max(0.0, jij) * std::max(0.0, jij);
    }
  return total / (2.0 * static_cast<double>(pairs));
}

// P×K identity layout: identity of sample i is i / K.
inline std::vector<int> pk_labels(std::size_t p, std::size_t k) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < k; ++j) ids.push_back(static_cast<int>(i));
  return ids;
}

}  // namespace bdb::testing
