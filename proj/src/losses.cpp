#include "bdb/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "bdb/errors.hpp"

namespace bdb {

namespace {

void require_feats(const Tensor& feats, const BatchLabels& labels) {
  if (feats.rank() != 2) throw DimensionError("embeddings must be N×D, got " + shape_str(feats.shape()));
  if (feats.dim(0) != labels.size()) {
    throw DimensionError("embedding count " + std::to_string(feats.dim(0)) + " does not match " +
                         std::to_string(labels.size()) + " labels");
  }
  labels.require_metric_batch();
}

}  // namespace

void BatchLabels::require_metric_batch() const {
  std::map<int, std::size_t> counts;
  for (int id : identity) ++counts[id];
  if (counts.size() < 2) {
    throw BatchCompositionError("metric losses need at least 2 identities per batch, got " +
                                std::to_string(counts.size()));
  }
  for (const auto& [id, n] : counts) {
    if (n < 2) {
      throw BatchCompositionError("identity " + std::to_string(id) +
                                  " has a single sample in the batch; every identity needs >= 2");
    }
  }
}

Tensor pairwise_euclidean(const Tensor& x) {
  if (x.rank() != 2 || x.dim(0) == 0) {
    throw DimensionError("pairwise_euclidean expects a non-empty N×D tensor, got " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), d = x.dim(1);
  const auto xd = x.data();
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = xd[i * d + k] - xd[j * d + k];
        s += diff * diff;
      }
      dist[i * n + j] = dist[j * n + i] = std::sqrt(s);
    }
  std::vector<double> values = dist;
  return Tensor::from_op(
      {n, n}, std::move(dist), {x},
      [x, n, d, values = std::move(values)](std::span<const double> g,
                                            std::span<std::vector<double>*> in) {
        if (!in[0]) return;
        const auto xd = x.data();
        auto& gx = *in[0];
        const double floor_root = std::sqrt(kSqrtGuard);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double gij = g[i * n + j];
            if (gij == 0.0) continue;
            const double denom = std::max(values[i * n + j], floor_root);
            for (std::size_t k = 0; k < d; ++k) {
              const double diff = xd[i * d + k] - xd[j * d + k];
              const double v = gij * diff / denom;
              gx[i * d + k] += v;
              gx[j * d + k] -= v;
            }
          }
      });
}

Tensor batch_hard_soft_margin_triplet(const Tensor& feats, const BatchLabels& labels) {
  require_feats(feats, labels);
  const std::size_t n = labels.size();
  const Tensor dist = pairwise_euclidean(feats);
  const auto dd = dist.data();
  std::vector<std::size_t> pos_idx(n), neg_idx(n);
  for (std::size_t a = 0; a < n; ++a) {
    double hardest_pos = -1.0, hardest_neg = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      const double v = dd[a * n + j];
      if (labels.identity[j] == labels.identity[a]) {
        if (j != a && v > hardest_pos) {
          hardest_pos = v;
          pos_idx[a] = a * n + j;
        }
      } else if (v < hardest_neg) {
        hardest_neg = v;
        neg_idx[a] = a * n + j;
      }
    }
  }
  return sum(softplus(sub(gather(dist, pos_idx), gather(dist, neg_idx))));
}

Tensor softmax_ce(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw DimensionError("logits must be N×C, got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw DimensionError("label count does not match logits rows");
  if (n == 0) throw DimensionError("softmax_ce on an empty batch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw LabelError("label " + std::to_string(y) + " outside [0," + std::to_string(c) + ")");
    }
  }
  const auto z = logits.data();
  std::vector<double> probs(n * c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = z.data() + i * c;
    const double m = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += std::exp(row[k] - m);
    const double lse = m + std::log(s);
    for (std::size_t k = 0; k < c; ++k) probs[i * c + k] = std::exp(row[k] - lse);
    total += lse - row[labels[i]];
  }
  return Tensor::from_op({}, {total / static_cast<double>(n)}, {logits},
                         [n, c, labels, probs = std::move(probs)](std::span<const double> g,
                                                                  std::span<std::vector<double>*> in) {
                           if (!in[0]) return;
                           const double scale = g[0] / static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t k = 0; k < c; ++k) {
                               const double onehot = static_cast<int>(k) == labels[i] ? 1.0 : 0.0;
                               (*in[0])[i * c + k] += scale * (probs[i * c + k] - onehot);
                             }
                         });
}

Tensor lifted_structure_loss(const Tensor& feats, const BatchLabels& labels,
                             const LiftedParams& params) {
  require_feats(feats, labels);
  const std::size_t n = labels.size();
  const Tensor dist = pairwise_euclidean(feats);
  const auto& id = labels.identity;

  Tensor total;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      if (id[i] != id[j]) continue;
      std::vector<std::size_t> negs;
      for (std::size_t k = 0; k < n; ++k)
        if (id[k] != id[i]) negs.push_back(i * n + k);
      for (std::size_t l = 0; l < n; ++l)
        if (id[l] != id[j]) negs.push_back(j * n + l);
      const Tensor hinge_arg =
          add(log(sum(exp(add_scalar(mul_scalar(gather(dist, negs), -1.0), params.margin)))),
              sum(gather(dist, {i * n + j})));
      const Tensor r = relu(hinge_arg);
      const Tensor term = sum(mul(r, r));
      total = total.defined() ? add(total, term) : term;
      ++pairs;
    }
  return mul_scalar(total, 1.0 / (2.0 * static_cast<double>(pairs)));
}

std::vector<double> distance_weighted_probabilities(const std::vector<double>& distances,
                                                    const std::vector<bool>& allowed,
                                                    std::size_t dim, const MarginParams& params) {
  const std::size_t n = distances.size();
  const double nd = static_cast<double>(dim);
  std::vector<double> log_w(n, -std::numeric_limits<double>::infinity());
  double max_log = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) {
    if (!allowed[k]) continue;
    const double d = std::max(distances[k], params.cutoff);
    const double inner = std::max(1.0 - 0.25 * d * d, 1e-8);
    // inverse of the pairwise-distance density on the unit sphere
    log_w[k] = (2.0 - nd) * std::log(d) - 0.5 * (nd - 3.0) * std::log(inner);
    max_log = std::max(max_log, log_w[k]);
  }
  std::vector<double> w(n, 0.0);
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (!allowed[k] || distances[k] >= params.nonzero_loss_cutoff) continue;
    w[k] = std::exp(log_w[k] - max_log);
    total += w[k];
  }
  if (total <= 0.0) {  // every candidate beyond the cutoff: fall back to uniform
    for (std::size_t k = 0; k < n; ++k) w[k] = allowed[k] ? 1.0 : 0.0;
    total = static_cast<double>(std::count(allowed.begin(), allowed.end(), true));
  }
  for (double& v : w) v /= total;
  return w;
}

Tensor weighted_margin_loss(const Tensor& feats, const BatchLabels& labels, Rng& rng,
                            const MarginParams& params) {
  require_feats(feats, labels);
  const std::size_t n = labels.size();
  const std::size_t dim = feats.dim(1);
  const Tensor dist = pairwise_euclidean(l2_normalize_rows(feats));
  const auto dd = dist.data();
  const auto& id = labels.identity;

  std::vector<std::size_t> pos_idx, neg_idx;
  for (std::size_t a = 0; a < n; ++a) {
    std::vector<double> row(dd.begin() + a * n, dd.begin() + (a + 1) * n);
    std::vector<bool> allowed(n);
    for (std::size_t k = 0; k < n; ++k) allowed[k] = id[k] != id[a];
    const auto probs = distance_weighted_probabilities(row, allowed, dim, params);
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || id[p] != id[a]) continue;
      std::discrete_distribution<std::size_t> pick(probs.begin(), probs.end());
      pos_idx.push_back(a * n + p);
      neg_idx.push_back(a * n + pick(rng));
    }
  }
  const Tensor pos_term = relu(add_scalar(gather(dist, pos_idx), params.alpha - params.beta));
  const Tensor neg_term =
      relu(add_scalar(mul_scalar(gather(dist, neg_idx), -1.0), params.alpha + params.beta));
  return mul_scalar(add(sum(pos_term), sum(neg_term)), 1.0 / static_cast<double>(pos_idx.size()));
}

double LossValue::component(const std::string& name) const {
  const auto it = components.find(name);
  return it == components.end() ? 0.0 : it->second.item();
}

LossValue combine(std::map<std::string, Tensor> components) {
  if (components.empty()) throw SpecError("combine needs at least one loss component");
  Tensor total;
  for (const auto& [name, t] : components) total = total.defined() ? add(total, t) : t;
  return {total, std::move(components)};
}

}  // namespace bdb
