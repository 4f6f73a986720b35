#include "bdb/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "bdb/errors.hpp"

namespace bdb {

// ---- schedule -------------------------------------------------------------------

void Schedule::validate() const {
  if (total_epochs == 0) throw ScheduleError("total_epochs must be >= 1");
  if (!(base_lr > 0.0)) throw ScheduleError("base_lr must be positive");
  std::size_t prev = 0;
  for (const auto& [epoch, lr] : decay_points) {
    if (epoch <= prev && prev != 0) throw ScheduleError("decay epochs must be strictly increasing");
    if (!(lr > 0.0)) throw ScheduleError("decayed learning rates must be positive");
    prev = epoch;
  }
  if (!decay_points.empty() && decay_points.front().first < warmup_epochs) {
    throw ScheduleError("first decay point precedes the end of warm-up");
  }
}

Schedule Schedule::paper() { return {1e-3, 50, {{200, 1e-4}, {300, 1e-5}}, 400}; }
Schedule Schedule::desk() { return {1e-3, 8, {{30, 1e-4}, {45, 1e-5}}, 60}; }

double lr_at(std::size_t epoch, const Schedule& s) {
  if (epoch < 1 || epoch > s.total_epochs) {
    throw ScheduleError("epoch " + std::to_string(epoch) + " outside [1, " +
                        std::to_string(s.total_epochs) + "]");
  }
  if (epoch <= s.warmup_epochs) {
    return s.base_lr * (static_cast<double>(epoch) / static_cast<double>(s.warmup_epochs));
  }
  double lr = s.base_lr;
  for (const auto& [point, value] : s.decay_points)
    if (epoch > point) lr = value;
  return lr;
}

// ---- Adam -----------------------------------------------------------------------

Adam::Adam(std::vector<std::pair<std::string, Tensor*>> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p->numel(), 0.0);
    v_.emplace_back(p->numel(), 0.0);
  }
}

void Adam::step(double lr) {
  for (const auto& [name, p] : params_) {
    for (double g : p->grad()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter " + name);
    }
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(cfg_.beta1, t);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i].second;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g.empty() ? 0.0 : g[k];
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps);
    }
  }
}

// ---- losses config -----------------------------------------------------------------

LossConfig LossConfig::parse(const std::string& spec) {
  LossConfig cfg;
  cfg.metric = MetricLoss::none;
  cfg.use_softmax = false;
  std::stringstream ss(spec);
  std::string term;
  std::size_t terms = 0;
  while (std::getline(ss, term, '+')) {
    ++terms;
    MetricLoss m = MetricLoss::none;
    if (term == "softmax") {
      if (cfg.use_softmax) throw ConfigError("loss term 'softmax' given twice");
      cfg.use_softmax = true;
      continue;
    }
    if (term == "triplet") {
      m = MetricLoss::triplet;
    } else if (term == "lifted") {
      m = MetricLoss::lifted;
    } else if (term == "margin") {
      m = MetricLoss::margin;
    } else {
      throw ConfigError("unknown loss term '" + term + "' (expected triplet|lifted|margin|softmax)");
    }
    if (cfg.metric != MetricLoss::none) throw ConfigError("at most one metric loss term is allowed");
    cfg.metric = m;
  }
  if (terms == 0) throw ConfigError("loss specification is empty");
  return cfg;
}

std::string LossConfig::spec() const {
  std::string s;
  switch (metric) {
    case MetricLoss::none: break;
    case MetricLoss::triplet: s = "triplet"; break;
    case MetricLoss::lifted: s = "lifted"; break;
    case MetricLoss::margin: s = "margin"; break;
  }
  if (use_softmax) s += s.empty() ? "softmax" : "+softmax";
  return s;
}

void TrainConfig::validate() const {
  model.validate();
  schedule.validate();
  plan.validate();
  if (loss.metric == MetricLoss::none && !loss.use_softmax) throw ConfigError("no loss term enabled");
  if (augment.cutout_ratio <= 0.0 || augment.cutout_ratio > 1.0) {
    throw ConfigError("cutout_ratio must lie in (0,1]");
  }
  if (max_rank == 0) throw ConfigError("max_rank must be >= 1");
}

// ---- training loop -------------------------------------------------------------------

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over (seed, stream)
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

TrainConfig bind_to_split(TrainConfig cfg, const DatasetSplit& split) {
  std::map<int, int> classes;
  for (const auto& r : split.train) classes.emplace(r.identity, 0);
  cfg.model.num_classes = cfg.loss.use_softmax ? classes.size() : 0;
  cfg.model.backbone.grid_h = split.geometry.grid_h;
  cfg.model.backbone.grid_w = split.geometry.grid_w;
  cfg.model.backbone.in_patch_dim = split.geometry.patch_dim;
  return cfg;
}

namespace {

Tensor metric_loss(const Tensor& feats, const BatchLabels& labels, const LossConfig& cfg, Rng& rng) {
  switch (cfg.metric) {
    case MetricLoss::triplet: return batch_hard_soft_margin_triplet(feats, labels);
    case MetricLoss::lifted: return lifted_structure_loss(feats, labels, cfg.lifted);
    case MetricLoss::margin: return weighted_margin_loss(feats, labels, rng, cfg.margin);
    case MetricLoss::none: break;
  }
  return {};
}

std::string metric_name(MetricLoss m) {
  switch (m) {
    case MetricLoss::triplet: return "triplet";
    case MetricLoss::lifted: return "lifted";
    case MetricLoss::margin: return "margin";
    case MetricLoss::none: break;
  }
  return "none";
}

const Normalizer* normalizer_or_null(const Normalizer& n) { return n.mean.empty() ? nullptr : &n; }

}  // namespace

LossValue batch_loss(Model& model, const Tensor& images, const std::vector<int>& identities,
                     const std::vector<int>& classes, const LossConfig& loss, Rng& mask_rng,
                     Rng& sample_rng) {
  const ModelOutput out = model.forward(images, Mode::train, &mask_rng);
  const BatchLabels labels{identities};
  const std::string metric = metric_name(loss.metric);
  std::map<std::string, Tensor> parts;
  const std::pair<const char*, std::pair<const Tensor*, const Tensor*>> branches[] = {
      {"global", {&out.global_feat, &out.global_logits}},
      {"drop", {&out.drop_feat, &out.drop_logits}},
  };
  for (const auto& [branch, heads] : branches) {
    const auto& [feat, logits] = heads;
    if (!feat->defined()) continue;
    if (loss.metric != MetricLoss::none) {
      parts[metric + "_" + branch] = metric_loss(*feat, labels, loss, sample_rng);
    }
    if (loss.use_softmax) parts[std::string("softmax_") + branch] = softmax_ce(*logits, classes);
  }
  return combine(std::move(parts));
}

MetricsReport evaluate_reid(Model& model, const Normalizer* normalizer, const DatasetSplit& split,
                            std::size_t max_rank) {
  const auto q = extract_embeddings(model, split.query, normalizer);
  const auto g = extract_embeddings(model, split.gallery, normalizer);
  return reid_metrics(q, g, max_rank);
}

TrainResult train_loop(const TrainConfig& base_cfg, const DatasetSplit& split) {
  split.validate();
  const TrainConfig cfg = bind_to_split(base_cfg, split);
  cfg.validate();
  const Geometry& geo = split.geometry;

  std::map<int, int> class_of;
  for (const auto& r : split.train) class_of.emplace(r.identity, 0);
  {
    int next = 0;
    for (auto& [id, cls] : class_of) cls = next++;
  }

  TrainResult result{Model(cfg.model, derive_seed(cfg.seed, 0)), {}, {}, {}};
  if (cfg.augment.normalize) result.normalizer = Normalizer::fit(split.train, geo.patch_dim);
  const Normalizer* normalizer = normalizer_or_null(result.normalizer);

  PKSampler sampler(split.train, cfg.plan, derive_seed(cfg.seed, 1));
  Rng augment_rng(derive_seed(cfg.seed, 2));
  Rng mask_rng(derive_seed(cfg.seed, 3));
  Rng sample_rng(derive_seed(cfg.seed, 4));
  Model& model = result.model;
  Adam adam(model.parameters());
  const AugmentSpec aug{cfg.augment.flip, normalizer, cfg.augment.cutout, cfg.augment.cutout_ratio,
                        cfg.augment.random_erasing};

  for (std::size_t epoch = 1; epoch <= cfg.schedule.total_epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg.schedule);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    const auto batches = sampler.next_epoch();
    for (const auto& batch : batches) {
      std::vector<Record> augmented;
      augmented.reserve(batch.size());
      std::vector<int> ids, classes;
      for (std::size_t idx : batch) {
        const Record& r = split.train[idx];
        augmented.push_back(augment(r, aug, geo, augment_rng));
        ids.push_back(r.identity);
        classes.push_back(class_of.at(r.identity));
      }
      std::vector<const Record*> ptrs;
      for (const auto& r : augmented) ptrs.push_back(&r);

      const LossValue loss =
          batch_loss(model, to_batch(ptrs, geo), ids, classes, cfg.loss, mask_rng, sample_rng);
      const double total = loss.total.item();
      if (!std::isfinite(total)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch));
      }
      model.zero_grad();
      loss.total.backward();
      adam.step(lr);

      rec.loss_total += total;
      for (const auto& [name, t] : loss.components) {
        const double v = t.item();
        if (name.starts_with("softmax_")) {
          (name.ends_with("_global") ? rec.loss_softmax_global : rec.loss_softmax_drop) += v;
        } else {
          (name.ends_with("_global") ? rec.loss_metric_global : rec.loss_metric_drop) += v;
        }
      }
    }
    const double nb = static_cast<double>(batches.size());
    rec.loss_total /= nb;
    rec.loss_metric_global /= nb;
    rec.loss_softmax_global /= nb;
    rec.loss_metric_drop /= nb;
    rec.loss_softmax_drop /= nb;
    if (cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.schedule.total_epochs)) {
      const auto m = evaluate_reid(model, normalizer, split, cfg.max_rank);
      rec.rank1 = m.rank1;
      rec.map = m.map;
    }
    result.history.push_back(rec);
  }
  std::ostringstream rng_state;
  rng_state << mask_rng;
  result.mask_rng_state = rng_state.str();
  return result;
}

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history) {
  out << "epoch,lr,loss_total,loss_triplet_g,loss_softmax_g,loss_triplet_d,loss_softmax_d,rank1,map\n";
  const auto old_precision = out.precision(17);
  for (const auto& r : history) {
    out << r.epoch << ',' << r.lr << ',' << r.loss_total << ',' << r.loss_metric_global << ','
        << r.loss_softmax_global << ',' << r.loss_metric_drop << ',' << r.loss_softmax_drop << ',';
    if (r.rank1) out << *r.rank1;
    out << ',';
    if (r.map) out << *r.map;
    out << '\n';
  }
  out.precision(old_precision);
}

// ---- checkpoints -----------------------------------------------------------------------

nlohmann::json checkpoint_json(const Checkpoint& c) {
  return {{"format", "bdb-checkpoint v1"},
          {"run_config", c.run_config},
          {"model", c.model.state_json()},
          {"normalizer", {{"mean", c.normalizer.mean}, {"stddev", c.normalizer.stddev}}},
          {"rng", {{"mask", c.mask_rng_state}}}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "bdb-checkpoint v1") throw ConfigError("unsupported checkpoint format");
    Normalizer n{j.at("normalizer").at("mean").get<std::vector<double>>(),
                 j.at("normalizer").at("stddev").get<std::vector<double>>()};
    return {j.at("run_config"), Model::from_state_json(j.at("model")), std::move(n),
            j.at("rng").at("mask").get<std::string>()};
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out << checkpoint_json(c).dump() << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace bdb
