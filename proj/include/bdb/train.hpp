#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bdb/data.hpp"
#include "bdb/eval.hpp"
#include "bdb/losses.hpp"
#include "bdb/model.hpp"
#include "json.hpp"

namespace bdb {

// ---- learning-rate schedule ---------------------------------------------------

struct Schedule {
  double base_lr = 1e-3;
  std::size_t warmup_epochs = 50;
  // (epoch, lr): lr applies to every epoch strictly after `epoch`.
  std::vector<std::pair<std::size_t, double>> decay_points{{200, 1e-4}, {300, 1e-5}};
  std::size_t total_epochs = 400;

  void validate() const;
  static Schedule paper();
  static Schedule desk();
};

// Linear warm-up base·epoch/warmup for epoch ≤ warmup, then base_lr, then the
// decayed values. Epochs are 1-based.
double lr_at(std::size_t epoch, const Schedule& s);

// ---- Adam -----------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor*>> params, AdamConfig cfg = {});

  // Bias-corrected update from the parameters' accumulated gradients.
  // Throws TrainingError naming the first parameter with a non-finite grad.
  void step(double lr);

  std::size_t steps() const { return step_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<std::pair<std::string, Tensor*>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t step_ = 0;
};

// ---- training loop ---------------------------------------------------------------

enum class MetricLoss { none, triplet, lifted, margin };

struct LossConfig {
  MetricLoss metric = MetricLoss::triplet;
  bool use_softmax = true;
  LiftedParams lifted;
  MarginParams margin;

  // "triplet+softmax", "lifted", "softmax", ...
  static LossConfig parse(const std::string& spec);
  std::string spec() const;
};

struct AugmentFlags {
  bool flip = true;
  bool normalize = true;
  bool cutout = false;
  double cutout_ratio = 0.25;
  bool random_erasing = false;
};

struct TrainConfig {
  ModelConfig model;
  LossConfig loss;
  Schedule schedule = Schedule::desk();
  BatchPlan plan{8, 4};
  AugmentFlags augment;
  std::uint64_t seed = 1;
  // Evaluate on query/gallery every n epochs (and after the last one); 0 = never.
  std::size_t eval_every = 0;
  std::size_t max_rank = 50;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_metric_global = 0.0;
  double loss_softmax_global = 0.0;
  double loss_metric_drop = 0.0;
  double loss_softmax_drop = 0.0;
  std::optional<double> rank1;
  std::optional<double> map;
};

struct TrainResult {
  Model model;
  Normalizer normalizer;
  std::vector<EpochRecord> history;
  std::string mask_rng_state;
};

// Independent RNG stream `stream` of a run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// Maps the training identities to classifier indices and sets
// cfg.model.num_classes / geometry from the split.
TrainConfig bind_to_split(TrainConfig cfg, const DatasetSplit& split);

TrainResult train_loop(const TrainConfig& cfg, const DatasetSplit& split);

// Loss of one already-assembled batch; exposed for descent checks.
LossValue batch_loss(Model& model, const Tensor& images, const std::vector<int>& identities,
                     const std::vector<int>& classes, const LossConfig& loss, Rng& mask_rng,
                     Rng& sample_rng);

MetricsReport evaluate_reid(Model& model, const Normalizer* normalizer, const DatasetSplit& split,
                            std::size_t max_rank);

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history);

// ---- checkpoints ------------------------------------------------------------------

struct Checkpoint {
  nlohmann::json run_config;
  Model model;
  Normalizer normalizer;
  std::string mask_rng_state;
};

nlohmann::json checkpoint_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace bdb
