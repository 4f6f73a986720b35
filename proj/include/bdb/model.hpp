#pragma once

// Two-branch embedding network: a per-position backbone producing a
// B×C×H×W feature map, a global branch (GAP) and a feature dropping branch
// (bottleneck, batch-shared mask, GMP). At test time the branch features are
// concatenated into one descriptor.

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bdb/masks.hpp"
#include "bdb/tensor.hpp"
#include "json.hpp"

namespace bdb {

enum class Pooling { gap, gmp };

std::string_view to_string(Pooling p);
Pooling parse_pooling(std::string_view name);

struct BackboneConfig {
  std::size_t grid_h = 12;
  std::size_t grid_w = 4;
  std::size_t in_patch_dim = 8;
  std::size_t feat_channels = 32;
  std::size_t mixing_blocks = 1;

  std::size_t patches() const { return grid_h * grid_w; }
  void validate() const;
};

struct BranchConfig {
  std::size_t global_reduce_dim = 512;
  std::size_t drop_reduce_dim = 1024;
  DropSpec drop_spec;
  bool use_global_branch = true;
  bool use_drop_branch = true;
  Pooling drop_pooling = Pooling::gmp;

  void validate() const;
};

struct ModelConfig {
  BackboneConfig backbone;
  BranchConfig branches;
  // Number of training identities; 0 means no classifier heads.
  std::size_t num_classes = 0;
  bool normalize_descriptor = false;

  std::size_t descriptor_dim() const;
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct ModelOutput {
  Tensor feature_map;       // backbone output T, B×C×H×W
  Tensor drop_feature_map;  // bottleneck output before masking
  Tensor global_feat;
  Tensor global_logits;
  Tensor drop_feat;
  Tensor drop_logits;
  Tensor descriptor;  // eval mode only
};

struct Linear {
  Tensor weight;  // in×out
  Tensor bias;    // out
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // images: B×(grid_h·grid_w)×in_patch_dim
  Tensor backbone_forward(const Tensor& images) const;
  // Returns (feat, logits); logits are undefined without classifier heads.
  std::pair<Tensor, Tensor> global_branch(const Tensor& feature_map, Mode mode);
  std::pair<Tensor, Tensor> drop_branch(const Tensor& feature_map, Mode mode, Rng* mask_rng,
                                        Tensor* bottleneck_out = nullptr);
  // mask_rng is required in train mode when the drop branch is enabled.
  ModelOutput forward(const Tensor& images, Mode mode, Rng* mask_rng = nullptr);

  // Trainable parameters in a fixed order with stable names.
  std::vector<std::pair<std::string, Tensor*>> parameters();
  std::vector<std::pair<std::string, BatchNorm*>> batch_norms();
  void zero_grad();

  nlohmann::json state_json() const;
  static Model from_state_json(const nlohmann::json& j);

 private:
  Tensor per_position(const Tensor& map, const Linear& layer) const;

  ModelConfig cfg_;
  Linear embed_;
  std::vector<Linear> mixing_;
  Linear global_reduce_;
  BatchNorm global_bn_{1};
  Linear global_cls_;
  Linear bottleneck_;
  Linear drop_reduce_;
  BatchNorm drop_bn_{1};
  Linear drop_cls_;
};

// Per-location channel L2 norm normalized to sum 1 per sample, plus the
// spatial entropy of each sample's distribution.
struct EnergyMaps {
  std::size_t batch = 0, height = 0, width = 0;
  std::vector<double> energy;   // B×H×W
  std::vector<double> entropy;  // B
};

EnergyMaps spatial_energy_map(const Tensor& feature_map);

}  // namespace bdb
