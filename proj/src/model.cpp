#include "bdb/model.hpp"

#include <cmath>

#include "bdb/errors.hpp"

namespace bdb {

namespace {

Linear make_linear(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> w(in * out), b(out);
  for (double& v : w) v = u(rng);
  for (double& v : b) v = u(rng);
  return {Tensor::from({in, out}, std::move(w), true), Tensor::from({out}, std::move(b), true)};
}

void require_positive(std::size_t v, const char* name) {
  if (v == 0) throw ConfigError(std::string(name) + " must be positive");
}

nlohmann::json tensor_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

void load_tensor(Tensor& t, const nlohmann::json& j, const std::string& name) {
  const auto shape = j.at("shape").get<Shape>();
  auto data = j.at("data").get<std::vector<double>>();
  if (shape != t.shape()) {
    throw ConfigError("checkpoint parameter " + name + " has shape " + shape_str(shape) +
                      ", model expects " + shape_str(t.shape()));
  }
  std::copy(data.begin(), data.end(), t.mutable_data().begin());
}

}  // namespace

std::string_view to_string(Pooling p) { return p == Pooling::gap ? "gap" : "gmp"; }

Pooling parse_pooling(std::string_view name) {
  if (name == "gap") return Pooling::gap;
  if (name == "gmp") return Pooling::gmp;
  throw ConfigError("unknown pooling '" + std::string(name) + "' (expected gap|gmp)");
}

void BackboneConfig::validate() const {
  require_positive(grid_h, "grid_h");
  require_positive(grid_w, "grid_w");
  require_positive(in_patch_dim, "in_patch_dim");
  require_positive(feat_channels, "feat_channels");
}

void BranchConfig::validate() const {
  require_positive(global_reduce_dim, "global_reduce_dim");
  require_positive(drop_reduce_dim, "drop_reduce_dim");
  if (!use_global_branch && !use_drop_branch) throw ConfigError("at least one branch must be enabled");
  drop_spec.validate();
}

std::size_t ModelConfig::descriptor_dim() const {
  return (branches.use_global_branch ? branches.global_reduce_dim : 0) +
         (branches.use_drop_branch ? branches.drop_reduce_dim : 0);
}

void ModelConfig::validate() const {
  backbone.validate();
  branches.validate();
}

nlohmann::json to_json(const ModelConfig& cfg) {
  const auto& bb = cfg.backbone;
  const auto& br = cfg.branches;
  return {
      {"backbone",
       {{"grid_h", bb.grid_h},
        {"grid_w", bb.grid_w},
        {"in_patch_dim", bb.in_patch_dim},
        {"feat_channels", bb.feat_channels},
        {"mixing_blocks", bb.mixing_blocks}}},
      {"branches",
       {{"global_reduce_dim", br.global_reduce_dim},
        {"drop_reduce_dim", br.drop_reduce_dim},
        {"use_global_branch", br.use_global_branch},
        {"use_drop_branch", br.use_drop_branch},
        {"drop_pooling", to_string(br.drop_pooling)},
        {"drop_kind", to_string(br.drop_spec.kind)},
        {"r_h", br.drop_spec.r_h},
        {"r_w", br.drop_spec.r_w},
        {"p", br.drop_spec.p}}},
      {"num_classes", cfg.num_classes},
      {"normalize_descriptor", cfg.normalize_descriptor},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  const auto& bb = j.at("backbone");
  cfg.backbone.grid_h = bb.at("grid_h");
  cfg.backbone.grid_w = bb.at("grid_w");
  cfg.backbone.in_patch_dim = bb.at("in_patch_dim");
  cfg.backbone.feat_channels = bb.at("feat_channels");
  cfg.backbone.mixing_blocks = bb.at("mixing_blocks");
  const auto& br = j.at("branches");
  cfg.branches.global_reduce_dim = br.at("global_reduce_dim");
  cfg.branches.drop_reduce_dim = br.at("drop_reduce_dim");
  cfg.branches.use_global_branch = br.at("use_global_branch");
  cfg.branches.use_drop_branch = br.at("use_drop_branch");
  cfg.branches.drop_pooling = parse_pooling(br.at("drop_pooling").get<std::string>());
  cfg.branches.drop_spec.kind = parse_drop_kind(br.at("drop_kind").get<std::string>());
  cfg.branches.drop_spec.r_h = br.at("r_h");
  cfg.branches.drop_spec.r_w = br.at("r_w");
  cfg.branches.drop_spec.p = br.at("p");
  cfg.num_classes = j.at("num_classes");
  cfg.normalize_descriptor = j.at("normalize_descriptor");
  return cfg;
}

// ---- Model -------------------------------------------------------------------

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  const auto& bb = cfg_.backbone;
  const auto& br = cfg_.branches;
  const std::size_t c = bb.feat_channels;

  embed_ = make_linear(bb.in_patch_dim, c, rng);
  for (std::size_t i = 0; i < bb.mixing_blocks; ++i) mixing_.push_back(make_linear(c, c, rng));

  // Disabled branches still draw their parameters so that the enabled ones
  // are initialized identically across branch ablations.
  global_reduce_ = make_linear(c, br.global_reduce_dim, rng);
  global_bn_ = BatchNorm(br.global_reduce_dim);
  bottleneck_ = make_linear(c, c, rng);
  drop_reduce_ = make_linear(c, br.drop_reduce_dim, rng);
  drop_bn_ = BatchNorm(br.drop_reduce_dim);
  if (cfg_.num_classes > 0) {
    global_cls_ = make_linear(br.global_reduce_dim, cfg_.num_classes, rng);
    drop_cls_ = make_linear(br.drop_reduce_dim, cfg_.num_classes, rng);
  }
}

Tensor Model::per_position(const Tensor& map, const Linear& layer) const {
  // B×C×H×W -> (B·H·W)×C -> residual block -> B×C×H×W
  const std::size_t b = map.dim(0), c = map.dim(1), h = map.dim(2), w = map.dim(3);
  const Tensor rows = reshape(permute(map, {0, 2, 3, 1}), {b * h * w, c});
  const Tensor out = add(rows, relu(layer(rows)));
  return permute(reshape(out, {b, h, w, c}), {0, 3, 1, 2});
}

Tensor Model::backbone_forward(const Tensor& images) const {
  const auto& bb = cfg_.backbone;
  if (images.rank() != 3 || images.dim(1) != bb.patches() || images.dim(2) != bb.in_patch_dim) {
    throw DimensionError("backbone expects B×" + std::to_string(bb.patches()) + "×" +
                         std::to_string(bb.in_patch_dim) + " input, got " + shape_str(images.shape()));
  }
  const std::size_t b = images.dim(0);
  Tensor h = relu(embed_(reshape(images, {b * bb.patches(), bb.in_patch_dim})));
  for (const auto& block : mixing_) h = add(h, relu(block(h)));
  return permute(reshape(h, {b, bb.grid_h, bb.grid_w, bb.feat_channels}), {0, 3, 1, 2});
}

std::pair<Tensor, Tensor> Model::global_branch(const Tensor& feature_map, Mode mode) {
  const Tensor pooled = mean(feature_map, {2, 3});
  Tensor feat = relu(global_bn_.forward(global_reduce_(pooled), mode));
  Tensor logits = cfg_.num_classes > 0 ? global_cls_(feat) : Tensor{};
  return {feat, logits};
}

std::pair<Tensor, Tensor> Model::drop_branch(const Tensor& feature_map, Mode mode, Rng* mask_rng,
                                             Tensor* bottleneck_out) {
  Tensor map = per_position(feature_map, bottleneck_);
  if (bottleneck_out) *bottleneck_out = map;
  if (mode == Mode::train && cfg_.branches.drop_spec.kind != DropKind::none) {
    if (!mask_rng) throw SpecError("train-mode drop branch requires a mask RNG");
    map = apply_mask(map, make_mask(map.shape(), cfg_.branches.drop_spec, *mask_rng));
  }
  const Tensor pooled =
      cfg_.branches.drop_pooling == Pooling::gmp ? max(map, {2, 3}) : mean(map, {2, 3});
  Tensor feat = relu(drop_bn_.forward(drop_reduce_(pooled), mode));
  Tensor logits = cfg_.num_classes > 0 ? drop_cls_(feat) : Tensor{};
  return {feat, logits};
}

ModelOutput Model::forward(const Tensor& images, Mode mode, Rng* mask_rng) {
  ModelOutput out;
  out.feature_map = backbone_forward(images);
  if (cfg_.branches.use_global_branch) {
    std::tie(out.global_feat, out.global_logits) = global_branch(out.feature_map, mode);
  }
  if (cfg_.branches.use_drop_branch) {
    std::tie(out.drop_feat, out.drop_logits) =
        drop_branch(out.feature_map, mode, mask_rng, &out.drop_feature_map);
  }
  if (mode == Mode::eval) {
    if (out.global_feat.defined() && out.drop_feat.defined()) {
      out.descriptor = concat(out.global_feat, out.drop_feat, 1);
    } else {
      out.descriptor = out.global_feat.defined() ? out.global_feat : out.drop_feat;
    }
    if (cfg_.normalize_descriptor) out.descriptor = l2_normalize_rows(out.descriptor);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Model::parameters() {
  std::vector<std::pair<std::string, Tensor*>> ps;
  auto add_linear = [&ps](const std::string& name, Linear& l) {
    ps.emplace_back(name + ".weight", &l.weight);
    ps.emplace_back(name + ".bias", &l.bias);
  };
  add_linear("backbone.embed", embed_);
  for (std::size_t i = 0; i < mixing_.size(); ++i) add_linear("backbone.mix" + std::to_string(i), mixing_[i]);
  if (cfg_.branches.use_global_branch) {
    add_linear("global.reduce", global_reduce_);
    ps.emplace_back("global.bn.gamma", &global_bn_.gamma());
    ps.emplace_back("global.bn.beta", &global_bn_.beta());
    if (cfg_.num_classes > 0) add_linear("global.classifier", global_cls_);
  }
  if (cfg_.branches.use_drop_branch) {
    add_linear("drop.bottleneck", bottleneck_);
    add_linear("drop.reduce", drop_reduce_);
    ps.emplace_back("drop.bn.gamma", &drop_bn_.gamma());
    ps.emplace_back("drop.bn.beta", &drop_bn_.beta());
    if (cfg_.num_classes > 0) add_linear("drop.classifier", drop_cls_);
  }
  return ps;
}

std::vector<std::pair<std::string, BatchNorm*>> Model::batch_norms() {
  std::vector<std::pair<std::string, BatchNorm*>> bns;
  if (cfg_.branches.use_global_branch) bns.emplace_back("global.bn", &global_bn_);
  if (cfg_.branches.use_drop_branch) bns.emplace_back("drop.bn", &drop_bn_);
  return bns;
}

void Model::zero_grad() {
  for (auto& [name, p] : parameters()) p->zero_grad();
}

nlohmann::json Model::state_json() const {
  auto& self = const_cast<Model&>(*this);
  nlohmann::json params = nlohmann::json::object();
  for (auto& [name, p] : self.parameters()) params[name] = tensor_json(*p);
  nlohmann::json bns = nlohmann::json::object();
  for (auto& [name, bn] : self.batch_norms()) {
    bns[name] = {{"running_mean", bn->running_mean()}, {"running_var", bn->running_var()}};
  }
  return {{"config", to_json(cfg_)}, {"parameters", params}, {"batch_norm", bns}};
}

Model Model::from_state_json(const nlohmann::json& j) {
  Model m(model_config_from_json(j.at("config")), 0);
  const auto& params = j.at("parameters");
  for (auto& [name, p] : m.parameters()) {
    if (!params.contains(name)) throw ConfigError("checkpoint is missing parameter " + name);
    load_tensor(*p, params.at(name), name);
  }
  const auto& bns = j.at("batch_norm");
  for (auto& [name, bn] : m.batch_norms()) {
    if (!bns.contains(name)) throw ConfigError("checkpoint is missing batch-norm state " + name);
    bn->running_mean() = bns.at(name).at("running_mean").get<std::vector<double>>();
    bn->running_var() = bns.at(name).at("running_var").get<std::vector<double>>();
    if (bn->running_mean().size() != bn->features() || bn->running_var().size() != bn->features()) {
      throw ConfigError("checkpoint batch-norm state " + name + " has the wrong width");
    }
  }
  return m;
}

// ---- spatial energy ------------------------------------------------------------

EnergyMaps spatial_energy_map(const Tensor& feature_map) {
  if (feature_map.rank() != 4) {
    throw DimensionError("energy map expects B×C×H×W, got " + shape_str(feature_map.shape()));
  }
  const std::size_t b = feature_map.dim(0), c = feature_map.dim(1);
  const std::size_t h = feature_map.dim(2), w = feature_map.dim(3), hw = h * w;
  const auto d = feature_map.data();
  EnergyMaps out{b, h, w, std::vector<double>(b * hw, 0.0), std::vector<double>(b, 0.0)};
  for (std::size_t bi = 0; bi < b; ++bi) {
    double* e = out.energy.data() + bi * hw;
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double* ch = d.data() + (bi * c + ci) * hw;
      for (std::size_t p = 0; p < hw; ++p) e[p] += ch[p] * ch[p];
    }
    double total = 0.0;
    for (std::size_t p = 0; p < hw; ++p) total += (e[p] = std::sqrt(e[p]));
    double entropy = 0.0;
    for (std::size_t p = 0; p < hw; ++p) {
      e[p] = total > 0.0 ? e[p] / total : 1.0 / static_cast<double>(hw);
      if (e[p] > 0.0) entropy -= e[p] * std::log(e[p]);
    }
    out.entropy[bi] = entropy;
  }
  return out;
}

}  // namespace bdb
