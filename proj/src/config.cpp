#include "bdb/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "bdb/errors.hpp"

namespace bdb {

namespace {

using Json = nlohmann::ordered_json;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw ConfigError(std::string(key) + ": invalid value '" + std::string(value) + "' (expected " +
                    std::string(expected) + ")");
}

std::size_t to_size(std::string_view key, std::string_view value) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size() || value.empty()) {
    bad_value(key, value, "a non-negative integer");
  }
  return v;
}

double to_double(std::string_view key, std::string_view value) {
  const std::string s(value);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) bad_value(key, value, "a finite number");
  return v;
}

bool to_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  bad_value(key, value, "true|false");
}

// "30:1e-4,45:1e-5"; empty means no decay.
std::vector<std::pair<std::size_t, double>> to_decay(std::string_view key, std::string_view value) {
  std::vector<std::pair<std::size_t, double>> out;
  std::stringstream ss{std::string(value)};
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) bad_value(key, value, "epoch:lr pairs separated by commas");
    out.emplace_back(to_size(key, trim(item.substr(0, colon))), to_double(key, trim(item.substr(colon + 1))));
  }
  return out;
}

std::string decay_string(const std::vector<std::pair<std::size_t, double>>& points) {
  std::string s;
  for (const auto& [epoch, lr] : points) {
    if (!s.empty()) s += ',';
    s += std::to_string(epoch) + ':' + Json(lr).dump();
  }
  return s;
}

struct Entry {
  Knob knob;
  std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
  std::function<Json(const RunConfig&)> get;
};

template <typename Access>
Entry size_knob(std::string key, std::string help, Access access) {
  return {{std::move(key), std::move(help)},
          [access](RunConfig& c, std::string_view k, std::string_view v) { access(c) = to_size(k, v); },
          [access](const RunConfig& c) { return Json(access(c)); }};
}

template <typename Access>
Entry double_knob(std::string key, std::string help, Access access) {
  return {{std::move(key), std::move(help)},
          [access](RunConfig& c, std::string_view k, std::string_view v) { access(c) = to_double(k, v); },
          [access](const RunConfig& c) { return Json(access(c)); }};
}

template <typename Access>
Entry bool_knob(std::string key, std::string help, Access access) {
  return {{std::move(key), std::move(help)},
          [access](RunConfig& c, std::string_view k, std::string_view v) { access(c) = to_bool(k, v); },
          [access](const RunConfig& c) { return Json(access(c)); }};
}

template <typename Access>
Entry string_knob(std::string key, std::string help, Access access) {
  return {{std::move(key), std::move(help)},
          [access](RunConfig& c, std::string_view, std::string_view v) { access(c) = std::string(v); },
          [access](const RunConfig& c) { return Json(access(c)); }};
}

#define BDB_FIELD(expr) [](auto& c) -> auto& { return expr; }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    // data
    t.push_back(string_knob("data.manifest", "manifest to train on; empty generates synthetic data",
                            BDB_FIELD(c.manifest)));
    t.push_back(size_knob("data.seed", "synthetic generator seed", BDB_FIELD(c.data.seed)));
    t.push_back(size_knob("data.train_ids", "training identities", BDB_FIELD(c.data.train_ids)));
    t.push_back(size_knob("data.test_ids", "query/gallery identities", BDB_FIELD(c.data.test_ids)));
    t.push_back(size_knob("data.images_per_id", "images per identity", BDB_FIELD(c.data.images_per_id)));
    t.push_back(size_knob("data.queries_per_id", "queries per test identity", BDB_FIELD(c.data.queries_per_id)));
    t.push_back(size_knob("data.cameras", "number of cameras (>= 2)", BDB_FIELD(c.data.cameras)));
    t.push_back(size_knob("data.grid_h", "patch grid rows", BDB_FIELD(c.data.geometry.grid_h)));
    t.push_back(size_knob("data.grid_w", "patch grid columns", BDB_FIELD(c.data.geometry.grid_w)));
    t.push_back(size_knob("data.patch_dim", "values per patch", BDB_FIELD(c.data.geometry.patch_dim)));
    t.push_back(size_knob("data.upper_rows", "rows of the upper part", BDB_FIELD(c.data.upper_rows)));
    t.push_back(size_knob("data.part_jitter", "per-image part boundary shift", BDB_FIELD(c.data.part_jitter)));
    t.push_back(bool_knob("data.row_codes", "distinct part code per row", BDB_FIELD(c.data.row_codes)));
    t.push_back(double_knob("data.upper_scale", "upper code scale", BDB_FIELD(c.data.upper_scale)));
    t.push_back(double_knob("data.lower_scale", "lower code scale", BDB_FIELD(c.data.lower_scale)));
    t.push_back(double_knob("data.camera_scale", "camera bias scale", BDB_FIELD(c.data.camera_scale)));
    t.push_back(double_knob("data.noise", "i.i.d. pixel noise", BDB_FIELD(c.data.noise)));
    t.push_back(double_knob("data.occlusion_rate", "occlusion probability of train/gallery images",
                            BDB_FIELD(c.data.occlusion_rate)));
    t.push_back(double_knob("data.occluder_scale", "occluder pattern scale", BDB_FIELD(c.data.occluder_scale)));
    t.push_back(double_knob("data.query_occluded", "occlusion probability of queries",
                            BDB_FIELD(c.data.query_occluded)));
    // model
    t.push_back(size_knob("model.feat_channels", "backbone channels C", BDB_FIELD(c.train.model.backbone.feat_channels)));
    t.push_back(size_knob("model.mixing_blocks", "backbone residual blocks",
                          BDB_FIELD(c.train.model.backbone.mixing_blocks)));
    t.push_back(size_knob("model.global_reduce_dim", "global branch feature size",
                          BDB_FIELD(c.train.model.branches.global_reduce_dim)));
    t.push_back(size_knob("model.drop_reduce_dim", "dropping branch feature size",
                          BDB_FIELD(c.train.model.branches.drop_reduce_dim)));
    t.push_back(bool_knob("model.global_branch", "enable the global branch",
                          BDB_FIELD(c.train.model.branches.use_global_branch)));
    t.push_back(bool_knob("model.drop_branch", "enable the feature dropping branch",
                          BDB_FIELD(c.train.model.branches.use_drop_branch)));
    t.push_back({{"model.drop_pooling", "gmp|gap on the dropping branch"},
                 [](RunConfig& c, std::string_view k, std::string_view v) {
                   try {
                     c.train.model.branches.drop_pooling = parse_pooling(v);
                   } catch (const Error&) {
                     bad_value(k, v, "gmp|gap");
                   }
                 },
                 [](const RunConfig& c) { return Json(std::string(to_string(c.train.model.branches.drop_pooling))); }});
    t.push_back(bool_knob("model.normalize_descriptor", "L2-normalize the test descriptor",
                          BDB_FIELD(c.train.model.normalize_descriptor)));
    // masks
    t.push_back({{"masks.kind", "batch_drop_block|drop_block|dropout|spatial_dropout|batch_dropout|none"},
                 [](RunConfig& c, std::string_view k, std::string_view v) {
                   try {
                     c.train.model.branches.drop_spec.kind = parse_drop_kind(v);
                   } catch (const Error&) {
                     bad_value(k, v, "batch_drop_block|drop_block|dropout|spatial_dropout|batch_dropout|none");
                   }
                 },
                 [](const RunConfig& c) { return Json(std::string(to_string(c.train.model.branches.drop_spec.kind))); }});
    t.push_back(double_knob("masks.r_h", "erased height ratio", BDB_FIELD(c.train.model.branches.drop_spec.r_h)));
    t.push_back(double_knob("masks.r_w", "erased width ratio", BDB_FIELD(c.train.model.branches.drop_spec.r_w)));
    t.push_back(double_knob("masks.p", "drop probability of the dropout variants",
                            BDB_FIELD(c.train.model.branches.drop_spec.p)));
    // loss
    t.push_back({{"loss.spec", "metric term and/or softmax, e.g. triplet+softmax"},
                 [](RunConfig& c, std::string_view, std::string_view v) {
                   const LossConfig parsed = LossConfig::parse(std::string(v));
                   c.train.loss.metric = parsed.metric;
                   c.train.loss.use_softmax = parsed.use_softmax;
                 },
                 [](const RunConfig& c) { return Json(c.train.loss.spec()); }});
    t.push_back(double_knob("loss.lifted_margin", "lifted structure margin", BDB_FIELD(c.train.loss.lifted.margin)));
    t.push_back(double_knob("loss.margin_alpha", "margin loss alpha", BDB_FIELD(c.train.loss.margin.alpha)));
    t.push_back(double_knob("loss.margin_beta", "margin loss beta", BDB_FIELD(c.train.loss.margin.beta)));
    t.push_back(double_knob("loss.margin_cutoff", "distance-weighted sampling cutoff",
                            BDB_FIELD(c.train.loss.margin.cutoff)));
    t.push_back(double_knob("loss.margin_nonzero_cutoff", "distance beyond which negatives get no weight",
                            BDB_FIELD(c.train.loss.margin.nonzero_loss_cutoff)));
    // train
    t.push_back(double_knob("train.base_lr", "base learning rate", BDB_FIELD(c.train.schedule.base_lr)));
    t.push_back(size_knob("train.warmup_epochs", "linear warm-up epochs", BDB_FIELD(c.train.schedule.warmup_epochs)));
    t.push_back(size_knob("train.total_epochs", "training epochs", BDB_FIELD(c.train.schedule.total_epochs)));
    t.push_back({{"train.decay", "step decays as epoch:lr pairs, e.g. 30:1e-4,45:1e-5"},
                 [](RunConfig& c, std::string_view k, std::string_view v) {
                   c.train.schedule.decay_points = to_decay(k, v);
                 },
                 [](const RunConfig& c) { return Json(decay_string(c.train.schedule.decay_points)); }});
    t.push_back(size_knob("train.identities", "identities per batch (P)", BDB_FIELD(c.train.plan.identities)));
    t.push_back(size_knob("train.instances", "images per identity in a batch (K)", BDB_FIELD(c.train.plan.instances)));
    t.push_back(bool_knob("train.flip", "random horizontal flip", BDB_FIELD(c.train.augment.flip)));
    t.push_back(bool_knob("train.normalize", "per-dimension normalization", BDB_FIELD(c.train.augment.normalize)));
    t.push_back(bool_knob("train.cutout", "cutout augmentation", BDB_FIELD(c.train.augment.cutout)));
    t.push_back(double_knob("train.cutout_ratio", "cutout side ratio", BDB_FIELD(c.train.augment.cutout_ratio)));
    t.push_back(bool_knob("train.random_erasing", "random erasing augmentation",
                          BDB_FIELD(c.train.augment.random_erasing)));
    t.push_back(size_knob("train.eval_every", "evaluate every n epochs (0 = only at the end of train)",
                          BDB_FIELD(c.train.eval_every)));
    t.push_back(size_knob("train.max_rank", "CMC length", BDB_FIELD(c.train.max_rank)));
    // run
    t.push_back(size_knob("run.seed", "training seed", BDB_FIELD(c.train.seed)));
    t.push_back(string_knob("run.out", "output directory", BDB_FIELD(c.out_dir)));
    return t;
  }();
  return table;
}

#undef BDB_FIELD

const Entry& find_entry(std::string_view key) {
  for (const auto& e : entries())
    if (e.knob.key == key) return e;
  throw ConfigError("unknown setting '" + std::string(key) + "'");
}

}  // namespace

RunConfig preset_config(std::string_view name) {
  RunConfig c;
  c.preset = std::string(name);
  auto& br = c.train.model.branches;
  if (name == "desk") {
    c.train.schedule = Schedule::desk();
    c.train.plan = {8, 4};
    br.global_reduce_dim = 32;
    br.drop_reduce_dim = 64;
  } else if (name == "paper") {
    c.train.schedule = Schedule::paper();
    c.train.plan = {32, 4};
    br.global_reduce_dim = 512;
    br.drop_reduce_dim = 1024;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "' (expected desk|paper)");
  }
  return c;
}

const std::vector<Knob>& knobs() {
  static const std::vector<Knob> list = [] {
    std::vector<Knob> k;
    for (const auto& e : entries()) k.push_back(e.knob);
    return k;
  }();
  return list;
}

void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value) {
  const std::string v = trim(value);
  find_entry(key).set(cfg, key, v);
}

void apply_assignment(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("expected section.key=value, got '" + std::string(assignment) + "'");
  }
  apply_setting(cfg, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string get_setting(const RunConfig& cfg, std::string_view key) {
  const Json j = find_entry(key).get(cfg);
  return j.is_string() ? j.get<std::string>() : j.dump();
}

void apply_config_text(RunConfig& cfg, std::istream& in) {
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string s = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']' || s.size() < 3) throw ConfigError("line " + std::to_string(lineno) + ": bad section header");
      section = trim(std::string_view(s).substr(1, s.size() - 2));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": setting outside a [section]");
    try {
      apply_setting(cfg, section + "." + trim(std::string_view(s).substr(0, eq)), std::string_view(s).substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    apply_config_text(cfg, in);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void RunConfig::validate() const {
  try {
    if (manifest.empty()) data.validate();
    train.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (out_dir.empty()) throw ConfigError("run.out must not be empty");
}

nlohmann::ordered_json to_json(const RunConfig& cfg) {
  Json j;
  j["preset"] = cfg.preset;
  for (const auto& e : entries()) {
    const auto dot = e.knob.key.find('.');
    j[e.knob.key.substr(0, dot)][e.knob.key.substr(dot + 1)] = e.get(cfg);
  }
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig cfg = preset_config(j.value("preset", std::string("desk")));
  for (const auto& [section, body] : j.items()) {
    if (section == "preset") continue;
    if (!body.is_object()) throw ConfigError("run config section '" + section + "' must be an object");
    for (const auto& [key, value] : body.items()) {
      apply_setting(cfg, section + "." + key, value.is_string() ? value.get<std::string>() : value.dump());
    }
  }
  return cfg;
}

DatasetSplit load_or_generate(const RunConfig& cfg) {
  return cfg.manifest.empty() ? gen_synthetic(cfg.data) : load_manifest(cfg.manifest);
}

}  // namespace bdb
