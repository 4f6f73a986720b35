#pragma once

// Run configuration shared by every CLI command. Settings are addressed as
// "section.key"; config files use the same keys under [section] headers:
//
//   [masks]
//   kind = batch_drop_block
//   r_h = 0.3
//
// Precedence: preset, then config file, then command-line flags.

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "bdb/data.hpp"
#include "bdb/train.hpp"
#include "json.hpp"

namespace bdb {

struct RunConfig {
  std::string preset = "desk";
  SyntheticConfig data;
  // Empty: generate the synthetic split from `data`.
  std::string manifest;
  TrainConfig train;
  std::string out_dir = "run";

  // Throws ConfigError naming the first invalid setting.
  void validate() const;
};

// "desk" (default, 60 epochs, small dims) or "paper" (400 epochs, 512/1024,
// P=32 K=4).
RunConfig preset_config(std::string_view name);

struct Knob {
  std::string key;  // section.key
  std::string help;
};

// Every accepted key, in a fixed order.
const std::vector<Knob>& knobs();

// Throws ConfigError for unknown keys and unparsable values.
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);
// "section.key=value"
void apply_assignment(RunConfig& cfg, std::string_view assignment);
std::string get_setting(const RunConfig& cfg, std::string_view key);

void apply_config_text(RunConfig& cfg, std::istream& in);
void apply_config_file(RunConfig& cfg, const std::string& path);

// {"preset": .., "data": {...}, "model": {...}, ...} with every knob.
nlohmann::ordered_json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);

// The split a run trains on: the manifest if set, otherwise synthetic data.
DatasetSplit load_or_generate(const RunConfig& cfg);

}  // namespace bdb
