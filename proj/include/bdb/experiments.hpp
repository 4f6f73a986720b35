#pragma once

// Ablation sweeps and spatial-activation export shared by the CLI and the
// acceptance suite.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "bdb/config.hpp"
#include "bdb/model.hpp"

namespace bdb {

// ---- ablation ----------------------------------------------------------------

struct AblationRow {
  std::string sweep;
  std::string value;
  std::vector<std::uint64_t> seeds;
  std::vector<double> rank1;
  std::vector<double> map;

  double rank1_mean() const;
  double rank1_std() const;  // sample std, 0 for one seed
  double map_mean() const;
  double map_std() const;
};

// Sweeps: "branches" (global|drop|both), "variants" (mask kinds), "ratio"
// (r_h values), "pooling" (gmp|gap). Empty `values` selects the defaults.
std::vector<std::string> default_sweep_values(const std::string& sweep);
std::vector<std::pair<std::string, RunConfig>> sweep_configs(const RunConfig& base, const std::string& sweep,
                                                             std::vector<std::string> values);

// Trains every configuration with seeds base.train.seed + i, i < seeds, on
// up to `threads` worker threads. Results do not depend on `threads`.
std::vector<AblationRow> run_ablation(const RunConfig& base, const DatasetSplit& split,
                                      const std::string& sweep, const std::vector<std::string>& values,
                                      std::size_t seeds, std::size_t threads);

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);

// BDB_THREADS if set and positive, otherwise the hardware concurrency.
std::size_t ablation_threads();

// ---- spatial activation ------------------------------------------------------

enum class ActivationSource { backbone, drop };

std::string_view to_string(ActivationSource s);
ActivationSource parse_activation_source(std::string_view name);

struct ActivationExport {
  ActivationSource source = ActivationSource::backbone;
  std::vector<std::string> sample_ids;
  EnergyMaps maps;

  double mean_entropy() const;
};

// Eval-mode energy maps of the backbone output or of the dropping branch's
// bottleneck output.
ActivationExport compute_activation(Model& model, const Normalizer* normalizer,
                                    const std::vector<Record>& records, ActivationSource source,
                                    std::size_t batch_size = 64);

// dir/maps/<sample_id>.csv holds each H×W grid; dir/entropy.csv lists
// sample_id,entropy; dir/summary.json holds the mean.
void write_activation(const std::filesystem::path& dir, const ActivationExport& a);

}  // namespace bdb
