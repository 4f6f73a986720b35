#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "bdb/masks.hpp"
#include "bdb/tensor.hpp"

namespace bdb {

struct Geometry {
  std::size_t grid_h = 12;
  std::size_t grid_w = 4;
  std::size_t patch_dim = 8;

  std::size_t cells() const { return grid_h * grid_w; }
  std::size_t values() const { return cells() * patch_dim; }
  bool operator==(const Geometry&) const = default;
};

// One labeled sample. `patches` is cell-major: cell (r,c) occupies
// [(r·grid_w + c)·patch_dim, +patch_dim).
struct Record {
  std::string sample_id;
  int identity = 0;
  int camera_id = 0;
  std::vector<double> patches;

  bool operator==(const Record&) const = default;
};

struct DatasetSplit {
  Geometry geometry;
  std::vector<Record> train;
  std::vector<Record> query;
  std::vector<Record> gallery;

  // Throws DatasetError naming the violated rule.
  void validate() const;
  bool operator==(const DatasetSplit&) const = default;
};

DatasetSplit read_manifest(std::istream& in);
DatasetSplit load_manifest(const std::filesystem::path& path);
void write_manifest(std::ostream& out, const DatasetSplit& split);
void save_manifest(const std::filesystem::path& path, const DatasetSplit& split);

// Stacks records into a B×cells×patch_dim tensor.
Tensor to_batch(const std::vector<const Record*>& records, const Geometry& g);

// ---- P×K sampling ------------------------------------------------------------

struct BatchPlan {
  std::size_t identities = 32;  // P
  std::size_t instances = 4;    // K

  std::size_t batch_size() const { return identities * instances; }
  void validate() const;
};

// Identity-balanced batches over a fixed record list. Each call to
// next_epoch() reshuffles identities and returns floor(#ids / P) batches of
// indices into the record list, grouped identity by identity.
class PKSampler {
 public:
  PKSampler(const std::vector<Record>& records, BatchPlan plan, std::uint64_t seed);

  std::vector<std::vector<std::size_t>> next_epoch();
  std::size_t batches_per_epoch() const { return ids_.size() / plan_.identities; }

 private:
  BatchPlan plan_;
  std::vector<int> ids_;
  std::vector<std::vector<std::size_t>> members_;
  Rng rng_;
};

// ---- augmentation ------------------------------------------------------------

// Per-dimension statistics fitted on the training split.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Normalizer fit(const std::vector<Record>& records, std::size_t patch_dim);
  Record apply(const Record& r) const;
};

struct AugmentSpec {
  bool flip = true;
  const Normalizer* normalizer = nullptr;
  bool cutout = false;
  double cutout_ratio = 0.25;
  bool random_erasing = false;
};

Record flip_horizontal(const Record& r, const Geometry& g);
// Zeroes a side×side square placed uniformly inside the grid, side =
// max(1, floor(ratio·min(grid_h, grid_w))).
Record cutout(const Record& r, const Geometry& g, double ratio, Rng& rng);
// With probability 0.5 fills a rectangle (area fraction in [0.02, 0.4],
// aspect in [0.3, 3.3], clamped to the grid) with U(-1, 1) values.
Record random_erasing(const Record& r, const Geometry& g, Rng& rng);

// flip (p = 0.5) -> normalize -> cutout -> random erasing, each if enabled.
Record augment(const Record& r, const AugmentSpec& spec, const Geometry& g, Rng& rng);

// ---- synthetic identities ------------------------------------------------------

struct SyntheticConfig {
  std::size_t train_ids = 64;
  std::size_t test_ids = 50;
  std::size_t images_per_id = 8;
  std::size_t queries_per_id = 2;
  std::size_t cameras = 4;
  Geometry geometry;
  // Rows [0, upper_rows) carry the upper part code, the rest the lower one.
  std::size_t upper_rows = 3;
  // Per-image shift of the part boundary, uniform in [-part_jitter, part_jitter].
  std::size_t part_jitter = 0;
  // Each grid row gets its own slice of the part code instead of one shared vector.
  bool row_codes = true;
  double upper_scale = 1.0;
  double lower_scale = 0.5;
  double camera_scale = 0.2;
  double noise = 0.05;
  double occlusion_rate = 0.1;
  double occluder_scale = 1.0;
  double query_occluded = 0.7;
  std::uint64_t seed = 1;

  // Throws ConfigError for infeasible settings.
  void validate() const;
};

// Every identity has an upper and a lower latent code living in disjoint
// halves of the patch dimensions (one slice per grid row when row_codes is
// set). An image renders both codes on their rows plus a camera bias and
// i.i.d. noise; an occluded image has its upper code replaced by a random
// occluder pattern of scale occluder_scale.
DatasetSplit gen_synthetic(const SyntheticConfig& cfg);

}  // namespace bdb
