#pragma once

// Feature-space dropping masks applied multiplicatively to B×C×H×W maps.

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "bdb/tensor.hpp"

namespace bdb {

using Rng = std::mt19937_64;

enum class DropKind { batch_drop_block, drop_block, dropout, spatial_dropout, batch_dropout, none };

std::string_view to_string(DropKind kind);
DropKind parse_drop_kind(std::string_view name);

struct DropSpec {
  DropKind kind = DropKind::batch_drop_block;
  double r_h = 0.3;
  double r_w = 1.0;
  double p = 0.3;

  // Throws SpecError when a ratio or probability is out of range.
  void validate() const;
};

enum class BroadcastRule { shared_over_batch_and_channel, per_sample, per_channel, per_element };

struct DropMask {
  std::vector<std::uint8_t> pattern;
  BroadcastRule rule = BroadcastRule::shared_over_batch_and_channel;
  // Shape of `pattern`: H×W, B×H×W, B×C or B×C×H×W depending on `rule`.
  Shape shape;

  std::size_t zeros() const;
};

// Side length of the dropped block along one axis: 0 when the ratio is 0,
// otherwise floor(ratio·extent) but at least 1.
std::size_t block_extent(double ratio, std::size_t extent);

// One rectangle shared by the whole batch.
DropMask batch_drop_block_mask(std::size_t h, std::size_t w, const DropSpec& spec, Rng& rng);
// One independently placed rectangle per sample.
DropMask drop_block_mask(std::size_t b, std::size_t h, std::size_t w, const DropSpec& spec, Rng& rng);
DropMask dropout_mask(std::size_t b, std::size_t c, std::size_t h, std::size_t w,
                      const DropSpec& spec, Rng& rng);
DropMask spatial_dropout_mask(std::size_t b, std::size_t c, const DropSpec& spec, Rng& rng);
DropMask batch_dropout_mask(std::size_t h, std::size_t w, const DropSpec& spec, Rng& rng);

// Dispatches on spec.kind for a B×C×H×W map. Kind `none` yields an all-ones
// shared mask.
DropMask make_mask(const Shape& feature_shape, const DropSpec& spec, Rng& rng);

// Elementwise product after broadcasting. Kept units are not rescaled.
Tensor apply_mask(const Tensor& t, const DropMask& mask);

}  // namespace bdb
