#include "bdb/masks.hpp"

#include <algorithm>
#include <cmath>

#include "bdb/errors.hpp"

namespace bdb {

namespace {

constexpr std::pair<DropKind, std::string_view> kKindNames[] = {
    {DropKind::batch_drop_block, "batch_drop_block"},
    {DropKind::drop_block, "drop_block"},
    {DropKind::dropout, "dropout"},
    {DropKind::spatial_dropout, "spatial_dropout"},
    {DropKind::batch_dropout, "batch_dropout"},
    {DropKind::none, "none"},
};

void require_kind(const DropSpec& spec, DropKind kind) {
  spec.validate();
  if (spec.kind != kind) {
    throw SpecError("mask generator for " + std::string(to_string(kind)) + " called with kind " +
                    std::string(to_string(spec.kind)));
  }
}

// Fills a dh×dw block of zeros at a uniformly drawn top-left corner.
void drop_rectangle(std::uint8_t* grid, std::size_t h, std::size_t w, std::size_t dh,
                    std::size_t dw, Rng& rng) {
  if (dh == 0 || dw == 0) return;
  std::uniform_int_distribution<std::size_t> top(0, h - dh);
  std::uniform_int_distribution<std::size_t> left(0, w - dw);
  const std::size_t r0 = top(rng);
  const std::size_t c0 = left(rng);
  for (std::size_t r = r0; r < r0 + dh; ++r)
    std::fill(grid + r * w + c0, grid + r * w + c0 + dw, std::uint8_t{0});
}

std::vector<std::uint8_t> bernoulli_keep(std::size_t n, double p, Rng& rng) {
  std::vector<std::uint8_t> out(n, 1);
  if (p == 0.0) return out;
  std::bernoulli_distribution drop(p);
  for (auto& v : out) v = drop(rng) ? 0 : 1;
  return out;
}

void require_positive(std::size_t v, const char* name) {
  if (v == 0) throw DimensionError(std::string("mask dimension ") + name + " must be positive");
}

}  // namespace

std::string_view to_string(DropKind kind) {
  for (const auto& [k, name] : kKindNames)
    if (k == kind) return name;
  return "unknown";
}

DropKind parse_drop_kind(std::string_view name) {
  for (const auto& [k, n] : kKindNames)
    if (n == name) return k;
  throw SpecError("unknown drop kind '" + std::string(name) + "'");
}

void DropSpec::validate() const {
  if (!(r_h >= 0.0 && r_h <= 1.0)) throw SpecError("r_h must lie in [0,1], got " + std::to_string(r_h));
  if (!(r_w >= 0.0 && r_w <= 1.0)) throw SpecError("r_w must lie in [0,1], got " + std::to_string(r_w));
  if (!(p >= 0.0 && p < 1.0)) throw SpecError("p must lie in [0,1), got " + std::to_string(p));
}

std::size_t DropMask::zeros() const {
  return static_cast<std::size_t>(std::count(pattern.begin(), pattern.end(), std::uint8_t{0}));
}

std::size_t block_extent(double ratio, std::size_t extent) {
  if (ratio <= 0.0) return 0;
  const auto n = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(extent)));
  return std::clamp<std::size_t>(n, 1, extent);
}

DropMask batch_drop_block_mask(std::size_t h, std::size_t w, const DropSpec& spec, Rng& rng) {
  require_kind(spec, DropKind::batch_drop_block);
  require_positive(h, "h");
  require_positive(w, "w");
  DropMask m{std::vector<std::uint8_t>(h * w, 1), BroadcastRule::shared_over_batch_and_channel, {h, w}};
  drop_rectangle(m.pattern.data(), h, w, block_extent(spec.r_h, h), block_extent(spec.r_w, w), rng);
  return m;
}

DropMask drop_block_mask(std::size_t b, std::size_t h, std::size_t w, const DropSpec& spec, Rng& rng) {
  require_kind(spec, DropKind::drop_block);
  require_positive(h, "h");
  require_positive(w, "w");
  DropMask m{std::vector<std::uint8_t>(b * h * w, 1), BroadcastRule::per_sample, {b, h, w}};
  const std::size_t dh = block_extent(spec.r_h, h), dw = block_extent(spec.r_w, w);
  for (std::size_t i = 0; i < b; ++i) drop_rectangle(m.pattern.data() + i * h * w, h, w, dh, dw, rng);
  return m;
}

DropMask dropout_mask(std::size_t b, std::size_t c, std::size_t h, std::size_t w,
                      const DropSpec& spec, Rng& rng) {
  require_kind(spec, DropKind::dropout);
  return {bernoulli_keep(b * c * h * w, spec.p, rng), BroadcastRule::per_element, {b, c, h, w}};
}

DropMask spatial_dropout_mask(std::size_t b, std::size_t c, const DropSpec& spec, Rng& rng) {
  require_kind(spec, DropKind::spatial_dropout);
  return {bernoulli_keep(b * c, spec.p, rng), BroadcastRule::per_channel, {b, c}};
}

DropMask batch_dropout_mask(std::size_t h, std::size_t w, const DropSpec& spec, Rng& rng) {
  require_kind(spec, DropKind::batch_dropout);
  return {bernoulli_keep(h * w, spec.p, rng), BroadcastRule::shared_over_batch_and_channel, {h, w}};
}

DropMask make_mask(const Shape& fs, const DropSpec& spec, Rng& rng) {
  if (fs.size() != 4) throw DimensionError("masks apply to B×C×H×W maps, got " + shape_str(fs));
  const std::size_t b = fs[0], c = fs[1], h = fs[2], w = fs[3];
  switch (spec.kind) {
    case DropKind::batch_drop_block: return batch_drop_block_mask(h, w, spec, rng);
    case DropKind::drop_block: return drop_block_mask(b, h, w, spec, rng);
    case DropKind::dropout: return dropout_mask(b, c, h, w, spec, rng);
    case DropKind::spatial_dropout: return spatial_dropout_mask(b, c, spec, rng);
    case DropKind::batch_dropout: return batch_dropout_mask(h, w, spec, rng);
    case DropKind::none:
      spec.validate();
      return {std::vector<std::uint8_t>(h * w, 1), BroadcastRule::shared_over_batch_and_channel, {h, w}};
  }
  throw SpecError("unhandled drop kind");
}

Tensor apply_mask(const Tensor& t, const DropMask& mask) {
  if (t.rank() != 4) throw DimensionError("apply_mask expects B×C×H×W, got " + shape_str(t.shape()));
  const std::size_t b = t.dim(0), c = t.dim(1), h = t.dim(2), w = t.dim(3);
  Shape expected;
  switch (mask.rule) {
    case BroadcastRule::shared_over_batch_and_channel: expected = {h, w}; break;
    case BroadcastRule::per_sample: expected = {b, h, w}; break;
    case BroadcastRule::per_channel: expected = {b, c}; break;
    case BroadcastRule::per_element: expected = {b, c, h, w}; break;
  }
  if (mask.shape != expected || mask.pattern.size() != numel_of(expected)) {
    throw DimensionError("mask shape " + shape_str(mask.shape) + " incompatible with feature map " +
                         shape_str(t.shape()));
  }

  const std::size_t hw = h * w;
  std::vector<double> keep(t.numel());
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t p = 0; p < hw; ++p) {
        std::size_t src = 0;
        switch (mask.rule) {
          case BroadcastRule::shared_over_batch_and_channel: src = p; break;
          case BroadcastRule::per_sample: src = bi * hw + p; break;
          case BroadcastRule::per_channel: src = bi * c + ci; break;
          case BroadcastRule::per_element: src = (bi * c + ci) * hw + p; break;
        }
        keep[(bi * c + ci) * hw + p] = mask.pattern[src];
      }

  const auto td = t.data();
  std::vector<double> out(td.size());
  for (std::size_t i = 0; i < td.size(); ++i) out[i] = td[i] * keep[i];
  return Tensor::from_op(t.shape(), std::move(out), {t},
                         [keep = std::move(keep)](std::span<const double> g,
                                                  std::span<std::vector<double>*> in) {
                           if (!in[0]) return;
                           for (std::size_t i = 0; i < keep.size(); ++i) (*in[0])[i] += g[i] * keep[i];
                         });
}

}  // namespace bdb
