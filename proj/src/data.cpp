#include "bdb/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "bdb/errors.hpp"
#include "json.hpp"

namespace bdb {

namespace {

constexpr std::string_view kManifestMagic = "bdb-manifest";

std::size_t parse_header_value(const std::string& token, const std::string& key, std::size_t line) {
  const std::string prefix = key + "=";
  if (token.rfind(prefix, 0) != 0) throw ParseError(line, "expected '" + prefix + "<n>', got '" + token + "'");
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(token.substr(prefix.size()), &pos);
    if (pos != token.size() - prefix.size() || v == 0) throw std::invalid_argument(token);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ParseError(line, "invalid value in '" + token + "'");
  }
}

Geometry parse_header(const std::string& header) {
  std::istringstream is(header);
  std::string magic, version, h, w, d, extra;
  is >> magic >> version >> h >> w >> d;
  if (magic != kManifestMagic || version != "v1") {
    throw ParseError(1, "expected header 'bdb-manifest v1 grid_h=.. grid_w=.. patch_dim=..'");
  }
  if (is >> extra) throw ParseError(1, "unexpected trailing header token '" + extra + "'");
  return {parse_header_value(h, "grid_h", 1), parse_header_value(w, "grid_w", 1),
          parse_header_value(d, "patch_dim", 1)};
}

std::set<int> identities(const std::vector<Record>& rs) {
  std::set<int> ids;
  for (const auto& r : rs) ids.insert(r.identity);
  return ids;
}

}  // namespace

void DatasetSplit::validate() const {
  if (train.empty()) throw DatasetError("train split is empty");
  if (query.empty()) throw DatasetError("query split is empty");
  if (gallery.empty()) throw DatasetError("gallery split is empty");

  std::set<std::string> seen_ids;
  for (const auto* part : {&train, &query, &gallery}) {
    for (const auto& r : *part) {
      if (r.identity < 0) throw DatasetError("record " + r.sample_id + ": identity must be >= 0");
      if (r.camera_id < 0) throw DatasetError("record " + r.sample_id + ": camera must be >= 0");
      if (r.patches.size() != geometry.values()) {
        throw DatasetError("record " + r.sample_id + ": patch array has " +
                           std::to_string(r.patches.size()) + " values, header implies " +
                           std::to_string(geometry.values()));
      }
      if (!seen_ids.insert(r.sample_id).second) throw DatasetError("duplicate sample id " + r.sample_id);
    }
  }

  const auto train_ids = identities(train);
  auto test_ids = identities(query);
  const auto gallery_ids = identities(gallery);
  test_ids.insert(gallery_ids.begin(), gallery_ids.end());
  for (int id : test_ids) {
    if (train_ids.count(id)) {
      throw DatasetError("train and test identities must be disjoint; identity " + std::to_string(id) +
                         " appears in both");
    }
  }

  std::map<int, std::set<int>> gallery_cams;
  for (const auto& r : gallery) gallery_cams[r.identity].insert(r.camera_id);
  for (const auto& q : query) {
    const auto it = gallery_cams.find(q.identity);
    const bool ok = it != gallery_cams.end() &&
                    std::any_of(it->second.begin(), it->second.end(),
                                [&](int cam) { return cam != q.camera_id; });
    if (!ok) {
      throw DatasetError("query " + q.sample_id + " (identity " + std::to_string(q.identity) +
                         ") has no gallery image of the same identity under a different camera");
    }
  }
}

DatasetSplit read_manifest(std::istream& in) {
  DatasetSplit split;
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing manifest header");
  split.geometry = parse_header(line);

  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Record r;
    std::string which;
    try {
      const auto j = nlohmann::json::parse(line);
      r.sample_id = j.at("id").get<std::string>();
      r.identity = j.at("identity").get<int>();
      r.camera_id = j.at("camera").get<int>();
      which = j.at("split").get<std::string>();
      r.patches = j.at("patches").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, std::string("malformed record: ") + e.what());
    }
    if (which == "train") {
      split.train.push_back(std::move(r));
    } else if (which == "query") {
      split.query.push_back(std::move(r));
    } else if (which == "gallery") {
      split.gallery.push_back(std::move(r));
    } else {
      throw ParseError(lineno, "unknown split '" + which + "'");
    }
  }
  split.validate();
  return split;
}

DatasetSplit load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open manifest " + path.string());
  return read_manifest(in);
}

void write_manifest(std::ostream& out, const DatasetSplit& split) {
  const auto& g = split.geometry;
  out << kManifestMagic << " v1 grid_h=" << g.grid_h << " grid_w=" << g.grid_w
      << " patch_dim=" << g.patch_dim << '\n';
  const std::pair<const char*, const std::vector<Record>*> parts[] = {
      {"train", &split.train}, {"query", &split.query}, {"gallery", &split.gallery}};
  for (const auto& [name, records] : parts) {
    for (const auto& r : *records) {
      nlohmann::ordered_json j;
      j["id"] = r.sample_id;
      j["identity"] = r.identity;
      j["camera"] = r.camera_id;
      j["split"] = name;
      j["patches"] = r.patches;
      out << j.dump() << '\n';
    }
  }
}

void save_manifest(const std::filesystem::path& path, const DatasetSplit& split) {
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot write manifest " + path.string());
  write_manifest(out, split);
}

Tensor to_batch(const std::vector<const Record*>& records, const Geometry& g) {
  std::vector<double> data;
  data.reserve(records.size() * g.values());
  for (const Record* r : records) {
    if (r->patches.size() != g.values()) throw DimensionError("record " + r->sample_id + " has wrong patch size");
    data.insert(data.end(), r->patches.begin(), r->patches.end());
  }
  return Tensor::from({records.size(), g.cells(), g.patch_dim}, std::move(data));
}

// ---- sampler -------------------------------------------------------------------

void BatchPlan::validate() const {
  if (identities < 2) throw SamplerError("P (identities per batch) must be >= 2");
  if (instances < 2) throw SamplerError("K (instances per identity) must be >= 2");
}

PKSampler::PKSampler(const std::vector<Record>& records, BatchPlan plan, std::uint64_t seed)
    : plan_(plan), rng_(seed) {
  plan_.validate();
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < records.size(); ++i) by_id[records[i].identity].push_back(i);
  for (auto& [id, idx] : by_id) {
    ids_.push_back(id);
    members_.push_back(std::move(idx));
  }
  if (ids_.size() < plan_.identities) {
    throw SamplerError("sampler needs at least P=" + std::to_string(plan_.identities) +
                       " identities, training set has " + std::to_string(ids_.size()));
  }
}

std::vector<std::vector<std::size_t>> PKSampler::next_epoch() {
  std::vector<std::size_t> order(ids_.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng_);

  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start + plan_.identities <= order.size(); start += plan_.identities) {
    std::vector<std::size_t> batch;
    batch.reserve(plan_.batch_size());
    for (std::size_t p = 0; p < plan_.identities; ++p) {
      const auto& pool = members_[order[start + p]];
      if (pool.size() >= plan_.instances) {
        std::vector<std::size_t> pick = pool;
        std::shuffle(pick.begin(), pick.end(), rng_);
        batch.insert(batch.end(), pick.begin(), pick.begin() + plan_.instances);
      } else {
        std::uniform_int_distribution<std::size_t> any(0, pool.size() - 1);
        for (std::size_t k = 0; k < plan_.instances; ++k) batch.push_back(pool[any(rng_)]);
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

// ---- augmentation ------------------------------------------------------------------

Normalizer Normalizer::fit(const std::vector<Record>& records, std::size_t patch_dim) {
  Normalizer n{std::vector<double>(patch_dim, 0.0), std::vector<double>(patch_dim, 0.0)};
  std::size_t count = 0;
  for (const auto& r : records) {
    for (std::size_t i = 0; i < r.patches.size(); ++i) n.mean[i % patch_dim] += r.patches[i];
    count += r.patches.size() / patch_dim;
  }
  if (count == 0) throw DatasetError("cannot fit normalization statistics on an empty split");
  for (double& m : n.mean) m /= static_cast<double>(count);
  for (const auto& r : records) {
    for (std::size_t i = 0; i < r.patches.size(); ++i) {
      const double d = r.patches[i] - n.mean[i % patch_dim];
      n.stddev[i % patch_dim] += d * d;
    }
  }
  for (double& s : n.stddev) {
    s = std::sqrt(s / static_cast<double>(count));
    if (s < 1e-12) s = 1.0;
  }
  return n;
}

Record Normalizer::apply(const Record& r) const {
  Record out = r;
  const std::size_t d = mean.size();
  for (std::size_t i = 0; i < out.patches.size(); ++i) {
    out.patches[i] = (out.patches[i] - mean[i % d]) / stddev[i % d];
  }
  return out;
}

Record flip_horizontal(const Record& r, const Geometry& g) {
  Record out = r;
  for (std::size_t row = 0; row < g.grid_h; ++row)
    for (std::size_t col = 0; col < g.grid_w; ++col) {
      const std::size_t src = (row * g.grid_w + (g.grid_w - 1 - col)) * g.patch_dim;
      const std::size_t dst = (row * g.grid_w + col) * g.patch_dim;
      std::copy_n(r.patches.begin() + src, g.patch_dim, out.patches.begin() + dst);
    }
  return out;
}

namespace {

template <typename Fill>
void fill_rect(Record& r, const Geometry& g, std::size_t r0, std::size_t c0, std::size_t h,
               std::size_t w, Fill fill) {
  for (std::size_t row = r0; row < r0 + h; ++row)
    for (std::size_t col = c0; col < c0 + w; ++col)
      for (std::size_t k = 0; k < g.patch_dim; ++k) r.patches[(row * g.grid_w + col) * g.patch_dim + k] = fill();
}

}  // namespace

Record cutout(const Record& r, const Geometry& g, double ratio, Rng& rng) {
  Record out = r;
  const std::size_t side = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(std::min(g.grid_h, g.grid_w)))));
  const std::size_t s = std::min({side, g.grid_h, g.grid_w});
  std::uniform_int_distribution<std::size_t> top(0, g.grid_h - s), left(0, g.grid_w - s);
  const std::size_t r0 = top(rng), c0 = left(rng);
  fill_rect(out, g, r0, c0, s, s, [] { return 0.0; });
  return out;
}

Record random_erasing(const Record& r, const Geometry& g, Rng& rng) {
  Record out = r;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) >= 0.5) return out;
  const double area = static_cast<double>(g.cells()) * std::uniform_real_distribution<double>(0.02, 0.4)(rng);
  const double aspect = std::uniform_real_distribution<double>(0.3, 3.3)(rng);
  auto clamp_len = [](double v, std::size_t hi) {
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(v)), 1, hi);
  };
  const std::size_t h = clamp_len(std::sqrt(area * aspect), g.grid_h);
  const std::size_t w = clamp_len(std::sqrt(area / aspect), g.grid_w);
  std::uniform_int_distribution<std::size_t> top(0, g.grid_h - h), left(0, g.grid_w - w);
  const std::size_t r0 = top(rng), c0 = left(rng);
  std::uniform_real_distribution<double> value(-1.0, 1.0);
  fill_rect(out, g, r0, c0, h, w, [&] { return value(rng); });
  return out;
}

Record augment(const Record& r, const AugmentSpec& spec, const Geometry& g, Rng& rng) {
  Record out = r;
  if (spec.flip && std::bernoulli_distribution(0.5)(rng)) out = flip_horizontal(out, g);
  if (spec.normalizer) out = spec.normalizer->apply(out);
  if (spec.cutout) out = cutout(out, g, spec.cutout_ratio, rng);
  if (spec.random_erasing) out = random_erasing(out, g, rng);
  return out;
}

// ---- synthetic generator ----------------------------------------------------------

void SyntheticConfig::validate() const {
  if (cameras < 2) {
    throw ConfigError("cameras must be >= 2: every query needs a same-identity gallery image "
                      "from a different camera");
  }
  if (train_ids < 2) throw ConfigError("train_ids must be >= 2");
  if (test_ids < 1) throw ConfigError("test_ids must be >= 1");
  if (queries_per_id < 1) throw ConfigError("queries_per_id must be >= 1");
  if (queries_per_id > cameras) throw ConfigError("queries_per_id must not exceed cameras");
  if (images_per_id < queries_per_id + 2) {
    throw ConfigError("images_per_id must be >= queries_per_id + 2 so every query keeps a "
                      "different-camera gallery match");
  }
  if (geometry.grid_h < 2 || geometry.grid_w < 1) throw ConfigError("grid must have >= 2 rows");
  if (geometry.patch_dim < 2) throw ConfigError("patch_dim must be >= 2");
  if (upper_rows < 1 || upper_rows >= geometry.grid_h) {
    throw ConfigError("upper_rows must lie in [1, grid_h)");
  }
  for (double v : {upper_scale, lower_scale, camera_scale, noise, occluder_scale}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("scales and noise must be finite and >= 0");
  }
  for (double v : {occlusion_rate, query_occluded}) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("occlusion rates must lie in [0,1]");
  }
}

DatasetSplit gen_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const Geometry& g = cfg.geometry;
  const std::size_t d = g.patch_dim;
  const std::size_t half = d / 2;
  Rng rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<std::vector<double>> camera_bias(cfg.cameras, std::vector<double>(d));
  for (auto& b : camera_bias)
    for (double& v : b) v = cfg.camera_scale * normal(rng);

  DatasetSplit split;
  split.geometry = g;
  const std::size_t total_ids = cfg.train_ids + cfg.test_ids;
  for (std::size_t id = 0; id < total_ids; ++id) {
    const std::size_t code_rows = cfg.row_codes ? g.grid_h : 1;
    std::vector<double> upper(code_rows * half), lower(code_rows * (d - half));
    for (double& v : upper) v = cfg.upper_scale * normal(rng);
    for (double& v : lower) v = cfg.lower_scale * normal(rng);
    const std::size_t cam_offset = std::uniform_int_distribution<std::size_t>(0, cfg.cameras - 1)(rng);
    const bool is_train = id < cfg.train_ids;

    for (std::size_t img = 0; img < cfg.images_per_id; ++img) {
      const bool is_query = !is_train && img < cfg.queries_per_id;
      const double occlusion = is_query ? cfg.query_occluded : cfg.occlusion_rate;
      const bool occluded = unit(rng) < occlusion;
      const std::size_t cam = (cam_offset + img) % cfg.cameras;

      Record r;
      r.sample_id = "id" + std::to_string(id) + "_img" + std::to_string(img);
      r.identity = static_cast<int>(id);
      r.camera_id = static_cast<int>(cam);
      r.patches.assign(g.values(), 0.0);
      std::vector<double> occluder(half);
      if (occluded)
        for (double& v : occluder) v = cfg.occluder_scale * normal(rng);
      const auto shift = std::uniform_int_distribution<long>(-static_cast<long>(cfg.part_jitter),
                                                             static_cast<long>(cfg.part_jitter))(rng);
      const long boundary = std::clamp<long>(static_cast<long>(cfg.upper_rows) + shift, 1,
                                             static_cast<long>(g.grid_h) - 1);
      for (std::size_t row = 0; row < g.grid_h; ++row) {
        const bool upper_part = static_cast<long>(row) < boundary;
        for (std::size_t col = 0; col < g.grid_w; ++col) {
          double* cell = r.patches.data() + (row * g.grid_w + col) * d;
          if (upper_part && occluded) {
            std::copy(occluder.begin(), occluder.end(), cell);
          } else if (upper_part) {
            const auto* src = upper.data() + (cfg.row_codes ? row : 0) * half;
            std::copy(src, src + half, cell);
          } else {
            const auto* src = lower.data() + (cfg.row_codes ? row : 0) * (d - half);
            std::copy(src, src + (d - half), cell + half);
          }
          for (std::size_t k = 0; k < d; ++k) cell[k] += camera_bias[cam][k] + cfg.noise * normal(rng);
        }
      }
      auto& dest = is_train ? split.train : (is_query ? split.query : split.gallery);
      dest.push_back(std::move(r));
    }
  }
  split.validate();
  return split;
}

}  // namespace bdb
