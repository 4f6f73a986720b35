#include "bdb/experiments.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <thread>

#include "bdb/errors.hpp"
#include "bdb/eval.hpp"

namespace bdb {

namespace {

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

double AblationRow::rank1_mean() const { return mean_of(rank1); }
double AblationRow::rank1_std() const { return std_of(rank1); }
double AblationRow::map_mean() const { return mean_of(map); }
double AblationRow::map_std() const { return std_of(map); }

std::vector<std::string> default_sweep_values(const std::string& sweep) {
  if (sweep == "branches") return {"global", "drop", "both"};
  if (sweep == "variants") return {"batch_drop_block", "drop_block", "dropout", "spatial_dropout", "batch_dropout"};
  if (sweep == "ratio") return {"0.1", "0.2", "0.3", "0.4", "0.5"};
  if (sweep == "pooling") return {"gmp", "gap"};
  throw ConfigError("unknown sweep '" + sweep + "' (expected branches|variants|ratio|pooling)");
}

std::vector<std::pair<std::string, RunConfig>> sweep_configs(const RunConfig& base, const std::string& sweep,
                                                             std::vector<std::string> values) {
  const auto defaults = default_sweep_values(sweep);
  if (values.empty()) values = defaults;
  std::vector<std::pair<std::string, RunConfig>> out;
  for (const auto& v : values) {
    RunConfig c = base;
    if (sweep == "branches") {
      if (v != "global" && v != "drop" && v != "both") {
        throw ConfigError("branches sweep value '" + v + "' (expected global|drop|both)");
      }
      c.train.model.branches.use_global_branch = v != "drop";
      c.train.model.branches.use_drop_branch = v != "global";
    } else if (sweep == "variants") {
      apply_setting(c, "masks.kind", v);
      c.train.model.branches.use_drop_branch = true;
    } else if (sweep == "ratio") {
      apply_setting(c, "masks.r_h", v);
    } else {
      apply_setting(c, "model.drop_pooling", v);
    }
    c.validate();
    out.emplace_back(v, std::move(c));
  }
  return out;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const DatasetSplit& split,
                                      const std::string& sweep, const std::vector<std::string>& values,
                                      std::size_t seeds, std::size_t threads) {
  if (seeds == 0) throw ConfigError("seeds must be >= 1");
  const auto configs = sweep_configs(base, sweep, values);
  std::vector<AblationRow> rows;
  for (const auto& [label, cfg] : configs) {
    AblationRow row{sweep, label, {}, std::vector<double>(seeds), std::vector<double>(seeds)};
    for (std::size_t i = 0; i < seeds; ++i) row.seeds.push_back(cfg.train.seed + i);
    rows.push_back(std::move(row));
  }

  const std::size_t jobs = configs.size() * seeds;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t job = next++; job < jobs; job = next++) {
      const std::size_t ci = job / seeds, si = job % seeds;
      try {
        TrainConfig tc = configs[ci].second.train;
        tc.seed = rows[ci].seeds[si];
        tc.eval_every = 0;
        TrainResult res = train_loop(tc, split);
        const Normalizer* n = res.normalizer.mean.empty() ? nullptr : &res.normalizer;
        const MetricsReport m = evaluate_reid(res.model, n, split, tc.max_rank);
        rows[ci].rank1[si] = m.rank1;
        rows[ci].map[si] = m.map;
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(threads, jobs));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return rows;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "sweep,value,seeds,rank1_mean,rank1_std,map_mean,map_std\n";
  const auto old = out.precision(6);
  out << std::fixed;
  for (const auto& r : rows) {
    out << r.sweep << ',' << r.value << ',' << r.seeds.size() << ',' << r.rank1_mean() << ',' << r.rank1_std()
        << ',' << r.map_mean() << ',' << r.map_std() << '\n';
  }
  out.unsetf(std::ios::floatfield);
  out.precision(old);
}

std::size_t ablation_threads() {
  if (const char* env = std::getenv("BDB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// ---- spatial activation --------------------------------------------------------

std::string_view to_string(ActivationSource s) { return s == ActivationSource::drop ? "drop" : "backbone"; }

ActivationSource parse_activation_source(std::string_view name) {
  if (name == "backbone") return ActivationSource::backbone;
  if (name == "drop") return ActivationSource::drop;
  throw ConfigError("unknown activation source '" + std::string(name) + "' (expected backbone|drop)");
}

double ActivationExport::mean_entropy() const { return mean_of(maps.entropy); }

ActivationExport compute_activation(Model& model, const Normalizer* normalizer,
                                    const std::vector<Record>& records, ActivationSource source,
                                    std::size_t batch_size) {
  if (source == ActivationSource::drop && !model.config().branches.use_drop_branch) {
    throw ConfigError("the model has no dropping branch");
  }
  const auto& bb = model.config().backbone;
  const Geometry g{bb.grid_h, bb.grid_w, bb.in_patch_dim};
  NoGradGuard no_grad;
  ActivationExport a;
  a.source = source;
  a.maps.height = g.grid_h;
  a.maps.width = g.grid_w;
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const std::size_t end = std::min(records.size(), start + batch_size);
    std::vector<Record> batch;
    for (std::size_t i = start; i < end; ++i) {
      if (records[i].patches.size() != g.values()) {
        throw ConfigError("record " + records[i].sample_id + " does not match the model geometry");
      }
      batch.push_back(normalizer ? normalizer->apply(records[i]) : records[i]);
      a.sample_ids.push_back(records[i].sample_id);
    }
    std::vector<const Record*> ptrs;
    for (const auto& r : batch) ptrs.push_back(&r);
    const Tensor images = to_batch(ptrs, g);
    const Tensor map = source == ActivationSource::backbone
                           ? model.backbone_forward(images)
                           : model.forward(images, Mode::eval).drop_feature_map;
    const EnergyMaps e = spatial_energy_map(map);
    a.maps.batch += e.batch;
    a.maps.energy.insert(a.maps.energy.end(), e.energy.begin(), e.energy.end());
    a.maps.entropy.insert(a.maps.entropy.end(), e.entropy.begin(), e.entropy.end());
  }
  return a;
}

void write_activation(const std::filesystem::path& dir, const ActivationExport& a) {
  const auto maps_dir = dir / "maps";
  std::filesystem::create_directories(maps_dir);
  const std::size_t h = a.maps.height, w = a.maps.width;
  for (std::size_t b = 0; b < a.maps.batch; ++b) {
    std::ofstream grid(maps_dir / (a.sample_ids[b] + ".csv"));
    if (!grid) throw Error("cannot write " + (maps_dir / (a.sample_ids[b] + ".csv")).string());
    grid << std::setprecision(17);
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) grid << (j ? "," : "") << a.maps.energy[(b * h + i) * w + j];
      grid << '\n';
    }
  }
  std::ofstream ent(dir / "entropy.csv");
  if (!ent) throw Error("cannot write " + (dir / "entropy.csv").string());
  ent << std::setprecision(17) << "sample_id,entropy\n";
  for (std::size_t b = 0; b < a.maps.batch; ++b) ent << a.sample_ids[b] << ',' << a.maps.entropy[b] << '\n';

  nlohmann::ordered_json s;
  s["source"] = to_string(a.source);
  s["samples"] = a.maps.batch;
  s["height"] = h;
  s["width"] = w;
  s["mean_entropy"] = a.mean_entropy();
  s["max_entropy"] = std::log(static_cast<double>(h * w));
  std::ofstream summary(dir / "summary.json");
  if (!summary) throw Error("cannot write " + (dir / "summary.json").string());
  summary << s.dump(2) << '\n';
}

}  // namespace bdb
