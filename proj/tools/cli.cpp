#include "cli.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "bdb/config.hpp"
#include "bdb/errors.hpp"
#include "bdb/eval.hpp"
#include "bdb/experiments.hpp"
#include "bdb/train.hpp"

namespace bdb::cli {

namespace {

namespace fs = std::filesystem;

struct Shortcut {
  std::string flag;
  std::string key;
  std::string value;
  CLI::Option* option = nullptr;
};

struct RunFlags {
  std::string preset = "desk";
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::unique_ptr<Shortcut>> shortcuts;
  std::string drop;
  CLI::Option* drop_option = nullptr;
};

struct ShortcutSpec {
  const char* flag;
  const char* key;
};

void add_run_flags(CLI::App* app, RunFlags& f, std::initializer_list<ShortcutSpec> list, bool with_drop) {
  app->add_option("--preset", f.preset, "recipe preset: desk|paper")->capture_default_str();
  app->add_option("--config", f.config, "key=value config file with [section] headers");
  app->add_option("--set", f.sets, "override any setting as section.key=value (see `keys`)");
  for (const auto& s : list) {
    auto sc = std::make_unique<Shortcut>();
    sc->flag = s.flag;
    sc->key = s.key;
    sc->option = app->add_option(sc->flag, sc->value, std::string("sets ") + s.key);
    f.shortcuts.push_back(std::move(sc));
  }
  if (with_drop) {
    f.drop_option = app->add_option("--drop", f.drop,
                                    "mask kind of the dropping branch, or none to disable the branch");
  }
}

RunConfig build_config(const RunFlags& f) {
  RunConfig cfg = preset_config(f.preset);
  if (!f.config.empty()) apply_config_file(cfg, f.config);
  for (const auto& s : f.shortcuts)
    if (s->option->count()) apply_setting(cfg, s->key, s->value);
  if (f.drop_option && f.drop_option->count()) {
    if (f.drop == "none") {
      cfg.train.model.branches.use_drop_branch = false;
    } else {
      apply_setting(cfg, "masks.kind", f.drop);
      cfg.train.model.branches.use_drop_branch = true;
    }
  }
  for (const auto& a : f.sets) apply_assignment(cfg, a);
  cfg.validate();
  return cfg;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> ks;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(item, &pos);
      if (pos != item.size() || v <= 0) throw std::invalid_argument(item);
      ks.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("--ks: invalid value '" + item + "'");
    }
  }
  if (ks.empty()) throw ConfigError("--ks needs at least one value");
  return ks;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
}

std::string split_table(const DatasetSplit& s) {
  std::ostringstream os;
  auto ids = [](const std::vector<Record>& rs) {
    std::set<int> u;
    for (const auto& r : rs) u.insert(r.identity);
    return u.size();
  };
  os << std::left << std::setw(10) << "split" << std::right << std::setw(12) << "identities" << std::setw(10)
     << "images" << '\n';
  const std::pair<const char*, const std::vector<Record>*> parts[] = {
      {"train", &s.train}, {"query", &s.query}, {"gallery", &s.gallery}};
  for (const auto& [name, rs] : parts) {
    os << std::left << std::setw(10) << name << std::right << std::setw(12) << ids(*rs) << std::setw(10)
       << rs->size() << '\n';
  }
  return os.str();
}

// Split used to evaluate a checkpoint: an explicit manifest, else the one
// the checkpoint was trained on (regenerated when synthetic).
DatasetSplit checkpoint_split(const Checkpoint& c, const std::string& manifest) {
  if (!manifest.empty()) return load_manifest(manifest);
  return load_or_generate(run_config_from_json(c.run_config));
}

const Normalizer* normalizer_of(const Checkpoint& c) { return c.normalizer.mean.empty() ? nullptr : &c.normalizer; }

// ---- commands ------------------------------------------------------------------

struct GenData {
  RunFlags flags;
  std::string out = "data.jsonl";
};

int gen_data(const GenData& g, std::ostream& out) {
  const RunConfig cfg = build_config(g.flags);
  const DatasetSplit split = gen_synthetic(cfg.data);
  save_manifest(g.out, split);
  out << split_table(split);
  out << "wrote " << g.out << '\n';
  return 0;
}

struct Train {
  RunFlags flags;
};

int train(const Train& t, std::ostream& out) {
  const RunConfig cfg = build_config(t.flags);
  const DatasetSplit split = load_or_generate(cfg);
  TrainResult res = train_loop(cfg.train, split);
  const Normalizer* n = res.normalizer.mean.empty() ? nullptr : &res.normalizer;
  MetricsReport report = evaluate_reid(res.model, n, split, cfg.train.max_rank);
  report.config["run"] = to_json(cfg);

  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  const nlohmann::json run_json = nlohmann::json::parse(to_json(cfg).dump());
  save_checkpoint(dir / "checkpoint.json", {run_json, res.model, res.normalizer, res.mask_rng_state});
  std::ostringstream history;
  write_history_csv(history, res.history);
  write_text(dir / "history.csv", history.str());
  write_text(dir / "metrics.json", report.to_json().dump(2) + "\n");
  out << std::setprecision(4) << "rank1=" << report.rank1 << " map=" << report.map << " -> " << dir.string() << '\n';
  return 0;
}

struct Eval {
  std::string checkpoint, manifest, query_embeddings, gallery_embeddings, embeddings;
  std::string protocol = "reid";
  std::string ks = "1,2,4,8";
  std::size_t max_rank = 50;
  std::string out;
  std::string save_embeddings;
};

int eval(const Eval& e, std::ostream& out) {
  if (e.protocol != "reid" && e.protocol != "retrieval") {
    throw ConfigError("--protocol must be reid or retrieval");
  }
  const bool reid = e.protocol == "reid";
  std::vector<EmbeddingRecord> q, g;
  if (!e.checkpoint.empty()) {
    Checkpoint c = load_checkpoint(e.checkpoint);
    const DatasetSplit split = checkpoint_split(c, e.manifest);
    q = extract_embeddings(c.model, split.query, normalizer_of(c));
    g = extract_embeddings(c.model, split.gallery, normalizer_of(c));
    if (!e.save_embeddings.empty()) {
      fs::create_directories(e.save_embeddings);
      save_embeddings(fs::path(e.save_embeddings) / "query.emb", q);
      save_embeddings(fs::path(e.save_embeddings) / "gallery.emb", g);
    }
  } else if (reid && !e.query_embeddings.empty() && !e.gallery_embeddings.empty()) {
    q = load_embeddings(e.query_embeddings);
    g = load_embeddings(e.gallery_embeddings);
  } else if (!reid && !e.embeddings.empty()) {
    q = load_embeddings(e.embeddings);
  } else {
    throw ConfigError(reid ? "eval needs --checkpoint or both --query-embeddings and --gallery-embeddings"
                           : "eval needs --checkpoint or --embeddings");
  }

  MetricsReport report;
  if (reid) {
    report = reid_metrics(q, g, e.max_rank);
  } else {
    std::vector<EmbeddingRecord> all = q;
    all.insert(all.end(), g.begin(), g.end());
    report = recall_at_k(all, parse_ks(e.ks));
  }
  const std::string text = report.to_json().dump(2) + "\n";
  if (e.out.empty()) {
    out << text;
  } else {
    write_text(e.out, text);
  }
  return 0;
}

struct Ablate {
  RunFlags flags;
  std::string sweep;
  std::string values;
  std::size_t seeds = 5;
  std::string out;
};

int ablate(const Ablate& a, std::ostream& out) {
  const RunConfig cfg = build_config(a.flags);
  default_sweep_values(a.sweep);  // rejects unknown sweeps before any data work
  const DatasetSplit split = load_or_generate(cfg);
  const auto rows = run_ablation(cfg, split, a.sweep, split_list(a.values), a.seeds, ablation_threads());
  std::ostringstream csv;
  write_ablation_csv(csv, rows);
  if (a.out.empty()) {
    out << csv.str();
  } else {
    write_text(a.out, csv.str());
    out << "wrote " << a.out << '\n';
  }
  return 0;
}

struct ExportActivation {
  std::string checkpoint, manifest;
  std::string split = "query";
  std::string source;
  std::string out = "activation";
};

int export_activation(const ExportActivation& x, std::ostream& out) {
  Checkpoint c = load_checkpoint(x.checkpoint);
  const DatasetSplit split = checkpoint_split(c, x.manifest);
  const std::vector<Record>* records = nullptr;
  if (x.split == "query") {
    records = &split.query;
  } else if (x.split == "gallery") {
    records = &split.gallery;
  } else if (x.split == "train") {
    records = &split.train;
  } else {
    throw ConfigError("--split must be query, gallery or train");
  }
  const ActivationSource source =
      x.source.empty()
          ? (c.model.config().branches.use_drop_branch ? ActivationSource::drop : ActivationSource::backbone)
          : parse_activation_source(x.source);
  const ActivationExport a = compute_activation(c.model, normalizer_of(c), *records, source);
  write_activation(x.out, a);
  out << std::setprecision(6) << "source=" << to_string(source) << " samples=" << a.maps.batch
      << " mean_entropy=" << a.mean_entropy() << " -> " << x.out << '\n';
  return 0;
}

int keys(std::ostream& out) {
  const RunConfig desk = preset_config("desk");
  for (const auto& k : knobs()) {
    out << std::left << std::setw(30) << k.key << std::setw(14) << get_setting(desk, k.key) << k.help << '\n';
  }
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Batch DropBlock metric-learning toolkit", "bdb"};
  app.require_subcommand(1);

  GenData gd;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic split and write its manifest");
  add_run_flags(gen_cmd, gd.flags,
                {{"--seed", "data.seed"},
                 {"--cameras", "data.cameras"},
                 {"--train-ids", "data.train_ids"},
                 {"--test-ids", "data.test_ids"},
                 {"--images-per-id", "data.images_per_id"},
                 {"--queries-per-id", "data.queries_per_id"},
                 {"--occlusion-rate", "data.occlusion_rate"},
                 {"--query-occluded", "data.query_occluded"},
                 {"--noise", "data.noise"}},
                false);
  gen_cmd->add_option("--out", gd.out, "manifest path")->capture_default_str();

  const std::initializer_list<ShortcutSpec> training_flags = {
      {"--seed", "run.seed"},          {"--manifest", "data.manifest"}, {"--data-seed", "data.seed"},
      {"--rh", "masks.r_h"},           {"--rw", "masks.r_w"},           {"--drop-p", "masks.p"},
      {"--pooling", "model.drop_pooling"}, {"--loss", "loss.spec"},     {"--epochs", "train.total_epochs"},
      {"--eval-every", "train.eval_every"}};

  Train tr;
  auto* train_cmd = app.add_subcommand("train", "train a model; writes checkpoint.json, history.csv, metrics.json");
  add_run_flags(train_cmd, tr.flags, training_flags, true);
  {
    auto sc = std::make_unique<Shortcut>();
    sc->flag = "--out";
    sc->key = "run.out";
    sc->option = train_cmd->add_option("--out", sc->value, "output directory (sets run.out)");
    tr.flags.shortcuts.push_back(std::move(sc));
  }

  Eval ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint or embedding files");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint.json written by train");
  eval_cmd->add_option("--manifest", ev.manifest, "split to evaluate on (default: the checkpoint's own)");
  eval_cmd->add_option("--query-embeddings", ev.query_embeddings, "query embeddings file (reid)");
  eval_cmd->add_option("--gallery-embeddings", ev.gallery_embeddings, "gallery embeddings file (reid)");
  eval_cmd->add_option("--embeddings", ev.embeddings, "embeddings file (retrieval)");
  eval_cmd->add_option("--protocol", ev.protocol, "reid|retrieval")->capture_default_str();
  eval_cmd->add_option("--ks", ev.ks, "Recall@K values for retrieval")->capture_default_str();
  eval_cmd->add_option("--max-rank", ev.max_rank, "CMC length for reid")->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "metrics JSON path (default: stdout)");
  eval_cmd->add_option("--save-embeddings", ev.save_embeddings,
                       "directory for query.emb and gallery.emb (checkpoint mode)");

  Ablate ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "run a named sweep over seeds; emits mean/std Rank-1 and mAP");
  add_run_flags(ablate_cmd, ab.flags, training_flags, true);
  ablate_cmd->add_option("--sweep", ab.sweep, "branches|variants|ratio|pooling")->required();
  ablate_cmd->add_option("--values", ab.values, "comma-separated sweep values (default: the sweep's own)");
  ablate_cmd->add_option("--seeds", ab.seeds, "seeds per configuration (run.seed + i)")->capture_default_str();
  ablate_cmd->add_option("--out", ab.out, "CSV path (default: stdout)");

  ExportActivation ea;
  auto* act_cmd = app.add_subcommand("export-activation", "write spatial energy maps and their entropies");
  act_cmd->add_option("--checkpoint", ea.checkpoint, "checkpoint.json written by train")->required();
  act_cmd->add_option("--manifest", ea.manifest, "split to read (default: the checkpoint's own)");
  act_cmd->add_option("--split", ea.split, "query|gallery|train")->capture_default_str();
  act_cmd->add_option("--source", ea.source, "backbone|drop (default: drop when the model has it)");
  act_cmd->add_option("--out", ea.out, "output directory")->capture_default_str();

  auto* keys_cmd = app.add_subcommand("keys", "list every setting with its desk-preset value");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen_cmd) return gen_data(gd, out);
    if (*train_cmd) return train(tr, out);
    if (*eval_cmd) return eval(ev, out);
    if (*ablate_cmd) return ablate(ab, out);
    if (*act_cmd) return export_activation(ea, out);
    if (*keys_cmd) return keys(out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace bdb::cli
