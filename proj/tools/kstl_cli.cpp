// kstl: command-line front end for the synthetic benchmark, the data
// pipeline, single training stages and the full strategy matrix.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "kstl/embed/features.hpp"
#include "kstl/nn/gradcheck.hpp"
#include "kstl/transfer/experiment.hpp"

using namespace kstl;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string dataset = "A";
  std::string subset = "mixed";
  std::string matrix_subset = "all";
  std::string stage;
  std::string out;
  std::string from_checkpoint;
  std::string manifest;
  std::optional<std::size_t> runs;
  std::optional<std::size_t> threads;
  std::size_t coordinates = 12;
  bool image_vote = false;
};

json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
}

json config_json(const Options& o) { return o.config.empty() ? json::object() : read_json_file(o.config); }

transfer::ExperimentConfig load_config(const Options& o) {
  transfer::ExperimentConfig c;
  try {
    c = config_json(o).get<transfer::ExperimentConfig>();
  } catch (const json::exception& e) {
    throw ConfigError("config " + o.config + ": " + e.what());
  }
  if (o.seed) c.base_seed = *o.seed;
  if (o.runs) c.runs = *o.runs;
  if (o.threads) c.threads = *o.threads;
  c.validate();
  return c;
}

std::uint64_t seed_of(const Options& o, const transfer::ExperimentConfig& c) { return o.seed.value_or(c.base_seed); }

struct Records {
  std::vector<data::ImageRecord> records;
  std::vector<std::string> keys;
};

/// Records of one dataset: an explicit manifest, the configured manifests,
/// the synthetic benchmark (A, B) or the generic pretraining textures (G).
Records load_records(const Options& o, const transfer::ExperimentConfig& c) {
  Records r;
  if (!o.manifest.empty()) {
    r.records = data::load_manifest(o.manifest);
    if (r.records.empty()) throw DataError("manifest " + o.manifest + " has no rows");
    r.keys = data::default_catalog().at(r.records.front().dataset_tag);
    return r;
  }
  if (o.dataset == "G") {
    r.records = synth::generate_generic(c.stage0.classes, c.stage0.images_per_class_per_view, c.synth.edge,
                                        derive_seed(c.base_seed, "generic"));
    r.keys = synth::class_keys_for("G", c.stage0.classes);
    return r;
  }
  if (o.dataset != "A" && o.dataset != "B") throw ConfigError("--dataset must be A, B or G, got '" + o.dataset + "'");
  if (!c.manifest_a.empty()) {
    r.records = data::load_manifest(o.dataset == "A" ? c.manifest_a : c.manifest_b);
  } else {
    auto s = synth::generate(c.synth);
    r.records = std::move(o.dataset == "A" ? s.a : s.b);
  }
  r.keys = o.dataset == "A" ? data::dataset_a_keys() : data::dataset_b_keys();
  return r;
}

data::PreparedData prepare(const Options& o, const transfer::ExperimentConfig& c) {
  const auto r = load_records(o, c);
  return data::prepare(r.records, r.keys, data::parse_subset(o.subset), c.pipeline, seed_of(o, c));
}

fs::path out_dir(const Options& o, const std::string& command) {
  return o.out.empty() ? fs::path("kstl_out") / command : fs::path(o.out);
}

void print_warnings(const std::vector<std::string>& w) {
  for (const auto& s : w) std::cerr << "warning: " << s << '\n';
}

void write_config_and_seed(const fs::path& dir, const json& config, std::uint64_t seed) {
  transfer::write_text(dir / "config.json", config.dump(2) + "\n");
  transfer::write_text(dir / "seed.txt", std::to_string(seed) + "\n");
}

// ---- subcommands ----

int cmd_synth_gen(const Options& o) {
  const json j = config_json(o);
  synth::SynthSpec spec = j.contains("synth") ? j["synth"].get<synth::SynthSpec>() : j.get<synth::SynthSpec>();
  if (o.seed) spec.seed = *o.seed;
  const auto d = synth::generate(spec);
  const auto dir = out_dir(o, "synth");
  synth::write_dataset(dir, d);
  std::cout << "wrote " << d.a.size() << " A and " << d.b.size() << " B images to " << dir.string() << '\n';
  return 0;
}

int cmd_patchify(const Options& o) {
  const auto c = load_config(o);
  const auto r = load_records(o, c);
  const auto subset = data::parse_subset(o.subset);
  std::vector<data::ImageRecord> chosen;
  for (const auto& rec : r.records)
    if (data::in_subset(rec.view, subset)) chosen.push_back(rec);
  std::vector<std::string> warnings;
  const auto patches = data::extract_all(chosen, c.pipeline.grid, &warnings);
  print_warnings(warnings);
  const auto dir = out_dir(o, "patches");
  data::write_patch_store(dir, patches);
  std::cout << patches.size() << " patches of " << c.pipeline.grid.edge << "px from " << chosen.size()
            << " images written to " << dir.string() << '\n';
  return 0;
}

int cmd_split(const Options& o) {
  const auto c = load_config(o);
  const auto d = prepare(o, c);
  print_warnings(d.warnings);
  const auto dir = out_dir(o, "split");
  transfer::write_text(dir / "split.json", json(d.split).dump(2) + "\n");
  std::size_t train_frag = 0;
  for (const auto& [f, side] : d.split.fragments) train_frag += side == data::SplitSide::train;
  std::cout << train_frag << " of " << d.split.fragments.size() << " fragments on the training side; "
            << d.train.size() << " train / " << d.test.size() << " test patches after balancing\n";
  return 0;
}

int cmd_stats(const Options& o) {
  const auto c = load_config(o);
  const auto r = load_records(o, c);
  const auto d = data::prepare(r.records, r.keys, data::parse_subset(o.subset), c.pipeline, seed_of(o, c));
  const auto a = data::audit(r.records);
  json images = json::object();
  for (const auto& [k, v] : a.per_class) images[k] = {{"surface", v.surface}, {"section", v.section}};
  std::map<std::string, std::pair<std::size_t, std::size_t>> patches;
  for (const auto& p : d.train) ++patches[p.class_key].first;
  for (const auto& p : d.test) ++patches[p.class_key].second;
  json pj = json::object();
  for (const auto& [k, v] : patches) pj[k] = {{"train", v.first}, {"test", v.second}};
  const json j = {{"dataset", d.dataset_tag},
                  {"subset", o.subset},
                  {"images", images},
                  {"patches", pj},
                  {"whitening", d.stats},
                  {"train_fraction", d.split.train_fraction()},
                  {"warnings", d.warnings}};
  std::cout << j.dump(2) << '\n';
  if (!o.out.empty()) transfer::write_text(fs::path(o.out) / "stats.json", j.dump(2) + "\n");
  return 0;
}

template <typename T>
void finish_stage(const fs::path& dir, const transfer::StageResult<T>& r, const json& config, std::uint64_t seed) {
  write_config_and_seed(dir, config, seed);
  const auto m = transfer::write_stage_outputs(dir, r);
  std::cout << "stage " << r.checkpoint.meta.stage << ": test accuracy " << m.accuracy << ", macro f1 " << m.f1
            << "; outputs in " << dir.string() << '\n';
}

template <typename T>
int run_train(const Options& o, const transfer::ExperimentConfig& c) {
  const std::string stage = o.stage.empty() ? "scratch" : o.stage;
  transfer::StageSpec s;
  s.seed = seed_of(o, c);
  s.scratch_policy = c.scratch_policy;
  Options opt = o;
  if (stage == "stage0") {
    if (o.manifest.empty()) opt.dataset = "G";
    const auto d = prepare(opt, c);
    auto arch = c.arch;
    arch.head = nn::make_head(c.head_hidden(), d.class_keys.size());
    s.config = c.stage0.train;
    const auto r = transfer::run_stage0_pretrain<T>(arch, d, s);
    finish_stage(out_dir(o, "train"), r, json(c), s.seed);
  } else if (stage == "scratch") {
    const auto d = prepare(opt, c);
    s.config = c.scratch;
    const auto r = transfer::run_scratch<T>(c.arch, d, s);
    finish_stage(out_dir(o, "train"), r, json(c), s.seed);
  } else {
    throw UsageError("train --stage must be scratch or stage0, got '" + stage + "' (use transfer for hetl/hotl)");
  }
  return 0;
}

template <typename T>
int run_transfer(const Options& o, const transfer::ExperimentConfig& c, bool arch_requested) {
  if (o.stage.empty()) throw UsageError("transfer needs --stage hetl or --stage hotl");
  const auto kind = transfer::parse_stage(o.stage);
  transfer::StageSpec s;
  s.seed = seed_of(o, c);
  s.mapping = c.mapping;
  if (kind == transfer::StageKind::hetl) {
    std::optional<nn::Checkpoint> stage0;
    if (!o.from_checkpoint.empty()) stage0 = nn::read_checkpoint_file(o.from_checkpoint);
    const auto arch = stage0 ? transfer::hetl_architecture(stage0->meta.arch, c.arch.num_classes(), c.head_hidden()) : c.arch;
    const auto d = prepare(o, c);
    s.config = c.hetl;
    const auto r = transfer::run_hetl<T>(stage0 ? &*stage0 : nullptr, arch, d, s);
    finish_stage(out_dir(o, "transfer"), r, json(c), s.seed);
  } else if (kind == transfer::StageKind::hotl) {
    if (o.from_checkpoint.empty())
      throw UsageError("transfer --stage hotl needs --from-checkpoint: the HeTL checkpoint (model A) hand-off is missing");
    const auto source = nn::read_checkpoint_file(o.from_checkpoint);
    Options opt = o;
    if (o.manifest.empty() && o.dataset == "A") opt.dataset = "B";
    const auto d = prepare(opt, c);
    s.config = c.hotl;
    const auto r = transfer::run_hotl<T>(source, d, s, arch_requested ? &c.arch : nullptr);
    finish_stage(out_dir(o, "transfer"), r, json(c), s.seed);
  } else {
    throw UsageError("transfer --stage must be hetl or hotl, got '" + o.stage + "'");
  }
  return 0;
}

int cmd_train(const Options& o) {
  const auto c = load_config(o);
  return c.precision == "double" ? run_train<double>(o, c) : run_train<float>(o, c);
}

int cmd_transfer(const Options& o) {
  const auto c = load_config(o);
  const bool arch_requested = config_json(o).contains("arch");
  return c.precision == "double" ? run_transfer<double>(o, c, arch_requested) : run_transfer<float>(o, c, arch_requested);
}

int cmd_matrix(const Options& o) {
  auto c = load_config(o);
  if (o.matrix_subset != "all") c.subsets = {data::parse_subset(o.matrix_subset)};
  const auto d = transfer::load_experiment_data(c);
  const auto dir = out_dir(o, "matrix");
  const auto r = transfer::run_experiment_matrix(c, d, dir, [](const transfer::RunRecord& rec) {
    std::cerr << data::to_string(rec.subset) << " run" << rec.run << " " << transfer::strategy_slug(rec.strategy) << ": "
              << (rec.metrics ? "accuracy " + std::to_string(rec.metrics->accuracy) : "failed: " + rec.error) << '\n';
  });
  std::cout << metrics::table_text(r.table);
  return 0;
}

int cmd_evaluate(const Options& o) {
  if (o.from_checkpoint.empty()) throw UsageError("evaluate needs --from-checkpoint");
  const auto c = load_config(o);
  const auto ckpt = nn::read_checkpoint_file(o.from_checkpoint);
  const auto d = prepare(o, c);
  nn::Model<double> model(ckpt.meta.arch, 0);
  nn::restore(model, ckpt, false);
  const auto set = transfer::make_set<double>(d.test, d.stats, ckpt.meta.class_keys);
  const auto e = transfer::evaluate(model, set);
  const auto cm = metrics::confusion(e.predicted(), e.truth(), ckpt.meta.class_keys);
  const auto m = metrics::compute_metrics(cm);
  const auto dir = out_dir(o, "evaluate");
  transfer::write_text(dir / "predictions.csv", transfer::predictions_csv(e, ckpt.meta.class_keys));
  transfer::write_text(dir / "metrics.json", json{{"metrics", m}, {"confusion", cm}}.dump(2) + "\n");
  write_config_and_seed(dir, json(c), seed_of(o, c));
  std::cout << "accuracy " << m.accuracy << " precision " << m.precision << " recall " << m.recall << " f1 " << m.f1
            << '\n';
  if (o.image_vote) {
    const auto v = transfer::image_vote_report(e, d.test, ckpt.meta.class_keys);
    transfer::write_text(dir / "image_votes.json", v.dump(2) + "\n");
    std::cout << "image-level vote (extension): accuracy " << v["metrics"]["accuracy"].get<double>() << " over "
              << v["images"].size() << " images\n";
  }
  print_warnings(m.flags);
  return 0;
}

int cmd_features(const Options& o) {
  if (o.from_checkpoint.empty()) throw UsageError("features needs --from-checkpoint");
  const auto c = load_config(o);
  const auto ckpt = nn::read_checkpoint_file(o.from_checkpoint);
  const auto d = prepare(o, c);
  const auto f = embed::extract_features(ckpt, d.test, d.stats);
  const auto p = embed::pca_project(f.values, 2);
  std::vector<std::string> labels;
  for (const auto& r : f.rows) labels.push_back(r.class_key);
  const auto s = embed::separability_report(p.coords, labels);
  const auto full = embed::separability_report(f.values, labels);
  const auto dir = out_dir(o, "features");
  transfer::write_text(dir / "embedding.csv", embed::embedding_csv(f, p));
  json cd = json::object();
  for (Eigen::Index i = 0; i < s.centroid_distance.rows(); ++i)
    for (Eigen::Index j = 0; j < s.centroid_distance.cols(); ++j)
      cd[s.classes[i]][s.classes[j]] = s.centroid_distance(i, j);
  const json j = {{"silhouette_2d", s.silhouette},
                  {"silhouette_features", full.silhouette},
                  {"explained_variance", p.explained},
                  {"centroid_distance_2d", cd},
                  {"flags", s.flags}};
  transfer::write_text(dir / "separability.json", j.dump(2) + "\n");
  write_config_and_seed(dir, json(c), seed_of(o, c));
  std::cout << "silhouette: " << full.silhouette << " (features), " << s.silhouette << " (2-d projection)\n";
  return 0;
}

/// Rebuilds the table of a matrix run directory from its per-cell metrics.
int cmd_report(const Options& o) {
  if (o.out.empty()) throw UsageError("report needs --out pointing at a matrix run directory");
  const fs::path dir = o.out;
  const auto c = read_json_file((dir / "config.json").string()).get<transfer::ExperimentConfig>();
  std::vector<metrics::TableCell> table;
  for (auto subset : c.subsets)
    for (auto s : c.strategies) {
      metrics::TableCell cell{data::to_string(subset), transfer::strategy_label(s), transfer::strategy_dataset(s),
                              std::nullopt, ""};
      std::vector<metrics::MetricValues> ok;
      std::vector<std::string> missing;
      for (std::size_t run = 1; run <= c.runs; ++run) {
        const auto f = dir / "runs" / data::to_string(subset) / ("run" + std::to_string(run)) /
                       transfer::strategy_slug(s) / "metrics.json";
        if (fs::exists(f))
          ok.push_back(json::parse(transfer::read_text(f)).at("metrics").get<metrics::MetricValues>());
        else
          missing.push_back("run " + std::to_string(run) + " has no metrics");
      }
      if (ok.empty()) {
        cell.error = "no runs";
      } else {
        cell.report = metrics::aggregate(ok, cell.strategy, cell.subset, cell.dataset);
        cell.report->flags.insert(cell.report->flags.end(), missing.begin(), missing.end());
      }
      table.push_back(std::move(cell));
    }
  transfer::write_text(dir / "report" / "table.csv", metrics::table_csv(table));
  transfer::write_text(dir / "report" / "table.txt", metrics::table_text(table));
  transfer::write_text(dir / "report" / "table.json", metrics::table_json(table).dump(2) + "\n");
  std::cout << metrics::table_text(table);
  return 0;
}

int cmd_gradcheck(const Options& o) {
  nn::GradCheckOptions g;
  g.coordinates = o.coordinates;
  if (o.seed) g.seed = *o.seed;
  const auto results = nn::run_gradcheck_suite(g);
  bool ok = true;
  for (const auto& r : results) {
    const bool pass = r.passed(g.tolerance);
    ok = ok && pass;
    std::printf("%-32s worst relative error %.3e over %zu coordinates  %s\n", r.layer.c_str(), r.worst_relative_error,
                r.coordinates_checked, pass ? "ok" : "FAIL");
  }
  std::printf("%s (tolerance %.0e)\n", ok ? "all layers pass" : "gradient check failed", g.tolerance);
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kstl: two-step transfer learning experiments on image patches"};
  app.require_subcommand(1);
  Options o;
  const auto started = std::chrono::system_clock::now();

  auto common = [&](CLI::App* sc) {
    sc->add_option("--config", o.config, "JSON experiment config");
    sc->add_option("--seed", o.seed, "base seed; overrides the config");
    sc->add_option("--out", o.out, "output directory");
  };
  auto data_flags = [&](CLI::App* sc) {
    sc->add_option("--dataset", o.dataset, "A, B or G (generic pretraining textures)");
    sc->add_option("--subset", o.subset, "surface, section or mixed");
    sc->add_option("--manifest", o.manifest, "manifest CSV; overrides --dataset");
  };

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Options&);
    bool data;
    const char* default_out;  // nullptr: writes no run directory
  };
  const Command commands[] = {
      {"synth-gen", "write the synthetic two-domain benchmark as manifests and PPM rasters", cmd_synth_gen, false, "synth"},
      {"patchify", "cut a dataset into a patch store", cmd_patchify, true, "patches"},
      {"split", "fragment-level train/test split manifest", cmd_split, true, "split"},
      {"stats", "image and patch counts, whitening statistics", cmd_stats, true, nullptr},
      {"train", "train one stage from scratch (--stage scratch|stage0)", cmd_train, true, "train"},
      {"transfer", "one transfer step (--stage hetl|hotl)", cmd_transfer, true, "transfer"},
      {"matrix", "every strategy x subset x run, plus the aggregated table", cmd_matrix, false, "matrix"},
      {"evaluate", "evaluate a checkpoint on a test split", cmd_evaluate, true, "evaluate"},
      {"features", "penultimate-layer features, 2-d projection and separability", cmd_features, true, "features"},
      {"report", "rebuild the table of a matrix run directory (--out)", cmd_report, false, nullptr},
      {"gradcheck", "finite-difference gradient check of every layer", cmd_gradcheck, false, nullptr},
  };
  std::map<CLI::App*, const Command*> by_app;
  for (const auto& c : commands) {
    auto* sc = app.add_subcommand(c.name, c.help);
    common(sc);
    if (c.data) data_flags(sc);
    by_app[sc] = &c;
  }
  for (const char* name : {"train", "transfer"}) {
    auto* sc = app.get_subcommand(name);
    sc->add_option("--stage", o.stage, "stage kind");
    sc->add_option("--from-checkpoint", o.from_checkpoint, "hand-off checkpoint");
  }
  app.get_subcommand("evaluate")->add_flag("--image-vote", o.image_vote, "also write an image-level majority vote");
  for (const char* name : {"evaluate", "features"})
    app.get_subcommand(name)->add_option("--from-checkpoint", o.from_checkpoint, "checkpoint to load");
  auto* matrix = app.get_subcommand("matrix");
  matrix->add_option("--runs", o.runs, "runs per cell");
  matrix->add_option("--threads", o.threads, "worker threads (capped by STAGE_TRANSFER_THREADS)");
  matrix->add_option("--subset", o.matrix_subset, "surface, section, mixed or all (default)");
  app.get_subcommand("gradcheck")->add_option("--coordinates", o.coordinates, "coordinates per tensor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << '\n';
    return 2;
  }

  const Command* cmd = nullptr;
  for (auto* sc : app.get_subcommands()) cmd = by_app.at(sc);
  try {
    const int rc = cmd->run(o);
    if (rc == 0 && cmd->default_out) {
      std::string line;
      for (int i = 0; i < argc; ++i) line += (i ? " " : "") + std::string(argv[i]);
      transfer::write_metadata_sidecar(out_dir(o, cmd->default_out), line, started);
    }
    return rc;
  } catch (const Error& e) {
    std::cerr << "error: " << e.category() << ": " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
  }
  return 1;
}
