// Command-line front end for the ice-layer graph-transformer pipeline:
// synthetic data generation, split manifests, training, evaluation,
// prediction export, and the finite-difference self-check.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <unordered_set>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stgrit/dataset.hpp"
#include "stgrit/gradcheck.hpp"
#include "stgrit/model.hpp"
#include "stgrit/training.hpp"

namespace {

using namespace stgrit;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;       // usage or configuration error
constexpr int kExitValidation = 2;  // data validation failure
constexpr int kExitNumerical = 3;   // non-finite values or gradcheck failure

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string data_path;
  std::string manifest_path;
  std::size_t min_layers = 20;
  HaversineMode haversine = HaversineMode::AsPrinted;
};

void reject_unknown_keys(const nlohmann::json& j, const std::unordered_set<std::string>& known,
                         const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key()))
      throw ConfigError("config: unknown key '" + it.key() + "' in section '" + where + "'");
  }
}

RunConfig parse_run_config(const std::string& path) {
  RunConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  nlohmann::json root;
  try {
    in >> root;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
  reject_unknown_keys(root, {"model", "train", "data"}, "(top level)");

  if (root.contains("model")) {
    const auto& m = root.at("model");
    reject_unknown_keys(m,
                        {"embed_dim", "num_heads", "num_groups", "ff_multiplier", "dropout_rate",
                         "decoder_dims", "layer_norm_eps"},
                        "model");
    if (m.contains("embed_dim")) cfg.model.embed_dim = m.at("embed_dim").get<std::size_t>();
    if (m.contains("num_heads")) cfg.model.num_heads = m.at("num_heads").get<std::size_t>();
    if (m.contains("num_groups")) cfg.model.num_groups = m.at("num_groups").get<std::size_t>();
    if (m.contains("ff_multiplier"))
      cfg.model.ff_multiplier = m.at("ff_multiplier").get<std::size_t>();
    if (m.contains("dropout_rate")) cfg.model.dropout_rate = m.at("dropout_rate").get<double>();
    if (m.contains("decoder_dims")) {
      auto dims = m.at("decoder_dims").get<std::vector<std::size_t>>();
      if (dims.size() != 3) throw ConfigError("config: model.decoder_dims must have 3 entries");
      std::copy(dims.begin(), dims.end(), cfg.model.decoder_dims.begin());
    }
    if (m.contains("layer_norm_eps"))
      cfg.model.layer_norm_eps = m.at("layer_norm_eps").get<double>();
  }

  if (root.contains("train")) {
    const auto& t = root.at("train");
    reject_unknown_keys(t,
                        {"epochs", "initial_lr", "scheduler", "plateau_patience", "step_period",
                         "lr_factor", "batch_size", "seed", "adam_beta1", "adam_beta2", "adam_eps",
                         "grad_clip"},
                        "train");
    if (t.contains("epochs")) cfg.train.epochs = t.at("epochs").get<std::size_t>();
    if (t.contains("initial_lr")) cfg.train.initial_lr = t.at("initial_lr").get<double>();
    if (t.contains("scheduler"))
      cfg.train.scheduler = scheduler_from_string(t.at("scheduler").get<std::string>());
    if (t.contains("plateau_patience"))
      cfg.train.plateau_patience = t.at("plateau_patience").get<std::size_t>();
    if (t.contains("step_period")) cfg.train.step_period = t.at("step_period").get<std::size_t>();
    if (t.contains("lr_factor")) cfg.train.lr_factor = t.at("lr_factor").get<double>();
    if (t.contains("batch_size")) cfg.train.batch_size = t.at("batch_size").get<std::size_t>();
    if (t.contains("seed")) cfg.train.seed = t.at("seed").get<std::uint64_t>();
    if (t.contains("adam_beta1")) cfg.train.adam_beta1 = t.at("adam_beta1").get<double>();
    if (t.contains("adam_beta2")) cfg.train.adam_beta2 = t.at("adam_beta2").get<double>();
    if (t.contains("adam_eps")) cfg.train.adam_eps = t.at("adam_eps").get<double>();
    if (t.contains("grad_clip")) cfg.train.grad_clip = t.at("grad_clip").get<double>();
  }

  if (root.contains("data")) {
    const auto& d = root.at("data");
    reject_unknown_keys(
        d, {"path", "manifest", "p", "q", "min_layers", "normalize", "haversine_mode", "aggregation"},
        "data");
    if (d.contains("path")) cfg.data_path = d.at("path").get<std::string>();
    if (d.contains("manifest")) cfg.manifest_path = d.at("manifest").get<std::string>();
    if (d.contains("p")) cfg.model.p = d.at("p").get<std::size_t>();
    if (d.contains("q")) cfg.model.q = d.at("q").get<std::size_t>();
    if (d.contains("min_layers")) cfg.min_layers = d.at("min_layers").get<std::size_t>();
    if (d.contains("normalize")) cfg.train.normalize = d.at("normalize").get<bool>();
    if (d.contains("haversine_mode"))
      cfg.haversine = haversine_mode_from_string(d.at("haversine_mode").get<std::string>());
    if (d.contains("aggregation"))
      cfg.model.aggregation = aggregation_from_string(d.at("aggregation").get<std::string>());
  }

  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

nlohmann::json resolved_config_json(const RunConfig& cfg) {
  nlohmann::json model = model_config_to_json(cfg.model);
  model.erase("p");
  model.erase("q");
  model.erase("aggregation");
  model.erase("in_features");
  nlohmann::json train{{"epochs", cfg.train.epochs},
                       {"initial_lr", cfg.train.initial_lr},
                       {"scheduler", to_string(cfg.train.scheduler)},
                       {"plateau_patience", cfg.train.plateau_patience},
                       {"step_period", cfg.train.step_period},
                       {"lr_factor", cfg.train.lr_factor},
                       {"batch_size", cfg.train.batch_size},
                       {"seed", cfg.train.seed},
                       {"adam_beta1", cfg.train.adam_beta1},
                       {"adam_beta2", cfg.train.adam_beta2},
                       {"adam_eps", cfg.train.adam_eps},
                       {"grad_clip", cfg.train.grad_clip}};
  nlohmann::json data{{"path", cfg.data_path},
                      {"manifest", cfg.manifest_path},
                      {"p", cfg.model.p},
                      {"q", cfg.model.q},
                      {"min_layers", cfg.min_layers},
                      {"normalize", cfg.train.normalize},
                      {"haversine_mode", to_string(cfg.haversine)},
                      {"aggregation", to_string(cfg.model.aggregation)}};
  return nlohmann::json{{"model", model}, {"train", train}, {"data", data}};
}

std::vector<LayerRecord> load_valid_records(const std::string& path, std::size_t min_layers,
                                            bool verbose = true) {
  std::vector<LayerRecord> records = load_records(path);
  std::vector<LayerRecord> valid;
  std::size_t rejected = 0;
  for (auto& rec : records) {
    const ValidationResult res = validate(rec, min_layers);
    if (res.accepted) {
      valid.push_back(std::move(rec));
    } else {
      ++rejected;
      if (verbose) std::cout << "rejected " << rec.source_id << ": " << res.reason << "\n";
    }
  }
  if (verbose)
    std::cout << "records: " << valid.size() << " valid, " << rejected << " rejected\n";
  if (valid.empty()) throw ValidationError("no valid records in '" + path + "'");
  return valid;
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_gen(const std::string& out, std::size_t records, std::uint64_t seed, std::size_t traces,
            std::size_t layers, std::size_t min_layers, double rho) {
  SyntheticConfig cfg;
  cfg.num_records = records;
  cfg.num_traces = traces;
  cfg.num_layers = layers;
  cfg.min_layers_required = min_layers;
  cfg.depth_correlation = rho;
  cfg.seed = seed;
  const auto data = generate_synthetic(cfg);
  save_records(data, out);
  std::size_t accepted = 0;
  for (const auto& rec : data)
    if (validate(rec, min_layers).accepted) ++accepted;
  std::cout << "wrote " << data.size() << " records (" << traces << " traces x " << layers
            << " layers) to " << out << "\n";
  std::cout << "validation: " << accepted << "/" << data.size() << " pass the " << min_layers
            << "-complete-layer filter\n";
  return kExitOk;
}

int cmd_split(const std::string& in, std::size_t versions, std::uint64_t seed,
              const std::string& out, std::size_t min_layers) {
  const auto valid = load_valid_records(in, min_layers);
  SplitManifest manifest;
  manifest.versions = make_splits(valid, versions, seed);
  for (const auto& spec : manifest.versions)
    manifest.stats.push_back(compute_norm_stats(valid, spec.train));
  save_manifest(manifest, out);
  for (std::size_t k = 0; k < manifest.versions.size(); ++k) {
    const auto& s = manifest.versions[k];
    std::cout << "version " << k << ": " << s.train.size() << "/" << s.val.size() << "/"
              << s.test.size() << " (train/val/test), seed " << s.seed << "\n";
  }
  std::cout << "wrote manifest to " << out << "\n";
  return kExitOk;
}

int cmd_train(RunConfig cfg, std::size_t version, const std::string& out_dir,
              bool parallel_versions) {
  std::cout << "resolved config:\n" << resolved_config_json(cfg).dump(2) << "\n";
  if (cfg.data_path.empty() || cfg.manifest_path.empty())
    throw ConfigError("train: --data and --manifest (or config data.path/data.manifest) required");
  if (cfg.min_layers < cfg.model.p + cfg.model.q)
    throw ConfigError("train: min_layers must cover p+q layers");
  const auto records = load_valid_records(cfg.data_path, cfg.min_layers);
  const SplitManifest manifest = load_manifest(cfg.manifest_path);
  std::filesystem::create_directories(out_dir);

  if (parallel_versions) {
    VersionsReport report = run_versions(
        records, manifest, cfg.model, cfg.train, cfg.haversine, out_dir, /*parallel=*/true);
    for (const auto& v : report.versions)
      std::cout << "version " << v.version << ": test rmse " << v.report.rmse << " (best epoch "
                << v.run.best_epoch << ")\n";
    std::cout << "rmse mean " << report.mean_rmse << " std " << report.std_rmse << "\n";
    std::ofstream out(out_dir + "/report.json");
    out << versions_report_to_json(report).dump(2) << "\n";
    std::cout << "wrote " << out_dir << "/report.json\n";
    return kExitOk;
  }

  if (version >= manifest.versions.size())
    throw ConfigError("train: version " + std::to_string(version) + " not in manifest");
  const SplitSpec& spec = manifest.versions[version];
  const NormStats stats = version < manifest.stats.size()
                              ? manifest.stats[version]
                              : compute_norm_stats(records, spec.train);
  auto train_split = build_sequences(records, spec.train, cfg.model.p, cfg.model.q, cfg.haversine);
  auto val_split = build_sequences(records, spec.val, cfg.model.p, cfg.model.q, cfg.haversine);
  const std::string ckpt = out_dir + "/checkpoint_v" + std::to_string(version) + ".stck";
  TrainResult result =
      train(train_split, val_split, cfg.model, cfg.train, stats, version, ckpt,
            [](const EpochMetrics& m) {
              std::cout << "epoch " << m.epoch << " train " << m.train_loss << " val "
                        << m.val_loss << " lr " << m.lr << "\n";
            });
  save_metrics_csv(result.run.history, out_dir + "/metrics_v" + std::to_string(version) + ".csv");
  std::cout << "best val loss " << result.run.best_val_loss << " at epoch "
            << result.run.best_epoch << "\n";
  std::cout << "wrote " << ckpt << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& manifest_path, std::size_t version, const std::string& out) {
  LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
  const std::size_t need = ckpt.params.config.p + ckpt.params.config.q;
  const auto records = load_valid_records(data_path, need, /*verbose=*/false);
  const SplitManifest manifest = load_manifest(manifest_path);
  if (version >= manifest.versions.size())
    throw ConfigError("eval: version " + std::to_string(version) + " not in manifest");
  auto test_split = build_sequences(records, manifest.versions[version].test,
                                    ckpt.params.config.p, ckpt.params.config.q,
                                    HaversineMode::AsPrinted);
  const EvalReport report = evaluate_rmse(ckpt.params, ckpt.meta, test_split);
  std::cout << "test rmse " << report.rmse << " over " << report.num_sequences << " sequences\n";
  for (std::size_t j = 0; j < report.per_layer_rmse.size(); ++j)
    std::cout << "layer " << j << " rmse " << report.per_layer_rmse[j] << "\n";
  nlohmann::json j{{"version", version},
                   {"rmse", report.rmse},
                   {"per_layer_rmse", report.per_layer_rmse},
                   {"num_sequences", report.num_sequences}};
  std::ofstream os(out);
  if (!os) throw ConfigError("eval: cannot open '" + out + "'");
  os << j.dump(2) << "\n";
  std::cout << "wrote " << out << "\n";
  return kExitOk;
}

int cmd_predict(const std::string& ckpt_path, const std::string& data_path,
                const std::string& out) {
  LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
  const ModelConfig& mc = ckpt.params.config;
  // records only need the p input layers; ground truth is emitted when the
  // deeper layers exist
  const auto records = load_valid_records(data_path, mc.p, /*verbose=*/false);
  std::ofstream os(out, std::ios::binary);
  if (!os) throw ConfigError("predict: cannot open '" + out + "'");
  os << "source_id,trace_index,layer_index,predicted_thickness,actual_thickness\n";
  AggregationCache cache;
  Rng unused(0);
  std::string buf;
  for (const auto& rec : records) {
    const auto layers = rec.complete_layer_indices();
    const std::size_t avail = std::min(mc.q, layers.size() - mc.p);
    // pad missing target columns with zeros; they are never printed
    std::vector<double> matrix(rec.num_traces * (mc.p + mc.q), 0.0);
    for (std::size_t t = 0; t < rec.num_traces; ++t)
      for (std::size_t j = 0; j < mc.p + avail; ++j)
        matrix[t * (mc.p + mc.q) + j] = rec.thickness_at(t, layers[j]);
    GraphSequence seq = build_sequence(rec.latitude, rec.longitude, matrix, mc.p + mc.q, mc.p,
                                       mc.q, HaversineMode::AsPrinted, rec.source_id);
    EncodedSequence enc =
        encode_sequence(seq, ckpt.meta.stats, ckpt.meta.normalize, mc.aggregation, &cache);
    Tensor pred = stgrit_forward(enc.inputs, enc.agg, ckpt.params, /*training=*/false, unused);
    const auto& pv = pred.value();
    buf.clear();
    for (std::size_t t = 0; t < seq.num_nodes; ++t) {
      for (std::size_t j = 0; j < mc.q; ++j) {
        buf += seq.source_id;
        buf += ',';
        buf += std::to_string(t);
        buf += ',';
        if (j < avail) buf += std::to_string(layers[mc.p + j]);
        buf += ',';
        detail::append_double(
            buf, denormalize_thickness(pv[t * mc.q + j], ckpt.meta.stats, ckpt.meta.normalize));
        buf += ',';
        if (j < avail) detail::append_double(buf, seq.target_at(t, j));
        buf += '\n';
      }
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  std::cout << "wrote predictions for " << records.size() << " records to " << out << "\n";
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed) {
  constexpr double kTol = 1e-4;
  auto results = gradcheck::run_op_suite(seed);
  results.push_back(full_model_gradcheck(seed));
  bool all_pass = true;
  for (const auto& r : results) {
    const bool pass = r.passes(kTol);
    all_pass = all_pass && pass;
    std::printf("%-14s max rel err %.3e  %s\n", r.name.c_str(), r.max_rel_err,
                pass ? "PASS" : "FAIL");
  }
  std::cout << (all_pass ? "gradcheck: all ops pass" : "gradcheck: FAILURES above") << "\n";
  return all_pass ? kExitOk : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  stgrit::tune_allocator();
  CLI::App app{"spatio-temporal graph transformer for deep ice layer thickness"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "generate synthetic layer records");
  std::string gen_out;
  std::size_t gen_records = 1, gen_traces = 256, gen_layers = 20, gen_min_layers = 20;
  std::uint64_t gen_seed = 0;
  double gen_rho = 0.8;
  gen->add_option("--out", gen_out, "output CSV path")->required();
  gen->add_option("--records", gen_records, "number of records")->required();
  gen->add_option("--seed", gen_seed, "rng seed")->required();
  gen->add_option("--traces", gen_traces, "traces (nodes) per record");
  gen->add_option("--layers", gen_layers, "layers per record");
  gen->add_option("--min-layers", gen_min_layers, "required layer count");
  gen->add_option("--rho", gen_rho, "depth correlation factor");

  // split
  auto* split = app.add_subcommand("split", "build split manifest");
  std::string split_in, split_out;
  std::size_t split_versions = 5, split_min_layers = 20;
  std::uint64_t split_seed = 0;
  split->add_option("--in", split_in, "records CSV")->required();
  split->add_option("--versions", split_versions, "number of split versions");
  split->add_option("--seed", split_seed, "base seed")->required();
  split->add_option("--out", split_out, "manifest JSON path")->required();
  split->add_option("--min-layers", split_min_layers, "complete-layer filter");

  // train
  auto* tr = app.add_subcommand("train", "train a model on one split version");
  std::string tr_config, tr_data, tr_manifest, tr_out = "out";
  std::size_t tr_version = 0;
  bool tr_parallel = false;
  tr->add_option("--config", tr_config, "JSON run config");
  tr->add_option("--data", tr_data, "records CSV");
  tr->add_option("--manifest", tr_manifest, "split manifest JSON");
  tr->add_option("--version", tr_version, "split version index");
  tr->add_option("--out", tr_out, "output directory");
  tr->add_flag("--parallel-versions", tr_parallel, "train every version concurrently");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a test split");
  std::string ev_ckpt, ev_data, ev_manifest, ev_out = "eval_report.json";
  std::size_t ev_version = 0;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--data", ev_data, "records CSV")->required();
  ev->add_option("--manifest", ev_manifest, "split manifest JSON")->required();
  ev->add_option("--version", ev_version, "split version index");
  ev->add_option("--out", ev_out, "report JSON path");

  // predict
  auto* pr = app.add_subcommand("predict", "export per-trace predictions");
  std::string pr_ckpt, pr_data, pr_out;
  pr->add_option("--checkpoint", pr_ckpt, "checkpoint path")->required();
  pr->add_option("--data", pr_data, "records CSV")->required();
  pr->add_option("--out", pr_out, "output CSV path")->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op");
  std::uint64_t gc_seed = 2024;
  gc->add_option("--seed", gc_seed, "rng seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed())
      return cmd_gen(gen_out, gen_records, gen_seed, gen_traces, gen_layers, gen_min_layers,
                     gen_rho);
    if (split->parsed())
      return cmd_split(split_in, split_versions, split_seed, split_out, split_min_layers);
    if (tr->parsed()) {
      RunConfig cfg = parse_run_config(tr_config);
      if (!tr_data.empty()) cfg.data_path = tr_data;
      if (!tr_manifest.empty()) cfg.manifest_path = tr_manifest;
      return cmd_train(std::move(cfg), tr_version, tr_out, tr_parallel);
    }
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_manifest, ev_version, ev_out);
    if (pr->parsed()) return cmd_predict(pr_ckpt, pr_data, pr_out);
    if (gc->parsed()) return cmd_gradcheck(gc_seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericsError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
