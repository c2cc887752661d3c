#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stgrit/dataset.hpp"
#include "stgrit/gradcheck.hpp"
#include "stgrit/model.hpp"
#include "stgrit/ops.hpp"

namespace stgrit {

/// Mean of squared elementwise differences over all entries.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  Tensor d = sub(pred, target);
  return mean_all(mul(d, d));
}

enum class SchedulerKind { Plateau, Step };

inline SchedulerKind scheduler_from_string(const std::string& s) {
  if (s == "plateau") return SchedulerKind::Plateau;
  if (s == "step") return SchedulerKind::Step;
  throw ConfigError("unknown scheduler '" + s + "' (expected plateau or step)");
}

inline std::string to_string(SchedulerKind k) {
  return k == SchedulerKind::Plateau ? "plateau" : "step";
}

struct TrainConfig {
  std::size_t epochs = 450;
  double initial_lr = 5e-4;
  SchedulerKind scheduler = SchedulerKind::Plateau;
  std::size_t plateau_patience = 24;  // epochs without a new best validation loss
  std::size_t step_period = 75;       // epochs between step-mode halvings
  double lr_factor = 0.5;
  std::size_t batch_size = 1;  // sequences per optimizer step (gradients averaged)
  std::uint64_t seed = 42;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // global-norm clip threshold, 0 disables
  bool normalize = true;   // z-score features/targets with train-split statistics

  void validate() const {
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    if (!(initial_lr > 0.0)) throw ConfigError("TrainConfig: initial_lr must be positive");
    if (plateau_patience < 1) throw ConfigError("TrainConfig: plateau_patience must be >= 1");
    if (step_period < 1) throw ConfigError("TrainConfig: step_period must be >= 1");
    if (!(lr_factor > 0.0 && lr_factor <= 1.0))
      throw ConfigError("TrainConfig: lr_factor must lie in (0, 1]");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (grad_clip < 0.0) throw ConfigError("TrainConfig: grad_clip must be >= 0");
  }
};

/// Learning-rate schedule. Step mode: lr = initial * factor^floor(epoch /
/// period). Plateau mode: multiply by factor once `patience` consecutive
/// validation epochs fail to improve the best loss strictly, then reset the
/// patience counter. Both produce a non-increasing sequence.
class LrScheduler {
public:
  LrScheduler(SchedulerKind kind, double initial_lr, double factor, std::size_t patience,
              std::size_t period)
      : kind_(kind),
        initial_(initial_lr),
        factor_(factor),
        patience_(patience),
        period_(period),
        current_(initial_lr) {}

  explicit LrScheduler(const TrainConfig& cfg)
      : LrScheduler(cfg.scheduler, cfg.initial_lr, cfg.lr_factor, cfg.plateau_patience,
                    cfg.step_period) {}

  /// Learning rate to use for the given epoch (call at epoch start).
  double lr_for_epoch(std::size_t epoch) {
    if (kind_ == SchedulerKind::Step)
      current_ = initial_ * std::pow(factor_, static_cast<double>(epoch / period_));
    return current_;
  }

  /// Plateau bookkeeping (call once per epoch, after validation).
  void observe_validation(double val_loss) {
    if (kind_ != SchedulerKind::Plateau) return;
    if (val_loss < best_) {
      best_ = val_loss;
      bad_epochs_ = 0;
    } else if (++bad_epochs_ >= patience_) {
      current_ *= factor_;
      bad_epochs_ = 0;
    }
  }

  double current() const { return current_; }

private:
  SchedulerKind kind_;
  double initial_, factor_;
  std::size_t patience_, period_;
  double current_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs_ = 0;
};

/// Adam with bias correction. Moment buffers follow registry order.
class AdamOptimizer {
public:
  AdamOptimizer(const ParamRegistry& registry, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, t] : registry.entries())
      slots_.push_back({std::vector<double>(t.size(), 0.0), std::vector<double>(t.size(), 0.0)});
  }

  void step(ParamRegistry& registry, double lr) {
    auto& entries = registry.mutable_entries();
    if (entries.size() != slots_.size())
      throw ContractError("AdamOptimizer: registry changed size");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& [name, tensor] = entries[i];
      if (!tensor.has_grad())
        throw ContractError("optimizer step: missing gradient for '" + name + "'");
      const auto& g = tensor.grad();
      auto& value = tensor.mutable_value();
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      for (std::size_t j = 0; j < g.size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        value[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  std::size_t step_count() const { return t_; }

private:
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
  double beta1_, beta2_, eps_;
};

/// Scales every gradient by min(1, max_norm / global_norm).
inline void clip_gradients(ParamRegistry& registry, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (const auto& [name, t] : registry.entries()) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double scale = max_norm / norm;
  for (auto& [name, t] : registry.mutable_entries()) {
    if (!t.has_grad()) continue;
    for (double& v : t.mutable_grad()) v *= scale;
  }
}

// ---------------------------------------------------------------------------
// sequence encoding
// ---------------------------------------------------------------------------

/// A GraphSequence converted to model tensors: per-layer node features
/// (optionally z-scored), the shared aggregation matrix, the normalized
/// target for the loss, and the raw target for reporting.
struct EncodedSequence {
  std::vector<Tensor> inputs;  // p tensors, N × 3
  Tensor agg;                  // N × N, constant
  Tensor target;               // N × q, normalized like the features
  std::vector<double> raw_targets;
  std::size_t num_nodes = 0;
  std::size_t q = 0;
  std::string source_id;
};

/// Cache for uniform-mode aggregation matrices, which depend only on N.
class AggregationCache {
public:
  Tensor uniform_for(std::size_t n) {
    auto it = cache_.find(n);
    if (it != cache_.end()) return it->second;
    LayerGraph dummy;
    dummy.num_nodes = n;
    dummy.edge_weight = std::make_shared<std::vector<double>>(n * n, 0.0);
    Tensor t = aggregation_matrix(dummy, Aggregation::Uniform);
    cache_.emplace(n, t);
    return t;
  }

private:
  std::map<std::size_t, Tensor> cache_;
};

inline EncodedSequence encode_sequence(const GraphSequence& seq, const NormStats& stats,
                                       bool normalize, Aggregation mode,
                                       AggregationCache* cache = nullptr) {
  EncodedSequence enc;
  enc.num_nodes = seq.num_nodes;
  enc.q = seq.q;
  enc.source_id = seq.source_id;
  const std::size_t n = seq.num_nodes;
  for (const LayerGraph& g : seq.inputs) {
    std::vector<double> f(n * 3);
    for (std::size_t i = 0; i < n; ++i) {
      if (normalize) {
        f[i * 3 + 0] = (g.latitude[i] - stats.lat_mean) / stats.lat_std;
        f[i * 3 + 1] = (g.longitude[i] - stats.lon_mean) / stats.lon_std;
        f[i * 3 + 2] = (g.thickness[i] - stats.thick_mean) / stats.thick_std;
      } else {
        f[i * 3 + 0] = g.latitude[i];
        f[i * 3 + 1] = g.longitude[i];
        f[i * 3 + 2] = g.thickness[i];
      }
    }
    enc.inputs.emplace_back(Shape{n, 3}, std::move(f));
  }
  if (mode == Aggregation::Uniform && cache != nullptr) {
    enc.agg = cache->uniform_for(n);
  } else {
    enc.agg = aggregation_matrix(seq.inputs.front(), mode);
  }
  enc.raw_targets = seq.targets;
  std::vector<double> t = seq.targets;
  if (normalize) {
    for (double& v : t) v = (v - stats.thick_mean) / stats.thick_std;
  }
  enc.target = Tensor({n, seq.q}, std::move(t));
  return enc;
}

/// Maps a normalized model output back to thickness units.
inline double denormalize_thickness(double v, const NormStats& stats, bool normalize) {
  return normalize ? v * stats.thick_std + stats.thick_mean : v;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct TrainRun {
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
  std::size_t split_version = 0;
};

struct TrainResult {
  TrainRun run;
  ModelParams best_params;
  CheckpointMeta best_meta;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

namespace detail {

// rng substream tags, xor-mixed into the training seed
inline constexpr std::uint64_t kInitStream = 0x9e3779b97f4a7c15ull;
inline constexpr std::uint64_t kShuffleStream = 0xd1b54a32d192ed03ull;
inline constexpr std::uint64_t kDropoutStream = 0x94d049bb133111ebull;

inline double eval_loss(const std::vector<EncodedSequence>& seqs, const ModelParams& params,
                        Rng& rng) {
  double total = 0.0;
  for (const EncodedSequence& enc : seqs) {
    Tensor pred = stgrit_forward(enc.inputs, enc.agg, params, /*training=*/false, rng);
    total += mse_loss(pred, enc.target).item();
  }
  return total / static_cast<double>(seqs.size());
}

}  // namespace detail

/// Full optimization loop: seeded per-epoch shuffle, forward/backward and an
/// Adam step per batch, a full eval-mode validation pass per epoch, snapshot
/// of the best-validation parameters (also written to checkpoint_path when
/// given). Deterministic for a fixed seed, config, and data.
inline TrainResult train(const std::vector<GraphSequence>& train_seqs,
                         const std::vector<GraphSequence>& val_seqs, const ModelConfig& mcfg,
                         const TrainConfig& tcfg, const NormStats& stats,
                         std::size_t split_version = 0, const std::string& checkpoint_path = {},
                         const EpochCallback& on_epoch = {}) {
  mcfg.validate();
  tcfg.validate();
  if (train_seqs.empty() || val_seqs.empty())
    throw ValidationError("train: train and validation splits must be nonempty");

  Rng init_rng(tcfg.seed ^ detail::kInitStream);
  Rng shuffle_rng(tcfg.seed ^ detail::kShuffleStream);
  Rng dropout_rng(tcfg.seed ^ detail::kDropoutStream);

  ModelParams params = ModelParams::init(mcfg, &init_rng);
  AdamOptimizer adam(params.registry, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps);
  LrScheduler sched(tcfg);

  AggregationCache agg_cache;
  std::vector<EncodedSequence> train_enc, val_enc;
  train_enc.reserve(train_seqs.size());
  for (const auto& s : train_seqs)
    train_enc.push_back(encode_sequence(s, stats, tcfg.normalize, mcfg.aggregation, &agg_cache));
  val_enc.reserve(val_seqs.size());
  for (const auto& s : val_seqs)
    val_enc.push_back(encode_sequence(s, stats, tcfg.normalize, mcfg.aggregation, &agg_cache));

  TrainResult result;
  result.run.seed = tcfg.seed;
  result.run.split_version = split_version;

  CheckpointMeta meta;
  meta.seed = tcfg.seed;
  meta.split_version = split_version;
  meta.normalize = tcfg.normalize;
  meta.stats = stats;
  meta.scheduler = to_string(tcfg.scheduler);

  std::vector<std::vector<double>> best_snapshot;
  std::vector<std::size_t> order(train_enc.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const double lr = sched.lr_for_epoch(epoch);
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t pos = 0;
    while (pos < order.size()) {
      const std::size_t chunk = std::min(tcfg.batch_size, order.size() - pos);
      for (std::size_t bi = 0; bi < chunk; ++bi) {
        const EncodedSequence& enc = train_enc[order[pos + bi]];
        try {
          Tape tape;
          Tape::Scope scope(tape);
          Tensor pred = stgrit_forward(enc.inputs, enc.agg, params, /*training=*/true, dropout_rng);
          Tensor loss = mse_loss(pred, enc.target);
          epoch_loss += loss.item();
          tape.backward(loss);
        } catch (const NumericsError& e) {
          throw NumericsError("train: epoch " + std::to_string(epoch) + ", sequence '" +
                              enc.source_id + "': " + e.what());
        }
      }
      if (chunk > 1) {
        const double inv = 1.0 / static_cast<double>(chunk);
        for (auto& [name, t] : params.registry.mutable_entries()) {
          if (!t.has_grad()) continue;
          for (double& v : t.mutable_grad()) v *= inv;
        }
      }
      clip_gradients(params.registry, tcfg.grad_clip);
      adam.step(params.registry, lr);
      params.registry.zero_grad();
      pos += chunk;
    }
    epoch_loss /= static_cast<double>(train_enc.size());

    const double val_loss = detail::eval_loss(val_enc, params, dropout_rng);

    if (val_loss < result.run.best_val_loss) {
      result.run.best_val_loss = val_loss;
      result.run.best_epoch = epoch;
      best_snapshot.clear();
      for (const auto& [name, t] : params.registry.entries()) best_snapshot.push_back(t.value());
      meta.epoch = epoch;
      meta.val_loss = val_loss;
      if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, params, meta);
    }
    sched.observe_validation(val_loss);

    EpochMetrics m{epoch, epoch_loss, val_loss, lr};
    result.run.history.push_back(m);
    if (on_epoch) on_epoch(m);
  }

  result.best_params = ModelParams::init(mcfg, nullptr);
  auto& best_entries = result.best_params.registry.mutable_entries();
  for (std::size_t i = 0; i < best_entries.size(); ++i)
    best_entries[i].second.mutable_value() = best_snapshot[i];
  result.best_meta = meta;
  return result;
}

inline void save_metrics_csv(const std::vector<EpochMetrics>& history, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("save_metrics_csv: cannot open '" + path + "'");
  std::string buf = "epoch,train_loss,val_loss,lr\n";
  for (const EpochMetrics& m : history) {
    buf += std::to_string(m.epoch);
    buf += ',';
    detail::append_double(buf, m.train_loss);
    buf += ',';
    detail::append_double(buf, m.val_loss);
    buf += ',';
    detail::append_double(buf, m.lr);
    buf += '\n';
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Squared-error accumulator in thickness units, with a per-layer breakdown.
class RmseAccumulator {
public:
  explicit RmseAccumulator(std::size_t q) : sq_per_layer_(q, 0.0), count_per_layer_(q, 0) {}

  void add(double predicted, double actual, std::size_t layer) {
    const double d = predicted - actual;
    sq_per_layer_[layer] += d * d;
    ++count_per_layer_[layer];
  }

  double rmse() const {
    double sq = 0.0;
    std::size_t n = 0;
    for (std::size_t j = 0; j < sq_per_layer_.size(); ++j) {
      sq += sq_per_layer_[j];
      n += count_per_layer_[j];
    }
    if (n == 0) throw ContractError("RmseAccumulator: no samples");
    return std::sqrt(sq / static_cast<double>(n));
  }

  std::vector<double> per_layer() const {
    std::vector<double> out(sq_per_layer_.size(), 0.0);
    for (std::size_t j = 0; j < out.size(); ++j) {
      if (count_per_layer_[j] == 0) throw ContractError("RmseAccumulator: empty layer");
      out[j] = std::sqrt(sq_per_layer_[j] / static_cast<double>(count_per_layer_[j]));
    }
    return out;
  }

private:
  std::vector<double> sq_per_layer_;
  std::vector<std::size_t> count_per_layer_;
};

struct EvalReport {
  double rmse = 0.0;
  std::vector<double> per_layer_rmse;
  std::size_t num_sequences = 0;
};

/// RMSE between predictions and ground truth over a test split, reported in
/// original (denormalized) thickness units with a per-layer breakdown.
inline EvalReport evaluate_rmse(const ModelParams& params, const CheckpointMeta& meta,
                                const std::vector<GraphSequence>& test_seqs) {
  if (test_seqs.empty()) throw ValidationError("evaluate_rmse: empty test split");
  const std::size_t q = params.config.q;
  RmseAccumulator acc(q);
  AggregationCache cache;
  Rng rng(0);  // unused: evaluation runs with dropout disabled
  for (const GraphSequence& seq : test_seqs) {
    EncodedSequence enc =
        encode_sequence(seq, meta.stats, meta.normalize, params.config.aggregation, &cache);
    Tensor pred = stgrit_forward(enc.inputs, enc.agg, params, /*training=*/false, rng);
    const auto& pv = pred.value();
    for (std::size_t i = 0; i < enc.num_nodes; ++i)
      for (std::size_t j = 0; j < q; ++j)
        acc.add(denormalize_thickness(pv[i * q + j], meta.stats, meta.normalize),
                enc.raw_targets[i * q + j], j);
  }
  EvalReport report;
  report.rmse = acc.rmse();
  report.per_layer_rmse = acc.per_layer();
  report.num_sequences = test_seqs.size();
  return report;
}

/// Per-layer mean thickness over a training split, in raw units. Serves as
/// the constant-predictor reference any trained model has to beat.
inline std::vector<double> per_layer_mean_baseline(const std::vector<GraphSequence>& train_seqs) {
  if (train_seqs.empty()) throw ValidationError("per_layer_mean_baseline: empty split");
  const std::size_t q = train_seqs.front().q;
  std::vector<double> sum(q, 0.0);
  std::vector<std::size_t> count(q, 0);
  for (const GraphSequence& seq : train_seqs) {
    for (std::size_t i = 0; i < seq.num_nodes; ++i)
      for (std::size_t j = 0; j < q; ++j) {
        sum[j] += seq.target_at(i, j);
        ++count[j];
      }
  }
  for (std::size_t j = 0; j < q; ++j) sum[j] /= static_cast<double>(count[j]);
  return sum;
}

inline double baseline_rmse(const std::vector<GraphSequence>& test_seqs,
                            const std::vector<double>& layer_means) {
  if (test_seqs.empty()) throw ValidationError("baseline_rmse: empty test split");
  RmseAccumulator acc(layer_means.size());
  for (const GraphSequence& seq : test_seqs)
    for (std::size_t i = 0; i < seq.num_nodes; ++i)
      for (std::size_t j = 0; j < layer_means.size(); ++j)
        acc.add(layer_means[j], seq.target_at(i, j), j);
  return acc.rmse();
}

// ---------------------------------------------------------------------------
// multi-version protocol
// ---------------------------------------------------------------------------

struct VersionOutcome {
  std::size_t version = 0;
  EvalReport report;
  TrainRun run;
};

struct VersionsReport {
  std::vector<VersionOutcome> versions;
  double mean_rmse = 0.0;
  double std_rmse = 0.0;  // sample standard deviation
};

inline std::vector<GraphSequence> build_sequences(const std::vector<LayerRecord>& records,
                                                  const std::vector<std::string>& ids,
                                                  std::size_t p, std::size_t q,
                                                  HaversineMode mode) {
  std::map<std::string, const LayerRecord*> by_id;
  for (const auto& r : records) by_id[r.source_id] = &r;
  std::vector<GraphSequence> seqs;
  seqs.reserve(ids.size());
  for (const std::string& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("build_sequences: unknown record id '" + id + "'");
    seqs.push_back(sequence_from_record(*it->second, p, q, mode));
  }
  return seqs;
}

/// Trains one model per split version and aggregates test RMSE as mean and
/// sample standard deviation. Versions are fully isolated (own parameters,
/// optimizer state, rng streams), so they may run in parallel threads.
inline VersionsReport run_versions(const std::vector<LayerRecord>& records,
                                   const SplitManifest& manifest, const ModelConfig& mcfg,
                                   const TrainConfig& tcfg, HaversineMode mode,
                                   const std::string& out_dir = {}, bool parallel = false,
                                   const std::function<void(std::size_t, const EpochMetrics&)>&
                                       on_epoch = {}) {
  const std::size_t k = manifest.versions.size();
  VersionsReport report;
  report.versions.resize(k);

  auto run_one = [&](std::size_t version) {
    const SplitSpec& spec = manifest.versions[version];
    NormStats stats = version < manifest.stats.size()
                          ? manifest.stats[version]
                          : compute_norm_stats(records, spec.train);
    auto train_split = build_sequences(records, spec.train, mcfg.p, mcfg.q, mode);
    auto val_split = build_sequences(records, spec.val, mcfg.p, mcfg.q, mode);
    auto test_split = build_sequences(records, spec.test, mcfg.p, mcfg.q, mode);
    std::string ckpt;
    if (!out_dir.empty()) ckpt = out_dir + "/checkpoint_v" + std::to_string(version) + ".stck";
    TrainConfig vcfg = tcfg;
    vcfg.seed = tcfg.seed + version;  // distinct but reproducible per version
    EpochCallback cb;
    if (on_epoch) cb = [&, version](const EpochMetrics& m) { on_epoch(version, m); };
    TrainResult res = train(train_split, val_split, mcfg, vcfg, stats, version, ckpt, cb);
    if (!out_dir.empty())
      save_metrics_csv(res.run.history, out_dir + "/metrics_v" + std::to_string(version) + ".csv");
    VersionOutcome outcome;
    outcome.version = version;
    outcome.run = std::move(res.run);
    outcome.report = evaluate_rmse(res.best_params, res.best_meta, test_split);
    report.versions[version] = std::move(outcome);
  };

  if (parallel) {
    std::vector<std::thread> threads;
    threads.reserve(k);
    for (std::size_t v = 0; v < k; ++v) threads.emplace_back(run_one, v);
    for (auto& t : threads) t.join();
  } else {
    for (std::size_t v = 0; v < k; ++v) run_one(v);
  }

  double sum = 0.0;
  for (const auto& v : report.versions) sum += v.report.rmse;
  report.mean_rmse = sum / static_cast<double>(k);
  double sq = 0.0;
  for (const auto& v : report.versions) {
    const double d = v.report.rmse - report.mean_rmse;
    sq += d * d;
  }
  report.std_rmse = k > 1 ? std::sqrt(sq / static_cast<double>(k - 1)) : 0.0;
  return report;
}

inline nlohmann::json versions_report_to_json(const VersionsReport& report) {
  nlohmann::json versions = nlohmann::json::object();
  for (const auto& v : report.versions) {
    versions[std::to_string(v.version)] = nlohmann::json{
        {"rmse", v.report.rmse},
        {"per_layer_rmse", v.report.per_layer_rmse},
        {"best_epoch", v.run.best_epoch},
        {"best_val_loss", v.run.best_val_loss}};
  }
  return nlohmann::json{
      {"versions", std::move(versions)}, {"mean", report.mean_rmse}, {"std", report.std_rmse}};
}

// ---------------------------------------------------------------------------
// full-model gradient check
// ---------------------------------------------------------------------------

/// Finite-difference check of the entire network at a tiny scale: mse loss of
/// a forward pass, differentiated with respect to every parameter element.
/// Runs in evaluation mode so the check is a pure function of the leaves.
inline gradcheck::CheckResult full_model_gradcheck(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.p = 2;
  cfg.q = 3;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.num_groups = 1;
  cfg.decoder_dims = {16, 12, 8};  // small decoder keeps the sweep fast
  cfg.dropout_rate = 0.0;
  const std::size_t n = 8;

  Rng rng(seed);
  ModelParams params = ModelParams::init(cfg, &rng);
  std::vector<Tensor> inputs;
  for (std::size_t k = 0; k < cfg.p; ++k)
    inputs.push_back(Tensor::uniform({n, cfg.in_features}, rng, -1.0, 1.0, false));
  LayerGraph dummy;
  dummy.num_nodes = n;
  dummy.edge_weight = std::make_shared<std::vector<double>>(n * n, 0.0);
  Tensor agg = aggregation_matrix(dummy, Aggregation::Uniform);
  Tensor target = Tensor::uniform({n, cfg.q}, rng, -1.0, 1.0, false);

  std::vector<Tensor> leaves;
  for (const auto& [name, t] : params.registry.entries()) leaves.push_back(t);
  Rng unused(0);
  // The 0.01 factor keeps the finite-difference roundoff of a unit-scale loss
  // below the 1e-8 denominator floor of the relative-error metric.
  const double err = gradcheck::max_rel_error(leaves, [&] {
    Tensor pred = stgrit_forward(inputs, agg, params, /*training=*/false, unused);
    return mul_scalar(mse_loss(pred, target), 0.01);
  });
  return {"full_model", err};
}

}  // namespace stgrit
