#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stgrit/dataset.hpp"
#include "stgrit/geo.hpp"
#include "stgrit/ops.hpp"

namespace stgrit {

/// Neighbor aggregation for the GraphSAGE encoders. Uniform takes the plain
/// arithmetic mean over all other nodes; Weighted normalizes the
/// inverse-distance edge weights per row.
enum class Aggregation { Uniform, Weighted };

inline Aggregation aggregation_from_string(const std::string& s) {
  if (s == "uniform") return Aggregation::Uniform;
  if (s == "weighted") return Aggregation::Weighted;
  throw ConfigError("unknown aggregation '" + s + "' (expected uniform or weighted)");
}

inline std::string to_string(Aggregation a) {
  return a == Aggregation::Uniform ? "uniform" : "weighted";
}

struct ModelConfig {
  std::size_t p = 5;               // input layers, one GraphSAGE encoder each
  std::size_t q = 15;              // predicted layers
  std::size_t in_features = 3;     // latitude, longitude, thickness
  std::size_t embed_dim = 32;
  std::size_t num_heads = 8;
  std::size_t num_groups = 2;      // temporal+spatial attention block pairs
  std::size_t ff_multiplier = 4;
  double dropout_rate = 0.1;
  std::array<std::size_t, 3> decoder_dims{128, 64, 32};
  Aggregation aggregation = Aggregation::Uniform;
  double layer_norm_eps = 1e-8;

  std::size_t head_dim() const { return embed_dim / num_heads; }

  void validate() const {
    if (p < 1 || q < 1) throw ConfigError("ModelConfig: p and q must be >= 1");
    if (num_groups < 1) throw ConfigError("ModelConfig: num_groups must be >= 1");
    if (num_heads < 1) throw ConfigError("ModelConfig: num_heads must be >= 1");
    if (in_features < 1) throw ConfigError("ModelConfig: in_features must be >= 1");
    if (embed_dim == 0 || embed_dim % num_heads != 0)
      throw ConfigError("ModelConfig: embed_dim must be a positive multiple of num_heads");
    if (ff_multiplier < 1) throw ConfigError("ModelConfig: ff_multiplier must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw ConfigError("ModelConfig: dropout_rate must lie in [0, 1)");
    for (std::size_t d : decoder_dims)
      if (d == 0) throw ConfigError("ModelConfig: decoder dims must be positive");
    if (layer_norm_eps <= 0.0) throw ConfigError("ModelConfig: layer_norm_eps must be positive");
  }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"p", c.p},
                        {"q", c.q},
                        {"in_features", c.in_features},
                        {"embed_dim", c.embed_dim},
                        {"num_heads", c.num_heads},
                        {"num_groups", c.num_groups},
                        {"ff_multiplier", c.ff_multiplier},
                        {"dropout_rate", c.dropout_rate},
                        {"decoder_dims", c.decoder_dims},
                        {"aggregation", to_string(c.aggregation)},
                        {"layer_norm_eps", c.layer_norm_eps}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  static const std::unordered_set<std::string> known{
      "p",          "q",           "in_features",  "embed_dim",    "num_heads", "num_groups",
      "ff_multiplier", "dropout_rate", "decoder_dims", "aggregation", "layer_norm_eps"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("model config: unknown key '" + it.key() + "'");
  }
  ModelConfig c;
  if (j.contains("p")) c.p = j.at("p").get<std::size_t>();
  if (j.contains("q")) c.q = j.at("q").get<std::size_t>();
  if (j.contains("in_features")) c.in_features = j.at("in_features").get<std::size_t>();
  if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim").get<std::size_t>();
  if (j.contains("num_heads")) c.num_heads = j.at("num_heads").get<std::size_t>();
  if (j.contains("num_groups")) c.num_groups = j.at("num_groups").get<std::size_t>();
  if (j.contains("ff_multiplier")) c.ff_multiplier = j.at("ff_multiplier").get<std::size_t>();
  if (j.contains("dropout_rate")) c.dropout_rate = j.at("dropout_rate").get<double>();
  if (j.contains("decoder_dims")) {
    auto dims = j.at("decoder_dims").get<std::vector<std::size_t>>();
    if (dims.size() != 3) throw ConfigError("model config: decoder_dims must have 3 entries");
    std::copy(dims.begin(), dims.end(), c.decoder_dims.begin());
  }
  if (j.contains("aggregation"))
    c.aggregation = aggregation_from_string(j.at("aggregation").get<std::string>());
  if (j.contains("layer_norm_eps")) c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
  c.validate();
  return c;
}

/// Ordered, uniquely named collection of every learnable tensor. Optimizers
/// and checkpoints traverse parameters exclusively through this registry.
class ParamRegistry {
public:
  Tensor add(std::string name, Tensor t) {
    if (!names_.insert(name).second)
      throw ContractError("ParamRegistry: duplicate parameter '" + name + "'");
    entries_.emplace_back(std::move(name), t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& mutable_entries() { return entries_; }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_set<std::string> names_;
};

struct GraphSageParams {
  Tensor w_self, w_neigh, bias;
};

struct AttentionBlockParams {
  std::vector<Tensor> wq, wk, wv;  // one d × d_k matrix per head
  Tensor wo;                       // d × d
  Tensor ln1_gamma, ln1_beta;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
  Tensor ln2_gamma, ln2_beta;
};

struct DecoderLayerParams {
  Tensor w, b;
};

/// All learnable state. Move-only: a plain copy would alias the underlying
/// buffers; use clone() for an independent deep copy.
struct ModelParams {
  ModelConfig config;
  ParamRegistry registry;
  std::vector<GraphSageParams> sage;  // p encoders
  struct Group {
    AttentionBlockParams temporal, spatial;
  };
  std::vector<Group> groups;                 // num_groups
  std::vector<DecoderLayerParams> decoder;   // 4 linear layers

  ModelParams() = default;
  ModelParams(const ModelParams&) = delete;
  ModelParams& operator=(const ModelParams&) = delete;
  ModelParams(ModelParams&&) = default;
  ModelParams& operator=(ModelParams&&) = default;

  /// Builds the full parameter set. With an rng, weights are drawn uniformly
  /// from ±1/sqrt(fan_in) and biases start at zero; without one everything
  /// starts at zero (checkpoint loading overwrites values afterwards).
  static ModelParams init(const ModelConfig& cfg, Rng* rng) {
    cfg.validate();
    ModelParams mp;
    mp.config = cfg;
    const std::size_t d = cfg.embed_dim;
    const std::size_t dk = cfg.head_dim();
    const std::size_t ff = cfg.ff_multiplier * d;

    auto weight = [&](const std::string& name, std::size_t fan_in, std::size_t fan_out) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      Tensor t = rng ? Tensor::uniform({fan_in, fan_out}, *rng, -bound, bound, true)
                     : Tensor::zeros({fan_in, fan_out}, true);
      return mp.registry.add(name, t);
    };
    auto vec = [&](const std::string& name, std::size_t len, double fill) {
      return mp.registry.add(name, Tensor::full({len}, fill, true));
    };

    for (std::size_t k = 0; k < cfg.p; ++k) {
      const std::string prefix = "sage." + std::to_string(k) + ".";
      GraphSageParams gp;
      gp.w_self = weight(prefix + "w_self", cfg.in_features, d);
      gp.w_neigh = weight(prefix + "w_neigh", cfg.in_features, d);
      gp.bias = vec(prefix + "bias", d, 0.0);
      mp.sage.push_back(std::move(gp));
    }

    auto make_block = [&](const std::string& prefix) {
      AttentionBlockParams bp;
      for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        const std::string hp = prefix + "attn.head" + std::to_string(h) + ".";
        bp.wq.push_back(weight(hp + "wq", d, dk));
        bp.wk.push_back(weight(hp + "wk", d, dk));
        bp.wv.push_back(weight(hp + "wv", d, dk));
      }
      bp.wo = weight(prefix + "attn.wo", d, d);
      bp.ln1_gamma = vec(prefix + "ln1.gamma", d, 1.0);
      bp.ln1_beta = vec(prefix + "ln1.beta", d, 0.0);
      bp.ff_w1 = weight(prefix + "ff.w1", d, ff);
      bp.ff_b1 = vec(prefix + "ff.b1", ff, 0.0);
      bp.ff_w2 = weight(prefix + "ff.w2", ff, d);
      bp.ff_b2 = vec(prefix + "ff.b2", d, 0.0);
      bp.ln2_gamma = vec(prefix + "ln2.gamma", d, 1.0);
      bp.ln2_beta = vec(prefix + "ln2.beta", d, 0.0);
      return bp;
    };

    for (std::size_t g = 0; g < cfg.num_groups; ++g) {
      const std::string prefix = "group." + std::to_string(g) + ".";
      Group grp;
      grp.temporal = make_block(prefix + "temporal.");
      grp.spatial = make_block(prefix + "spatial.");
      mp.groups.push_back(std::move(grp));
    }

    std::array<std::size_t, 5> widths{cfg.p * d, cfg.decoder_dims[0], cfg.decoder_dims[1],
                                      cfg.decoder_dims[2], cfg.q};
    for (std::size_t l = 0; l < 4; ++l) {
      const std::string prefix = "decoder." + std::to_string(l) + ".";
      DecoderLayerParams dp;
      dp.w = weight(prefix + "w", widths[l], widths[l + 1]);
      dp.b = vec(prefix + "b", widths[l + 1], 0.0);
      mp.decoder.push_back(std::move(dp));
    }
    return mp;
  }

  ModelParams clone() const {
    ModelParams copy = init(config, nullptr);
    const auto& src = registry.entries();
    auto& dst = copy.registry.mutable_entries();
    for (std::size_t i = 0; i < src.size(); ++i)
      dst[i].second.mutable_value() = src[i].second.value();
    return copy;
  }
};

/// Closed-form parameter count for a configuration; the registry built by
/// ModelParams::init must match it exactly.
inline std::size_t parameter_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.embed_dim;
  const std::size_t dk = cfg.head_dim();
  const std::size_t ff = cfg.ff_multiplier * d;
  const std::size_t sage = cfg.p * (2 * cfg.in_features * d + d);
  const std::size_t block = cfg.num_heads * 3 * d * dk + d * d + 2 * d  // attention + ln1
                            + d * ff + ff + ff * d + d                  // feedforward
                            + 2 * d;                                    // ln2
  const std::size_t attn = cfg.num_groups * 2 * block;
  std::size_t dec = 0;
  std::array<std::size_t, 5> widths{cfg.p * d, cfg.decoder_dims[0], cfg.decoder_dims[1],
                                    cfg.decoder_dims[2], cfg.q};
  for (std::size_t l = 0; l < 4; ++l) dec += widths[l] * widths[l + 1] + widths[l + 1];
  return sage + attn + dec;
}

// ---------------------------------------------------------------------------
// forward pass
// ---------------------------------------------------------------------------

/// Constant N×N neighbor-averaging matrix for one graph. Uniform mode places
/// 1/(N-1) on every off-diagonal entry; weighted mode row-normalizes the
/// graph's edge weights and falls back to the uniform row when a row sums to
/// zero. The diagonal is zero: a node's own features enter through w_self.
inline Tensor aggregation_matrix(const LayerGraph& graph, Aggregation mode) {
  const std::size_t n = graph.num_nodes;
  if (n < 2) throw ValidationError("aggregation_matrix: need at least 2 nodes");
  std::vector<double> a(n * n, 0.0);
  if (mode == Aggregation::Uniform) {
    const double v = 1.0 / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) a[i * n + j] = v;
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      double row_sum = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) row_sum += graph.weight_at(i, j);
      if (row_sum > 0.0) {
        for (std::size_t j = 0; j < n; ++j)
          if (i != j) a[i * n + j] = graph.weight_at(i, j) / row_sum;
      } else {
        const double v = 1.0 / static_cast<double>(n - 1);
        for (std::size_t j = 0; j < n; ++j)
          if (i != j) a[i * n + j] = v;
      }
    }
  }
  return Tensor({n, n}, std::move(a));
}

/// x'_i = W_self x_i + W_neigh · agg_j x_j + bias, for all nodes at once.
inline Tensor graphsage_forward(const Tensor& x, const Tensor& agg, const GraphSageParams& p) {
  if (x.ndim() != 2) throw ShapeError("graphsage_forward: node features must be 2-D");
  const std::size_t n = x.extent(0);
  if (n < 2) throw ShapeError("graphsage_forward: need at least 2 nodes");
  if (agg.ndim() != 2 || agg.extent(0) != n || agg.extent(1) != n)
    throw ShapeError("graphsage_forward: aggregation matrix must be " + std::to_string(n) + "x" +
                     std::to_string(n));
  Tensor self_part = matmul(x, p.w_self);
  Tensor neigh_part = matmul(matmul(agg, x), p.w_neigh);
  return add_rowvec(add(self_part, neigh_part), p.bias);
}

/// Scaled dot-product multi-head self-attention. Accepts L×d or batched
/// B×L×d input; every batch row attends only within itself. Per head:
/// softmax(Q Kᵀ / sqrt(d_k)) V, heads concatenated and projected by wo.
/// When attn_out is given, each head's B×L×L attention matrix is appended.
inline Tensor multi_head_attention(const Tensor& x, const AttentionBlockParams& p,
                                   std::size_t num_heads,
                                   std::vector<Tensor>* attn_out = nullptr) {
  const bool batched = x.ndim() == 3;
  if (!batched && x.ndim() != 2)
    throw ShapeError("multi_head_attention: input must be 2-D or 3-D");
  const std::size_t b = batched ? x.extent(0) : 1;
  const std::size_t l = batched ? x.extent(1) : x.extent(0);
  const std::size_t d = batched ? x.extent(2) : x.extent(1);
  if (p.wq.size() != num_heads)
    throw ShapeError("multi_head_attention: head count mismatch");
  if (d % num_heads != 0)
    throw ShapeError("multi_head_attention: embed dim not divisible by heads");
  const std::size_t dk = d / num_heads;
  if (p.wq[0].extent(0) != d || p.wq[0].extent(1) != dk)
    throw ShapeError("multi_head_attention: projection shape mismatch");

  Tensor x2 = reshape(x, {b * l, d});
  // scaling the query projection instead of the L×L score matrix applies
  // the same 1/sqrt(d_k) factor to a tensor that is l/d_k times smaller
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Tensor x2_scaled = mul_scalar(x2, scale);
  std::vector<Tensor> heads;
  heads.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    Tensor q = reshape(matmul(x2_scaled, p.wq[h]), {b, l, dk});
    Tensor k = reshape(matmul(x2, p.wk[h]), {b, l, dk});
    Tensor v = reshape(matmul(x2, p.wv[h]), {b, l, dk});
    Tensor scores = bmm(q, transpose(k, {0, 2, 1}));
    Tensor attn = softmax(scores, 2);
    if (attn_out) attn_out->push_back(attn);
    heads.push_back(bmm(attn, v));
  }
  Tensor cat = concat(heads, 2);  // B×L×d
  Tensor out = reshape(matmul(reshape(cat, {b * l, d}), p.wo), {b, l, d});
  return batched ? out : reshape(out, {l, d});
}

/// Post-norm transformer encoder layer:
///   h   = LayerNorm(x + Dropout(MHA(x)))
///   out = LayerNorm(h + Dropout(FF(h))),  FF = relu-MLP d -> ff -> d.
/// Whether this block acts along the temporal or the spatial axis is decided
/// entirely by how the caller arranged the L axis of the input.
inline Tensor attention_block(const Tensor& x, const AttentionBlockParams& p,
                              const ModelConfig& cfg, bool training, Rng& rng) {
  Tensor mha = multi_head_attention(x, p, cfg.num_heads);
  Tensor h = layer_norm(add(x, dropout(mha, cfg.dropout_rate, rng, training)), p.ln1_gamma,
                        p.ln1_beta, cfg.layer_norm_eps);
  const std::size_t d = h.shape().back();
  const std::size_t rows = h.size() / d;
  Tensor h2 = reshape(h, {rows, d});
  Tensor ff = add_rowvec(matmul(relu(add_rowvec(matmul(h2, p.ff_w1), p.ff_b1)), p.ff_w2), p.ff_b2);
  Tensor ff_out = reshape(ff, h.shape());
  return layer_norm(add(h, dropout(ff_out, cfg.dropout_rate, rng, training)), p.ln2_gamma,
                    p.ln2_beta, cfg.layer_norm_eps);
}

/// Full network: p GraphSAGE encoders -> N×p×d embedding stack -> num_groups
/// of (temporal block, spatial block), each wrapped in an extra residual ->
/// per-node flatten -> 4-layer decoder. Returns N×q predictions.
///
/// `inputs` holds p node-feature matrices (N × in_features); `agg` is the
/// shared aggregation matrix (the p graphs of a sequence share coordinates).
inline Tensor stgrit_forward(const std::vector<Tensor>& inputs, const Tensor& agg,
                             const ModelParams& params, bool training, Rng& rng) {
  const ModelConfig& cfg = params.config;
  if (inputs.size() != cfg.p)
    throw ShapeError("stgrit_forward: expected " + std::to_string(cfg.p) + " input graphs, got " +
                     std::to_string(inputs.size()));
  const std::size_t n = inputs[0].extent(0);
  for (const Tensor& t : inputs) {
    if (t.ndim() != 2 || t.extent(0) != n || t.extent(1) != cfg.in_features)
      throw ShapeError("stgrit_forward: every input must be " + std::to_string(n) + "x" +
                       std::to_string(cfg.in_features));
  }

  std::vector<Tensor> embeds;
  embeds.reserve(cfg.p);
  for (std::size_t k = 0; k < cfg.p; ++k) {
    Tensor e = graphsage_forward(inputs[k], agg, params.sage[k]);
    embeds.push_back(reshape(e, {n, 1, cfg.embed_dim}));
  }
  Tensor e = concat(embeds, 1);  // N×p×d, one row of timesteps per node

  for (const ModelParams::Group& group : params.groups) {
    // temporal: each node attends over its own p timesteps
    Tensor t_out = attention_block(e, group.temporal, cfg, training, rng);
    e = add(t_out, e);
    // spatial: each timestep attends over the N nodes
    Tensor s_in = transpose(e, {1, 0, 2});
    Tensor s_out = attention_block(s_in, group.spatial, cfg, training, rng);
    e = transpose(add(s_out, s_in), {1, 0, 2});
  }

  Tensor h = reshape(e, {n, cfg.p * cfg.embed_dim});
  for (std::size_t l = 0; l < params.decoder.size(); ++l) {
    h = add_rowvec(matmul(h, params.decoder[l].w), params.decoder[l].b);
    if (l + 1 < params.decoder.size()) h = relu(h);
  }
  return h;  // N×q
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------
// Layout: 8-byte magic "STGRIT01", little-endian u64 header length, JSON
// header (model config, parameter names/shapes in registry order, training
// metadata), then the flat little-endian f64 parameter payload.

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::size_t split_version = 0;
  std::size_t epoch = 0;    // epoch of the best validation loss
  double val_loss = 0.0;
  bool normalize = true;
  NormStats stats;
  std::string scheduler = "plateau";
};

namespace detail {

inline constexpr char kCheckpointMagic[9] = "STGRIT01";

inline void write_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

inline std::uint64_t read_u64_le(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

inline nlohmann::json meta_to_json(const CheckpointMeta& m) {
  return nlohmann::json{{"seed", m.seed},           {"split_version", m.split_version},
                        {"epoch", m.epoch},         {"val_loss", m.val_loss},
                        {"normalize", m.normalize}, {"stats", norm_stats_to_json(m.stats)},
                        {"scheduler", m.scheduler}};
}

inline CheckpointMeta meta_from_json(const nlohmann::json& j) {
  CheckpointMeta m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.split_version = j.at("split_version").get<std::size_t>();
  m.epoch = j.at("epoch").get<std::size_t>();
  m.val_loss = j.at("val_loss").get<double>();
  m.normalize = j.at("normalize").get<bool>();
  m.stats = norm_stats_from_json(j.at("stats"));
  m.scheduler = j.at("scheduler").get<std::string>();
  return m;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const CheckpointMeta& meta) {
  nlohmann::json header;
  header["format"] = 1;
  header["model"] = model_config_to_json(params.config);
  header["meta"] = detail::meta_to_json(meta);
  nlohmann::json plist = nlohmann::json::array();
  for (const auto& [name, t] : params.registry.entries())
    plist.push_back(nlohmann::json{{"name", name}, {"shape", t.shape()}});
  header["params"] = std::move(plist);
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("save_checkpoint: cannot open '" + path + "'");
  out.write(detail::kCheckpointMagic, 8);
  detail::write_u64_le(out, header_str.size());
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  static_assert(sizeof(double) == 8);
  for (const auto& [name, t] : params.registry.entries()) {
    const auto& v = t.value();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw ParseError("save_checkpoint: write to '" + path + "' failed");
}

struct LoadedCheckpoint {
  ModelParams params;
  CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("load_checkpoint: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
    throw ParseError("load_checkpoint: '" + path + "' is not a checkpoint file");
  const std::uint64_t header_len = detail::read_u64_le(in);
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ParseError("load_checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_checkpoint: bad header: " + std::string(e.what()));
  }

  LoadedCheckpoint ck;
  ck.params = ModelParams::init(model_config_from_json(header.at("model")), nullptr);
  ck.meta = detail::meta_from_json(header.at("meta"));
  const auto& plist = header.at("params");
  const auto& entries = ck.params.registry.entries();
  if (plist.size() != entries.size())
    throw ParseError("load_checkpoint: parameter list does not match the model config");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (plist[i].at("name").get<std::string>() != entries[i].first ||
        plist[i].at("shape").get<Shape>() != entries[i].second.shape())
      throw ParseError("load_checkpoint: parameter mismatch at '" + entries[i].first + "'");
  }
  for (auto& [name, t] : ck.params.registry.mutable_entries()) {
    auto& v = t.mutable_value();
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw ParseError("load_checkpoint: truncated payload at '" + name + "'");
    check_finite("load_checkpoint", v);
  }
  in.peek();
  if (!in.eof()) throw ParseError("load_checkpoint: trailing bytes after payload");
  return ck;
}

}  // namespace stgrit
