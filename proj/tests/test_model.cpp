#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "stgrit/model.hpp"
#include "stgrit/training.hpp"

using namespace stgrit;

namespace {

Tensor eye(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(v), true);
}

LayerGraph graph_with_weights(std::size_t n, std::vector<double> w) {
  LayerGraph g;
  g.num_nodes = n;
  g.edge_weight = std::make_shared<std::vector<double>>(std::move(w));
  return g;
}

Tensor uniform_agg(std::size_t n) {
  return aggregation_matrix(graph_with_weights(n, std::vector<double>(n * n, 0.0)),
                            Aggregation::Uniform);
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.p = 2;
  cfg.q = 3;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.num_groups = 1;
  cfg.decoder_dims = {16, 12, 8};
  cfg.dropout_rate = 0.0;
  return cfg;
}

}  // namespace

TEST(GraphSage, IdentityWeightsPassFeaturesThrough) {
  GraphSageParams p;
  p.w_self = eye(3);
  p.w_neigh = Tensor::zeros({3, 3}, true);
  p.bias = Tensor::zeros({3}, true);
  Rng rng(1);
  Tensor x = Tensor::uniform({4, 3}, rng, -1.0, 1.0);
  Tensor out = graphsage_forward(x, uniform_agg(4), p);
  EXPECT_EQ(out.value(), x.value());
}

TEST(GraphSage, UniformMeanExcludesSelf) {
  GraphSageParams p;
  p.w_self = Tensor::zeros({1, 1}, true);
  p.w_neigh = Tensor({1, 1}, {1.0}, true);
  p.bias = Tensor::zeros({1}, true);
  Tensor x({3, 1}, {1.0, 2.0, 3.0});
  Tensor out = graphsage_forward(x, uniform_agg(3), p);
  EXPECT_DOUBLE_EQ(out.at({0, 0}), 2.5);  // mean(2, 3)
  EXPECT_DOUBLE_EQ(out.at({1, 0}), 2.0);  // mean(1, 3)
  EXPECT_DOUBLE_EQ(out.at({2, 0}), 1.5);  // mean(1, 2)
}

TEST(GraphSage, EqualWeightsMatchUniformExactly) {
  LayerGraph g = graph_with_weights(3, {0, 7, 7, 7, 0, 7, 7, 7, 0});
  Tensor weighted = aggregation_matrix(g, Aggregation::Weighted);
  Tensor uniform = uniform_agg(3);
  EXPECT_EQ(weighted.value(), uniform.value());

  GraphSageParams p;
  Rng rng(3);
  p.w_self = Tensor::uniform({2, 2}, rng, -1.0, 1.0, true);
  p.w_neigh = Tensor::uniform({2, 2}, rng, -1.0, 1.0, true);
  p.bias = Tensor::uniform({2}, rng, -0.1, 0.1, true);
  Tensor x = Tensor::uniform({3, 2}, rng, -1.0, 1.0);
  EXPECT_EQ(graphsage_forward(x, weighted, p).value(), graphsage_forward(x, uniform, p).value());
}

TEST(GraphSage, ZeroWeightRowFallsBackToUniform) {
  // node 0 disconnected: its aggregation row becomes the uniform mean
  LayerGraph g = graph_with_weights(3, {0, 0, 0, 0, 0, 4, 0, 4, 0});
  Tensor agg = aggregation_matrix(g, Aggregation::Weighted);
  EXPECT_DOUBLE_EQ(agg.at({0, 1}), 0.5);
  EXPECT_DOUBLE_EQ(agg.at({0, 2}), 0.5);
  EXPECT_DOUBLE_EQ(agg.at({1, 0}), 0.0);
  EXPECT_DOUBLE_EQ(agg.at({1, 2}), 1.0);
}

TEST(MultiHeadAttention, SingleTokenIsPureLinearMap) {
  // L=1: softmax over one key is 1, so out = x Wv Wo
  Rng rng(9);
  const std::size_t d = 4;
  AttentionBlockParams p;
  p.wq = {Tensor::uniform({d, d}, rng, -1.0, 1.0, true)};
  p.wk = {Tensor::uniform({d, d}, rng, -1.0, 1.0, true)};
  p.wv = {Tensor::uniform({d, d}, rng, -1.0, 1.0, true)};
  p.wo = Tensor::uniform({d, d}, rng, -1.0, 1.0, true);
  Tensor x = Tensor::uniform({1, d}, rng, -1.0, 1.0);
  Tensor out = multi_head_attention(x, p, 1);
  Tensor expected = matmul(matmul(x, p.wv[0]), p.wo);
  ASSERT_EQ(out.shape(), (Shape{1, d}));
  for (std::size_t j = 0; j < d; ++j)
    EXPECT_NEAR(out.at({0, j}), expected.at({0, j}), 1e-12);
}

TEST(MultiHeadAttention, AttentionRowsSumToOne) {
  Rng rng(15);
  const std::size_t d = 8, heads = 2, dk = 4;
  AttentionBlockParams p;
  for (std::size_t h = 0; h < heads; ++h) {
    p.wq.push_back(Tensor::uniform({d, dk}, rng, -1.0, 1.0, true));
    p.wk.push_back(Tensor::uniform({d, dk}, rng, -1.0, 1.0, true));
    p.wv.push_back(Tensor::uniform({d, dk}, rng, -1.0, 1.0, true));
  }
  p.wo = Tensor::uniform({d, d}, rng, -1.0, 1.0, true);
  Tensor x = Tensor::uniform({3, 5, d}, rng, -2.0, 2.0);
  std::vector<Tensor> attn;
  multi_head_attention(x, p, heads, &attn);
  ASSERT_EQ(attn.size(), heads);
  for (const Tensor& a : attn) {
    ASSERT_EQ(a.shape(), (Shape{3, 5, 5}));
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < 5; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 5; ++j) sum += a.at({b, i, j});
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
  }
}

TEST(MultiHeadAttention, MatchesHandComputedFixture) {
  // single head, d = d_k = 2, L = 2; expected values computed independently
  // with 50-digit arithmetic from the scaled-dot-product definition
  AttentionBlockParams p;
  p.wq = {Tensor({2, 2}, {0.5, -0.25, 0.1, 0.3}, true)};
  p.wk = {Tensor({2, 2}, {-0.2, 0.4, 0.35, 0.15}, true)};
  p.wv = {Tensor({2, 2}, {0.6, -0.1, 0.2, 0.25}, true)};
  p.wo = Tensor({2, 2}, {1.0, 0.5, -0.3, 0.8}, true);
  Tensor x({2, 2}, {1.0, 2.0, -1.0, 0.5});
  Tensor out = multi_head_attention(x, p, 1);
  const double expected[2][2] = {{0.269500220339565147, 0.444632259828817258},
                                 {0.246300015892132001, 0.430367539995853182}};
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(out.at({i, j}), expected[i][j], 1e-12);
}

TEST(AttentionBlock, TemporalLocalityIsBitwise) {
  // batch axis = nodes: the block output for node i must not change when any
  // other node's input slice is perturbed
  ModelConfig cfg = tiny_config();
  Rng rng(21);
  ModelParams params = ModelParams::init(cfg, &rng);
  const std::size_t n = 6, l = 3, d = cfg.embed_dim;
  Tensor x = Tensor::uniform({n, l, d}, rng, -1.0, 1.0);
  Rng unused(0);
  Tensor base = attention_block(x, params.groups[0].temporal, cfg, false, unused);

  std::vector<double> perturbed = x.value();
  for (std::size_t i = 0; i < l * d; ++i) perturbed[2 * l * d + i] += 0.5;  // node 2
  Tensor x2({n, l, d}, std::move(perturbed));
  Tensor out2 = attention_block(x2, params.groups[0].temporal, cfg, false, unused);

  for (std::size_t node = 0; node < n; ++node) {
    if (node == 2) continue;
    for (std::size_t i = 0; i < l * d; ++i) {
      EXPECT_EQ(base.value()[node * l * d + i], out2.value()[node * l * d + i])
          << "node " << node << " changed";
    }
  }
}

TEST(AttentionBlock, SpatialLocalityIsBitwise) {
  // batch axis = timesteps: perturbing timestep 1 leaves other timesteps
  // bitwise unchanged
  ModelConfig cfg = tiny_config();
  Rng rng(23);
  ModelParams params = ModelParams::init(cfg, &rng);
  const std::size_t t = 4, n = 5, d = cfg.embed_dim;
  Tensor x = Tensor::uniform({t, n, d}, rng, -1.0, 1.0);
  Rng unused(0);
  Tensor base = attention_block(x, params.groups[0].spatial, cfg, false, unused);

  std::vector<double> perturbed = x.value();
  for (std::size_t i = 0; i < n * d; ++i) perturbed[1 * n * d + i] -= 0.25;  // timestep 1
  Tensor x2({t, n, d}, std::move(perturbed));
  Tensor out2 = attention_block(x2, params.groups[0].spatial, cfg, false, unused);

  for (std::size_t step = 0; step < t; ++step) {
    if (step == 1) continue;
    for (std::size_t i = 0; i < n * d; ++i)
      EXPECT_EQ(base.value()[step * n * d + i], out2.value()[step * n * d + i]);
  }
}

namespace {

std::vector<Tensor> random_inputs(std::size_t p, std::size_t n, std::size_t f, Rng& rng) {
  std::vector<Tensor> inputs;
  for (std::size_t k = 0; k < p; ++k)
    inputs.push_back(Tensor::uniform({n, f}, rng, -1.0, 1.0, false));
  return inputs;
}

}  // namespace

TEST(StGritForward, OutputShapeFollowsConfig) {
  ModelConfig cfg;
  cfg.p = 5;
  cfg.q = 15;
  cfg.embed_dim = 16;
  cfg.num_heads = 4;
  cfg.num_groups = 2;
  cfg.decoder_dims = {32, 24, 16};
  Rng rng(33);
  ModelParams params = ModelParams::init(cfg, &rng);
  const std::size_t n = 16;
  auto inputs = random_inputs(cfg.p, n, cfg.in_features, rng);
  Rng unused(0);
  Tensor out = stgrit_forward(inputs, uniform_agg(n), params, false, unused);
  EXPECT_EQ(out.shape(), (Shape{n, cfg.q}));
}

TEST(StGritForward, EvalModeIsDeterministic) {
  ModelConfig cfg = tiny_config();
  cfg.dropout_rate = 0.2;  // must not matter in eval mode
  Rng rng(35);
  ModelParams params = ModelParams::init(cfg, &rng);
  const std::size_t n = 7;
  auto inputs = random_inputs(cfg.p, n, cfg.in_features, rng);
  Tensor agg = uniform_agg(n);
  Rng r1(1), r2(2);  // different rngs: eval must not consume them
  Tensor a = stgrit_forward(inputs, agg, params, false, r1);
  Tensor b = stgrit_forward(inputs, agg, params, false, r2);
  EXPECT_EQ(a.value(), b.value());
}

TEST(StGritForward, PermutationEquivariantOverNodes) {
  ModelConfig cfg = tiny_config();
  Rng rng(37);
  ModelParams params = ModelParams::init(cfg, &rng);
  const std::size_t n = 10;

  // graph from a synthetic flight line so weighted aggregation is realistic
  std::vector<double> lat(n), lon(n), thick(n);
  for (std::size_t i = 0; i < n; ++i) {
    lat[i] = 70.0 + 0.01 * static_cast<double>(i);
    lon[i] = -45.0 + rng.uniform(0.0, 0.02);
    thick[i] = rng.uniform(5.0, 20.0);
  }

  for (Aggregation mode : {Aggregation::Uniform, Aggregation::Weighted}) {
    cfg.aggregation = mode;
    LayerGraph g = build_layer_graph(lat, lon, thick);
    Tensor agg = aggregation_matrix(g, mode);
    auto inputs = random_inputs(cfg.p, n, cfg.in_features, rng);
    Rng unused(0);
    Tensor base = stgrit_forward(inputs, agg, params, false, unused);

    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng perm_rng(101);
    perm_rng.shuffle(perm);

    std::vector<double> plat(n), plon(n), pthick(n);
    for (std::size_t i = 0; i < n; ++i) {
      plat[i] = lat[perm[i]];
      plon[i] = lon[perm[i]];
      pthick[i] = thick[perm[i]];
    }
    LayerGraph pg = build_layer_graph(plat, plon, pthick);
    Tensor pagg = aggregation_matrix(pg, mode);
    std::vector<Tensor> pinputs;
    for (std::size_t k = 0; k < cfg.p; ++k) {
      std::vector<double> f(n * cfg.in_features);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < cfg.in_features; ++c)
          f[i * cfg.in_features + c] = inputs[k].at({perm[i], c});
      pinputs.emplace_back(Shape{n, cfg.in_features}, std::move(f));
    }
    Tensor permuted = stgrit_forward(pinputs, pagg, params, false, unused);

    double max_dev = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < cfg.q; ++j)
        max_dev = std::max(max_dev,
                           std::fabs(permuted.at({i, j}) - base.at({perm[i], j})));
    EXPECT_LT(max_dev, 1e-9) << "aggregation mode " << to_string(mode);
  }
}

TEST(ModelParams, RegistryMatchesClosedFormCount) {
  for (ModelConfig cfg : {ModelConfig{}, tiny_config()}) {
    Rng rng(41);
    ModelParams params = ModelParams::init(cfg, &rng);
    EXPECT_EQ(params.registry.total_size(), parameter_count(cfg));
  }
}

TEST(ModelParams, AddingAGroupAddsExactlyOneGroupOfParameters) {
  ModelConfig one = tiny_config();
  ModelConfig two = tiny_config();
  two.num_groups = 2;
  Rng r1(43), r2(43);
  ModelParams p1 = ModelParams::init(one, &r1);
  ModelParams p2 = ModelParams::init(two, &r2);
  std::size_t group1_params = 0;
  for (const auto& [name, t] : p2.registry.entries())
    if (name.rfind("group.1.", 0) == 0) group1_params += t.size();
  EXPECT_GT(group1_params, 0u);
  EXPECT_EQ(p2.registry.total_size() - p1.registry.total_size(), group1_params);
  EXPECT_EQ(parameter_count(two) - parameter_count(one), group1_params);
}

TEST(ModelParams, StructuralCountsAtDefaults) {
  ModelConfig cfg;  // p=5, q=15, 2 groups
  Rng rng(47);
  ModelParams params = ModelParams::init(cfg, &rng);
  std::set<std::string> sage_sets, blocks, decoder_layers;
  for (const auto& [name, t] : params.registry.entries()) {
    if (name.rfind("sage.", 0) == 0) sage_sets.insert(name.substr(0, name.find('.', 5)));
    if (name.rfind("group.", 0) == 0) {
      const auto second = name.find('.', 6);
      blocks.insert(name.substr(0, name.find('.', second + 1)));
    }
    if (name.rfind("decoder.", 0) == 0) decoder_layers.insert(name.substr(0, name.find('.', 8)));
  }
  EXPECT_EQ(sage_sets.size(), 5u);
  EXPECT_EQ(blocks.size(), 4u);  // 2 groups x (temporal + spatial)
  EXPECT_EQ(decoder_layers.size(), 4u);
}

TEST(ModelParams, DuplicateRegistrationRejected) {
  ParamRegistry reg;
  reg.add("w", Tensor::zeros({2, 2}, true));
  EXPECT_THROW(reg.add("w", Tensor::zeros({2, 2}, true)), ContractError);
}

TEST(FullModel, GradientsMatchFiniteDifferences) {
  const auto result = full_model_gradcheck(2024);
  EXPECT_LT(result.max_rel_err, 1e-4);
}

TEST(Checkpoint, RoundTripsBitExactly) {
  ModelConfig cfg = tiny_config();
  Rng rng(51);
  ModelParams params = ModelParams::init(cfg, &rng);
  CheckpointMeta meta;
  meta.seed = 99;
  meta.split_version = 2;
  meta.epoch = 17;
  meta.val_loss = 0.123456789012345;
  meta.stats.thick_mean = 42.5;
  meta.stats.thick_std = 11.25;

  const auto dir = std::filesystem::temp_directory_path();
  const std::string path_a = (dir / "stgrit_ck_a.stck").string();
  const std::string path_b = (dir / "stgrit_ck_b.stck").string();
  save_checkpoint(path_a, params, meta);
  LoadedCheckpoint loaded = load_checkpoint(path_a);
  EXPECT_EQ(loaded.meta.epoch, meta.epoch);
  EXPECT_EQ(loaded.meta.val_loss, meta.val_loss);
  EXPECT_EQ(loaded.meta.stats.thick_std, meta.stats.thick_std);
  const auto& a_entries = params.registry.entries();
  const auto& b_entries = loaded.params.registry.entries();
  ASSERT_EQ(a_entries.size(), b_entries.size());
  for (std::size_t i = 0; i < a_entries.size(); ++i) {
    EXPECT_EQ(a_entries[i].first, b_entries[i].first);
    EXPECT_EQ(a_entries[i].second.value(), b_entries[i].second.value());
  }

  save_checkpoint(path_b, loaded.params, loaded.meta);
  std::ifstream fa(path_a, std::ios::binary), fb(path_b, std::ios::binary);
  const std::string bytes_a((std::istreambuf_iterator<char>(fa)), {});
  const std::string bytes_b((std::istreambuf_iterator<char>(fb)), {});
  EXPECT_EQ(bytes_a, bytes_b);
  std::filesystem::remove(path_a);
  std::filesystem::remove(path_b);
}

TEST(Checkpoint, CorruptFilesRejected) {
  const auto dir = std::filesystem::temp_directory_path();
  const std::string path = (dir / "stgrit_ck_bad.stck").string();
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTACKPT";
  }
  EXPECT_THROW(load_checkpoint(path), ParseError);

  ModelConfig cfg = tiny_config();
  Rng rng(53);
  ModelParams params = ModelParams::init(cfg, &rng);
  save_checkpoint(path, params, CheckpointMeta{});
  // truncate the payload
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 16);
  EXPECT_THROW(load_checkpoint(path), ParseError);
  std::filesystem::remove(path);
}
