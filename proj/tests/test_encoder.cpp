#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "grad_check.hpp"
#include "oracles.hpp"
#include "patgraph/checkpoint.hpp"
#include "patgraph/encoder.hpp"

using namespace patgraph;
using namespace patgraph::testing;

namespace {

GraphInput input_for(const InventionGraph& g, const BpeVocab& vocab) { return prepare_graph(g, vocab); }

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace

TEST(EncoderConfig, RejectsInconsistentDims) {
  EncoderConfig c;
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), UsageError);
  c = EncoderConfig{};
  c.d_out_reduced = c.d_out_base;
  EXPECT_THROW(c.validate(), UsageError);
  EXPECT_NO_THROW(EncoderConfig{}.validate());
}

TEST(EncoderConfig, JsonRoundTrip) {
  EncoderConfig c = tiny_config(50, Stage::Reduced);
  EXPECT_EQ(EncoderConfig::from_json(c.to_json()), c);
}

// --- SWEM ------------------------------------------------------------------

class SwemTest : public ::testing::Test {
 protected:
  void SetUp() override {
    c = tiny_config(4);
    c.d_token = 2;
    c.d_model = 4;
    c.n_heads = 2;
    p = init_params<float>(c, 1);
    p.token_embedding = Tensor<float>({4, 2}, {0, 0, 0, 0, 1, 3, 3, 1});
    p.swem_w = Tensor<float>({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  }
  std::vector<float> run(std::vector<std::vector<int32_t>> tokens) {
    GraphInput g;
    g.node_tokens = std::move(tokens);
    Tape<float> t(false);
    ParamBinder<float> bind(p);
    return t.value(swem_embed(t, bind, p, g, c, {})).data;
  }
  EncoderConfig c;
  EncoderParams<float> p;
};

TEST_F(SwemTest, MeanAndMaxOfTwoTokens) {
  EXPECT_EQ(run({{2, 3}}), (std::vector<float>{2, 2, 3, 3}));
}

TEST_F(SwemTest, SingletonTokenRepeatsItsEmbedding) {
  EXPECT_EQ(run({{2}}), (std::vector<float>{1, 3, 1, 3}));
}

TEST_F(SwemTest, OutOfVocabularyTokenIsRejected) { EXPECT_THROW(run({{9}}), ShapeError); }

TEST(Swem, InferenceIsDeterministic) {
  Rng rng(3);
  const BpeVocab vocab = vocab_for_word_pool();
  EncoderConfig c = tiny_config(vocab.size());
  c.embedding_dropout_p = 0.5;
  const auto p = init_params<float>(c, 2);
  const auto g = input_for(random_graph(rng, 6), vocab);
  EXPECT_EQ(embed(p, g, c), embed(p, g, c));
}

// --- Graph Transformer layer -----------------------------------------------

TEST(GtLayer, SingleNodeAttendsOnlyToItself) {
  const BpeVocab vocab = vocab_for_word_pool();
  const EncoderConfig c = tiny_config(vocab.size());
  const auto p = init_params<double>(c, 5);
  Rng rng(4);
  const auto x = random_tensor({1, c.d_model}, rng);
  Tape<double> t(false);
  ParamBinder<double> bind(p);
  const auto edges = attention_edges(Adjacency::complete(1));
  const auto& y = t.value(gt_layer(t, bind, p.layers[0], t.constant(x), edges, c, {}));
  const Mat ref = dense_gt_layer(p.layers[0], to_mat(x), c);
  for (size_t j = 0; j < c.d_model; ++j) EXPECT_NEAR(y.at(0, j), ref[0][j], 1e-12);
}

TEST(GtLayer, EqualQueryAndKeyGiveLogitEqualToScale) {
  Tape<double> t(false);
  Var q = ad::l2_normalize(t, t.constant(Tensor<double>::row({3, 4})));
  Var k = ad::l2_normalize(t, t.constant(Tensor<double>::row({3, 4})));
  const double gamma = 2.5;
  Var logit = ad::scale(t, ad::sum(t, ad::mul(t, q, k)), gamma);
  EXPECT_NEAR(t.value(logit).data[0], gamma, 1e-12);
}

TEST(GtLayer, SparseMatchesDenseOnCompleteGraphs) {
  const EncoderConfig c = tiny_config(20);
  for (size_t n = 2; n <= 8; ++n) {
    const auto p = init_params<double>(c, 100 + n);
    Rng rng(n);
    const auto x = random_tensor({n, c.d_model}, rng, 2.0);
    Tape<double> t(false);
    ParamBinder<double> bind(p);
    const auto edges = attention_edges(Adjacency::complete(n));
    const auto& y = t.value(gt_layer(t, bind, p.layers[0], t.constant(x), edges, c, {}));
    const Mat ref = dense_gt_layer(p.layers[0], to_mat(x), c);
    double diff = 0;
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j < c.d_model; ++j) diff = std::max(diff, std::abs(y.at(i, j) - ref[i][j]));
    }
    EXPECT_LE(diff, 1e-6) << "n=" << n;
  }
}

TEST(GtLayer, AttentionIsRestrictedToAdjacency) {
  const BpeVocab vocab = vocab_for_word_pool();
  EncoderConfig c = tiny_config(vocab.size());
  c.n_layers = 1;
  auto p = init_params<float>(c, 8);
  // Path 0 - 1 - 2 - 3: node 0 is not adjacent to node 3.
  InventionGraph g;
  g.doc_id = "path";
  const std::vector<std::string> texts = {"frame", "motor", "valve", "drum"};
  for (uint32_t i = 0; i < 4; ++i) g.nodes.push_back({NodeId{i}, texts[i], NodeRole::Feature});
  for (uint32_t i = 0; i + 1 < 4; ++i) g.edges.push_back({NodeId{i}, NodeId{i + 1}, EdgeKind::PartOf});
  const GraphInput in = input_for(g, vocab);

  auto layer_out = [&](const EncoderParams<float>& params) {
    Tape<float> t(false);
    ParamBinder<float> bind(params);
    const auto edges = attention_edges(in.adjacency);
    Var x = swem_embed(t, bind, params, in, c, {});
    x = gt_layer(t, bind, params.layers[0], x, edges, c, {});
    const auto& v = t.value(x);
    return std::vector<float>(v.row_ptr(0), v.row_ptr(0) + c.d_model);
  };
  const auto before = layer_out(p);
  // Zero the token embeddings used only by node 3.
  std::set<int32_t> used_elsewhere;
  for (size_t v = 0; v < 3; ++v) used_elsewhere.insert(in.node_tokens[v].begin(), in.node_tokens[v].end());
  size_t zeroed = 0;
  for (int32_t id : in.node_tokens[3]) {
    if (used_elsewhere.count(id)) continue;
    for (size_t j = 0; j < c.d_token; ++j) p.token_embedding.at(id, j) = 0.0f;
    ++zeroed;
  }
  ASSERT_GT(zeroed, 0u);
  EXPECT_EQ(layer_out(p), before);
}

TEST(GtLayer, AttentionCostScalesWithEdges) {
  const BpeVocab vocab = vocab_for_word_pool();
  EncoderConfig c = tiny_config(vocab.size());
  c.n_layers = 1;
  const auto p = init_params<float>(c, 9);
  const size_t n = 200;
  InventionGraph path;
  path.doc_id = "path";
  for (uint32_t i = 0; i < n; ++i) path.nodes.push_back({NodeId{i}, "gear", NodeRole::Feature});
  for (uint32_t i = 0; i + 1 < n; ++i) path.edges.push_back({NodeId{i}, NodeId{i + 1}, EdgeKind::PartOf});
  GraphInput sparse = input_for(path, vocab);
  GraphInput dense = sparse;
  dense.adjacency = Adjacency::complete(n);
  EncoderStats s_sparse, s_dense;
  embed(p, sparse, c, &s_sparse);
  embed(p, dense, c, &s_dense);
  EXPECT_EQ(s_sparse.attention_scores, (n + 2 * (n - 1)) * c.n_heads);
  EXPECT_EQ(s_dense.attention_scores, n * n * c.n_heads);
  EXPECT_LT(double(s_sparse.attention_scores), 0.05 * double(s_dense.attention_scores));
}

// --- Pooling -----------------------------------------------------------------

class PoolTest : public ::testing::Test {
 protected:
  EncoderConfig c = tiny_config(10);
  EncoderParams<double> p = init_params<double>(c, 11);
  std::vector<double> pool(const Tensor<double>& x) {
    Tape<double> t(false);
    ParamBinder<double> bind(p);
    return t.value(pool_graph(t, bind, p, t.constant(x))).data;
  }
};

TEST_F(PoolTest, EqualNodesPoolToThatVector) {
  Tensor<double> x({3, c.d_model});
  for (size_t r = 0; r < 3; ++r) {
    for (size_t j = 0; j < c.d_model; ++j) x.at(r, j) = 0.25 * double(j) - 1.0;
  }
  const auto y = pool(x);
  for (size_t j = 0; j < c.d_model; ++j) EXPECT_NEAR(y[j], 0.25 * double(j) - 1.0, 1e-12);
}

TEST_F(PoolTest, EqualScoresGiveMidpoint) {
  // Two nodes whose difference is orthogonal to the score vector.
  Rng rng(12);
  Tensor<double> x({2, c.d_model});
  std::vector<double> a(c.d_model), d(c.d_model);
  for (auto& v : a) v = rng.uniform(-1, 1);
  for (auto& v : d) v = rng.uniform(-1, 1);
  double sd = 0, ss = 0;
  for (size_t j = 0; j < c.d_model; ++j) {
    sd += d[j] * p.pool_score.data[j];
    ss += p.pool_score.data[j] * p.pool_score.data[j];
  }
  for (size_t j = 0; j < c.d_model; ++j) d[j] -= sd / ss * p.pool_score.data[j];
  for (size_t j = 0; j < c.d_model; ++j) {
    x.at(0, j) = a[j];
    x.at(1, j) = a[j] + d[j];
  }
  const auto y = pool(x);
  for (size_t j = 0; j < c.d_model; ++j) EXPECT_NEAR(y[j], a[j] + 0.5 * d[j], 1e-12);
}

TEST_F(PoolTest, WeightsSumToOne) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const size_t n = 1 + rng.below(30);
    Tape<double> t(false);
    ParamBinder<double> bind(p);
    Var x = t.constant(random_tensor({n, c.d_model}, rng, 3.0));
    const auto& w = t.value(ad::softmax(t, ad::matmul(t, x, bind(t, p.pool_score)), 0));
    double s = 0;
    for (double v : w.data) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

// --- MoE -----------------------------------------------------------------------

class MoeTest : public ::testing::Test {
 protected:
  std::vector<double> moe(const EncoderParams<double>& params, const Tensor<double>& z) {
    Tape<double> t(false);
    ParamBinder<double> bind(params);
    return t.value(moe_project(t, bind, params, t.constant(z))).data;
  }
  std::vector<double> expert(const ExpertParams<double>& E, const Tensor<double>& z) {
    Tape<double> t(false);
    Var h = ad::gelu(t, ad::add(t, ad::matmul(t, t.constant(z), t.constant(E.w1)), t.constant(E.b1)));
    return t.value(ad::add(t, ad::matmul(t, h, t.constant(E.w2)), t.constant(E.b2))).data;
  }
  Rng rng{14};
};

TEST_F(MoeTest, SingleExpertIsThatExpert) {
  EncoderConfig c = tiny_config(10, Stage::Reduced);
  c.n_experts = 1;
  const auto p = init_params<double>(c, 15);
  const auto z = random_tensor({1, c.d_out_base}, rng);
  EXPECT_EQ(moe(p, z), expert(p.experts[0], z));
}

TEST_F(MoeTest, IdenticalExpertsIgnoreTheGate) {
  const EncoderConfig c = tiny_config(10, Stage::Reduced);
  auto p = init_params<double>(c, 16);
  for (auto& E : p.experts) E = p.experts[0];
  const auto z = random_tensor({1, c.d_out_base}, rng);
  const auto got = moe(p, z), want = expert(p.experts[0], z);
  for (size_t j = 0; j < got.size(); ++j) EXPECT_NEAR(got[j], want[j], 1e-12);
}

TEST_F(MoeTest, UniformGateAveragesExperts) {
  const EncoderConfig c = tiny_config(10, Stage::Reduced);
  auto p = init_params<double>(c, 17);
  for (auto& v : p.gate_w.data) v = 0.0;
  const auto z = random_tensor({1, c.d_out_base}, rng);
  const auto got = moe(p, z);
  std::vector<double> mean(c.d_out_reduced, 0.0);
  for (const auto& E : p.experts) {
    const auto o = expert(E, z);
    for (size_t j = 0; j < o.size(); ++j) mean[j] += o[j] / double(c.n_experts);
  }
  for (size_t j = 0; j < got.size(); ++j) EXPECT_NEAR(got[j], mean[j], 1e-12);
}

TEST_F(MoeTest, BaseParametersRejectMoe) {
  const EncoderConfig c = tiny_config(10);
  const auto p = init_params<double>(c, 18);
  EXPECT_THROW(moe(p, random_tensor({1, c.d_out_base}, rng)), UsageError);
}

// --- Full encoder --------------------------------------------------------------

TEST(Encode, PermutationInvariance) {
  const BpeVocab vocab = vocab_for_word_pool();
  EncoderConfig c;
  c.vocab_size = vocab.size();
  const auto p = init_params<float>(c, 19);
  Rng rng(20);
  double worst = 0;
  for (int trial = 0; trial < 25; ++trial) {
    const auto g = random_graph(rng, 2 + rng.below(20));
    const auto pg = permute(g, random_permutation(rng, g.nodes.size()));
    worst = std::max(worst, max_abs_diff(embed(p, input_for(g, vocab), c), embed(p, input_for(pg, vocab), c)));
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(Encode, OutputIsUnitNormWithStageDimension) {
  const BpeVocab vocab = vocab_for_word_pool();
  EncoderConfig c;
  c.vocab_size = vocab.size();
  Rng rng(21);
  for (Stage stage : {Stage::Base, Stage::Reduced}) {
    c.stage = stage;
    const auto p = init_params<float>(c, 22);
    for (int trial = 0; trial < 100; ++trial) {
      const auto e = embed(p, input_for(random_graph(rng, 1 + rng.below(12)), vocab), c);
      ASSERT_EQ(e.size(), stage == Stage::Base ? c.d_out_base : c.d_out_reduced);
      double n2 = 0;
      for (float v : e) n2 += double(v) * v;
      EXPECT_NEAR(std::sqrt(n2), 1.0, 1e-5);
    }
  }
}

TEST(Encode, GradientMatchesFiniteDifferencesOnFiveNodeGraph) {
  const BpeVocab vocab = vocab_for_word_pool(50);
  Rng rng(23);
  for (Stage stage : {Stage::Base, Stage::Reduced}) {
    const EncoderConfig c = tiny_config(vocab.size(), stage);
    auto p = init_params<double>(c, 24);
    spread_token_embeddings(p, rng);
    const GraphInput g = input_for(random_graph(rng, 5), vocab);
    const auto w = random_tensor({1, c.d_out()}, rng);
    std::string worst;
    const double err = encoder_param_grad_error(
        p,
        [&](Tape<double>& t, const EncoderParams<double>& params) {
          return ad::sum(t, ad::mul(t, encode(t, params, g, c), t.constant(w)));
        },
        1e-3, &worst);
    EXPECT_LE(err, 1e-4) << worst;
  }
}

TEST(Encode, EmptyGraphIsRejected) {
  const EncoderConfig c = tiny_config(10);
  const auto p = init_params<float>(c, 1);
  EXPECT_THROW(embed(p, GraphInput{}, c), ValidationError);
}

// --- Checkpoint container --------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  Checkpoint ck;
  ck.vocab = vocab_for_word_pool();
  ck.config = tiny_config(ck.vocab.size(), Stage::Reduced);
  ck.params = init_params<float>(ck.config, 25);
  ck.training = {{"epoch", 3}};
  const std::string bytes = encode_checkpoint(ck);
  EXPECT_EQ(bytes.find('\n') % 64, 63u);
  const Checkpoint back = decode_checkpoint(bytes, "mem");
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.vocab, ck.vocab);
  EXPECT_EQ(back.training, ck.training);
  const auto a = std::as_const(ck.params).named();
  const auto b = std::as_const(back.params).named();
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(*a[i].second, *b[i].second);
  }
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, CorruptHeaderIsASchemaError) {
  EXPECT_THROW(decode_checkpoint("garbage", "mem"), SchemaError);
  std::string bad(63, ' ');
  bad.push_back('\n');
  EXPECT_THROW(decode_checkpoint(bad, "mem"), SchemaError);
}
