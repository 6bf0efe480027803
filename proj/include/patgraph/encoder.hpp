#pragma once

// Graph encoder: SWEM node initialization, sparse Graph Transformer layers,
// softmax-weighted pooling and an optional densely gated MoE reduction.

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "patgraph/autodiff.hpp"
#include "patgraph/error.hpp"
#include "patgraph/graph.hpp"
#include "patgraph/rng.hpp"
#include "patgraph/tokenizer.hpp"

namespace patgraph {

enum class Stage { Base, Reduced };

inline std::string_view to_string(Stage s) { return s == Stage::Base ? "base" : "reduced"; }

inline Stage parse_stage(std::string_view s) {
  if (s == "base") return Stage::Base;
  if (s == "reduced" || s == "reduce") return Stage::Reduced;
  throw UsageError("unknown stage '" + std::string(s) + "' (expected base or reduce)");
}

struct EncoderConfig {
  size_t vocab_size = 2000;
  size_t d_token = 64;
  size_t d_model = 128;
  size_t n_layers = 3;
  size_t n_heads = 4;
  size_t d_ff = 256;
  size_t d_out_base = 64;
  size_t n_experts = 4;
  size_t d_moe_hidden = 64;
  size_t d_out_reduced = 16;
  double embedding_dropout_p = 0.1;
  double sublayer_dropout_p = 0.0;
  size_t max_node_tokens = 48;
  Stage stage = Stage::Base;

  size_t d_head() const { return d_model / n_heads; }
  size_t d_out() const { return stage == Stage::Base ? d_out_base : d_out_reduced; }

  void validate() const {
    auto positive = [](size_t v, const char* name) {
      if (v < 1) throw UsageError(std::string("encoder config: ") + name + " must be >= 1");
    };
    positive(vocab_size, "vocab_size");
    positive(d_token, "d_token");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    positive(d_out_base, "d_out_base");
    positive(n_experts, "n_experts");
    positive(d_moe_hidden, "d_moe_hidden");
    positive(d_out_reduced, "d_out_reduced");
    positive(max_node_tokens, "max_node_tokens");
    if (d_model % n_heads != 0) throw UsageError("encoder config: d_model must be divisible by n_heads");
    if (d_out_reduced >= d_out_base) {
      throw UsageError("encoder config: d_out_reduced must be smaller than d_out_base");
    }
    if (embedding_dropout_p < 0 || embedding_dropout_p >= 1 || sublayer_dropout_p < 0 ||
        sublayer_dropout_p >= 1) {
      throw UsageError("encoder config: dropout probabilities must lie in [0, 1)");
    }
  }

  nlohmann::ordered_json to_json() const {
    return {{"vocab_size", vocab_size},
            {"d_token", d_token},
            {"d_model", d_model},
            {"n_layers", n_layers},
            {"n_heads", n_heads},
            {"d_ff", d_ff},
            {"d_out_base", d_out_base},
            {"n_experts", n_experts},
            {"d_moe_hidden", d_moe_hidden},
            {"d_out_reduced", d_out_reduced},
            {"embedding_dropout_p", embedding_dropout_p},
            {"sublayer_dropout_p", sublayer_dropout_p},
            {"max_node_tokens", max_node_tokens},
            {"stage", std::string(to_string(stage))}};
  }

  static EncoderConfig from_json(const nlohmann::ordered_json& j) {
    EncoderConfig c;
    try {
      c.vocab_size = j.at("vocab_size");
      c.d_token = j.at("d_token");
      c.d_model = j.at("d_model");
      c.n_layers = j.at("n_layers");
      c.n_heads = j.at("n_heads");
      c.d_ff = j.at("d_ff");
      c.d_out_base = j.at("d_out_base");
      c.n_experts = j.at("n_experts");
      c.d_moe_hidden = j.at("d_moe_hidden");
      c.d_out_reduced = j.at("d_out_reduced");
      c.embedding_dropout_p = j.at("embedding_dropout_p");
      c.sublayer_dropout_p = j.at("sublayer_dropout_p");
      c.max_node_tokens = j.at("max_node_tokens");
      c.stage = parse_stage(j.at("stage").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(std::string("malformed encoder config: ") + e.what());
    }
    c.validate();
    return c;
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

template <typename Real>
struct LayerParams {
  Tensor<Real> ln1_gain, ln1_bias;
  Tensor<Real> w_q, w_k, w_v, w_o;
  Tensor<Real> qk_scale;  // one learned logit scale per head
  Tensor<Real> ln2_gain, ln2_bias;
  Tensor<Real> w_in;   // [d_model x 2 d_ff], GEGLU gate and value halves
  Tensor<Real> w_out;  // [d_ff x d_model]
};

template <typename Real>
struct ExpertParams {
  Tensor<Real> w1, b1, w2, b2;
};

template <typename Real>
struct EncoderParams {
  Tensor<Real> token_embedding;  // [vocab x d_token]
  Tensor<Real> swem_w, swem_b;
  std::vector<LayerParams<Real>> layers;
  Tensor<Real> final_ln_gain, final_ln_bias;
  Tensor<Real> pool_score;  // [d_model x 1]
  Tensor<Real> out_w, out_b;
  Tensor<Real> gate_w;  // empty until the Reduced stage
  std::vector<ExpertParams<Real>> experts;

  bool has_moe() const { return !experts.empty(); }

  /// Every tensor with a stable name, in a fixed order.
  template <typename Self>
  static auto named_impl(Self& self) {
    using TPtr = std::conditional_t<std::is_const_v<Self>, const Tensor<Real>*, Tensor<Real>*>;
    std::vector<std::pair<std::string, TPtr>> out;
    out.emplace_back("token_embedding", &self.token_embedding);
    out.emplace_back("swem.w", &self.swem_w);
    out.emplace_back("swem.b", &self.swem_b);
    for (size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      out.emplace_back(p + "ln1.gain", &L.ln1_gain);
      out.emplace_back(p + "ln1.bias", &L.ln1_bias);
      out.emplace_back(p + "attn.w_q", &L.w_q);
      out.emplace_back(p + "attn.w_k", &L.w_k);
      out.emplace_back(p + "attn.w_v", &L.w_v);
      out.emplace_back(p + "attn.w_o", &L.w_o);
      out.emplace_back(p + "attn.qk_scale", &L.qk_scale);
      out.emplace_back(p + "ln2.gain", &L.ln2_gain);
      out.emplace_back(p + "ln2.bias", &L.ln2_bias);
      out.emplace_back(p + "ffn.w_in", &L.w_in);
      out.emplace_back(p + "ffn.w_out", &L.w_out);
    }
    out.emplace_back("final_ln.gain", &self.final_ln_gain);
    out.emplace_back("final_ln.bias", &self.final_ln_bias);
    out.emplace_back("pool.score", &self.pool_score);
    out.emplace_back("out.w", &self.out_w);
    out.emplace_back("out.b", &self.out_b);
    if (self.has_moe()) {
      out.emplace_back("moe.gate", &self.gate_w);
      for (size_t e = 0; e < self.experts.size(); ++e) {
        auto& E = self.experts[e];
        const std::string p = "moe.expert" + std::to_string(e) + ".";
        out.emplace_back(p + "w1", &E.w1);
        out.emplace_back(p + "b1", &E.b1);
        out.emplace_back(p + "w2", &E.w2);
        out.emplace_back(p + "b2", &E.b2);
      }
    }
    return out;
  }
  auto named() { return named_impl(*this); }
  auto named() const { return named_impl(*this); }

  size_t parameter_count() const {
    size_t n = 0;
    for (const auto& [name, t] : named()) n += t->size();
    return n;
  }

  bool all_finite() const {
    for (const auto& [name, t] : named()) {
      if (!t->all_finite()) return false;
    }
    return true;
  }

  template <typename Other>
  EncoderParams<Other> cast() const {
    EncoderParams<Other> o;
    o.layers.resize(layers.size());
    o.experts.resize(experts.size());
    auto src = named();
    auto dst = o.named();
    for (size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<Other>();
    return o;
  }
};

namespace encoder_detail {

template <typename Real>
Tensor<Real> xavier(size_t fan_in, size_t fan_out, Rng& rng) {
  Tensor<Real> t({fan_in, fan_out});
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.data) v = static_cast<Real>(rng.uniform(-a, a));
  return t;
}

template <typename Real>
Tensor<Real> zeros_row(size_t n) {
  return Tensor<Real>::matrix(1, n, Real(0));
}

template <typename Real>
Tensor<Real> ones_row(size_t n) {
  return Tensor<Real>::matrix(1, n, Real(1));
}

template <typename Real>
void init_moe(EncoderParams<Real>& p, const EncoderConfig& c, Rng& rng) {
  p.gate_w = xavier<Real>(c.d_out_base, c.n_experts, rng);
  p.experts.clear();
  for (size_t e = 0; e < c.n_experts; ++e) {
    ExpertParams<Real> E;
    E.w1 = xavier<Real>(c.d_out_base, c.d_moe_hidden, rng);
    E.b1 = zeros_row<Real>(c.d_moe_hidden);
    E.w2 = xavier<Real>(c.d_moe_hidden, c.d_out_reduced, rng);
    E.b2 = zeros_row<Real>(c.d_out_reduced);
    p.experts.push_back(std::move(E));
  }
}

}  // namespace encoder_detail

/// Seeded initialization: scaled uniform projections, N(0, 0.02) token
/// embeddings, unit layer-norm gains, QK scales at sqrt(d_head).
template <typename Real>
EncoderParams<Real> init_params(const EncoderConfig& c, uint64_t seed) {
  using namespace encoder_detail;
  c.validate();
  Rng rng(seed);
  EncoderParams<Real> p;
  p.token_embedding = Tensor<Real>({c.vocab_size, c.d_token});
  for (auto& v : p.token_embedding.data) v = static_cast<Real>(0.02 * rng.normal());
  p.swem_w = xavier<Real>(2 * c.d_token, c.d_model, rng);
  p.swem_b = zeros_row<Real>(c.d_model);
  for (size_t l = 0; l < c.n_layers; ++l) {
    LayerParams<Real> L;
    L.ln1_gain = ones_row<Real>(c.d_model);
    L.ln1_bias = zeros_row<Real>(c.d_model);
    L.w_q = xavier<Real>(c.d_model, c.d_model, rng);
    L.w_k = xavier<Real>(c.d_model, c.d_model, rng);
    L.w_v = xavier<Real>(c.d_model, c.d_model, rng);
    L.w_o = xavier<Real>(c.d_model, c.d_model, rng);
    L.qk_scale = Tensor<Real>::matrix(1, c.n_heads, static_cast<Real>(std::sqrt(double(c.d_head()))));
    L.ln2_gain = ones_row<Real>(c.d_model);
    L.ln2_bias = zeros_row<Real>(c.d_model);
    L.w_in = xavier<Real>(c.d_model, 2 * c.d_ff, rng);
    L.w_out = xavier<Real>(c.d_ff, c.d_model, rng);
    p.layers.push_back(std::move(L));
  }
  p.final_ln_gain = ones_row<Real>(c.d_model);
  p.final_ln_bias = zeros_row<Real>(c.d_model);
  p.pool_score = xavier<Real>(c.d_model, 1, rng);
  p.out_w = xavier<Real>(c.d_model, c.d_out_base, rng);
  p.out_b = zeros_row<Real>(c.d_out_base);
  if (c.stage == Stage::Reduced) init_moe(p, c, rng);
  return p;
}

/// Adds freshly initialized MoE parameters to a Base-stage parameter set.
template <typename Real>
void add_moe(EncoderParams<Real>& p, const EncoderConfig& c, uint64_t seed) {
  Rng rng(text::derive_seed(seed, 0x6d6f65));
  encoder_detail::init_moe(p, c, rng);
}

/// Checks tensor shapes against a config.
template <typename Real>
void check_shapes(const EncoderParams<Real>& p, const EncoderConfig& c) {
  auto expect = [](const Tensor<Real>& t, std::vector<size_t> shape, const std::string& name) {
    if (t.shape != shape) throw ShapeError("parameter " + name + " has wrong shape");
  };
  expect(p.token_embedding, {c.vocab_size, c.d_token}, "token_embedding");
  expect(p.swem_w, {2 * c.d_token, c.d_model}, "swem.w");
  if (p.layers.size() != c.n_layers) throw ShapeError("layer count does not match config");
  for (const auto& L : p.layers) {
    expect(L.w_q, {c.d_model, c.d_model}, "attn.w_q");
    expect(L.qk_scale, {1, c.n_heads}, "attn.qk_scale");
    expect(L.w_in, {c.d_model, 2 * c.d_ff}, "ffn.w_in");
    expect(L.w_out, {c.d_ff, c.d_model}, "ffn.w_out");
  }
  expect(p.out_w, {c.d_model, c.d_out_base}, "out.w");
  if (c.stage == Stage::Reduced) {
    if (p.experts.size() != c.n_experts) throw ShapeError("expert count does not match config");
    expect(p.gate_w, {c.d_out_base, c.n_experts}, "moe.gate");
  }
}

// ---------------------------------------------------------------------------
// Graph inputs

/// A graph prepared for encoding: per-node token ids and attention adjacency.
struct GraphInput {
  std::vector<std::vector<int32_t>> node_tokens;
  Adjacency adjacency;

  size_t node_count() const { return node_tokens.size(); }
};

inline GraphInput prepare_graph(const InventionGraph& g, const BpeVocab& vocab,
                                size_t max_node_tokens = 48) {
  GraphInput in;
  in.node_tokens.reserve(g.nodes.size());
  for (const Node& n : g.nodes) {
    auto ids = vocab.encode(n.text);
    if (ids.size() > max_node_tokens) ids.resize(max_node_tokens);
    if (ids.empty()) ids.push_back(BpeVocab::kPad);
    in.node_tokens.push_back(std::move(ids));
  }
  in.adjacency = to_adjacency(g);
  return in;
}

/// Operation counters for cost accounting.
struct EncoderStats {
  uint64_t attention_scores = 0;  // (query, key, head) logits computed
  uint64_t graphs = 0;
};

template <typename Real>
struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout
  EncoderStats* stats = nullptr;
};

/// Binds parameter tensors to tape leaves, tagging each with its index in
/// EncoderParams::named().
template <typename Real>
class ParamBinder {
 public:
  explicit ParamBinder(const EncoderParams<Real>& p) {
    const auto named = p.named();
    for (size_t i = 0; i < named.size(); ++i) slots_.emplace(named[i].second, static_cast<int>(i));
  }
  Var operator()(Tape<Real>& t, const Tensor<Real>& p) const {
    auto it = slots_.find(&p);
    return t.param(p, it == slots_.end() ? -1 : it->second);
  }

 private:
  std::unordered_map<const Tensor<Real>*, int> slots_;
};

// ---------------------------------------------------------------------------
// Stages

/// Node matrix [n x d_model] from mean- and max-pooled token embeddings.
template <typename Real>
Var swem_embed(Tape<Real>& t, const ParamBinder<Real>& bind, const EncoderParams<Real>& p,
               const GraphInput& g, const EncoderConfig& c, const ForwardOptions<Real>& opt) {
  const size_t n = g.node_count();
  std::vector<uint32_t> flat, seg;
  Tensor<Real> inv_count({n, 1});
  for (size_t v = 0; v < n; ++v) {
    for (int32_t id : g.node_tokens[v]) {
      if (id < 0 || static_cast<size_t>(id) >= c.vocab_size) {
        throw ShapeError("token id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(c.vocab_size));
      }
      flat.push_back(static_cast<uint32_t>(id));
      seg.push_back(static_cast<uint32_t>(v));
    }
    inv_count.data[v] = Real(1) / static_cast<Real>(g.node_tokens[v].size());
  }
  Var emb = ad::gather_rows(t, bind(t, p.token_embedding), flat);
  if (opt.training && opt.rng) emb = ad::dropout(t, emb, c.embedding_dropout_p, *opt.rng);
  Var mean = ad::mul(t, ad::segment_sum(t, emb, seg, n), t.constant(std::move(inv_count)));
  Var mx = ad::segment_max(t, emb, std::move(seg), n);
  Var pooled = ad::concat(t, {mean, mx}, 1);
  return ad::add(t, ad::matmul(t, pooled, bind(t, p.swem_w)), bind(t, p.swem_b));
}

/// Edge list (query node, key node) of an adjacency in CSR order.
struct AttentionEdges {
  std::vector<uint32_t> query, key;
};

inline AttentionEdges attention_edges(const Adjacency& adj) {
  AttentionEdges e;
  for (size_t v = 0; v < adj.node_count(); ++v) {
    for (uint32_t u : adj.neighbors_of(v)) {
      e.query.push_back(static_cast<uint32_t>(v));
      e.key.push_back(u);
    }
  }
  return e;
}

template <typename Real>
Var affine_layer_norm(Tape<Real>& t, const ParamBinder<Real>& bind, Var x, const Tensor<Real>& gain,
                      const Tensor<Real>& bias) {
  return ad::add(t, ad::mul(t, ad::layer_norm(t, x), bind(t, gain)), bind(t, bias));
}

/// Multi-head attention restricted to adjacency, with per-head L2-normalized
/// queries and keys and a learned logit scale per head.
template <typename Real>
Var sparse_attention(Tape<Real>& t, const ParamBinder<Real>& bind, const LayerParams<Real>& L,
                     Var h, const AttentionEdges& edges, const EncoderConfig& c,
                     const ForwardOptions<Real>& opt) {
  const size_t n = t.value(h).rows();
  const size_t H = c.n_heads, dh = c.d_head();
  const size_t E = edges.query.size();
  Var q = ad::l2_normalize(t, ad::reshape(t, ad::matmul(t, h, bind(t, L.w_q)), {n * H, dh}));
  Var k = ad::l2_normalize(t, ad::reshape(t, ad::matmul(t, h, bind(t, L.w_k)), {n * H, dh}));
  Var v = ad::reshape(t, ad::matmul(t, h, bind(t, L.w_v)), {n * H, dh});

  std::vector<uint32_t> qi(E * H), ki(E * H), out_seg(E * H);
  for (size_t e = 0; e < E; ++e) {
    for (size_t hd = 0; hd < H; ++hd) {
      qi[e * H + hd] = static_cast<uint32_t>(edges.query[e] * H + hd);
      ki[e * H + hd] = static_cast<uint32_t>(edges.key[e] * H + hd);
    }
  }
  out_seg = qi;
  if (opt.stats) opt.stats->attention_scores += E * H;

  Var qk = ad::mul(t, ad::gather_rows(t, q, qi), ad::gather_rows(t, k, ki));
  Var logits = ad::reshape(t, ad::sum(t, qk, 1), {E, H});
  logits = ad::mul(t, logits, bind(t, L.qk_scale));
  Var attn = ad::segment_softmax(t, logits, edges.query, n);
  Var weighted = ad::mul(t, ad::gather_rows(t, v, std::move(ki)), ad::reshape(t, attn, {E * H, 1}));
  Var ctx = ad::reshape(t, ad::segment_sum(t, weighted, std::move(out_seg), n * H), {n, H * dh});
  return ad::matmul(t, ctx, bind(t, L.w_o));
}

/// One Pre-LN Graph Transformer layer.
template <typename Real>
Var gt_layer(Tape<Real>& t, const ParamBinder<Real>& bind, const LayerParams<Real>& L, Var x,
             const AttentionEdges& edges, const EncoderConfig& c, const ForwardOptions<Real>& opt) {
  Var a = sparse_attention(t, bind, L, affine_layer_norm(t, bind, x, L.ln1_gain, L.ln1_bias), edges, c,
                           opt);
  if (opt.training && opt.rng) a = ad::dropout(t, a, c.sublayer_dropout_p, *opt.rng);
  Var x1 = ad::add(t, x, a);
  Var u = ad::matmul(t, affine_layer_norm(t, bind, x1, L.ln2_gain, L.ln2_bias), bind(t, L.w_in));
  Var gated = ad::mul(t, ad::gelu(t, ad::slice_cols(t, u, 0, c.d_ff)),
                      ad::slice_cols(t, u, c.d_ff, 2 * c.d_ff));
  Var f = ad::matmul(t, gated, bind(t, L.w_out));
  if (opt.training && opt.rng) f = ad::dropout(t, f, c.sublayer_dropout_p, *opt.rng);
  return ad::add(t, x1, f);
}

/// Softmax-weighted sum of node vectors, [1 x d_model].
template <typename Real>
Var pool_graph(Tape<Real>& t, const ParamBinder<Real>& bind, const EncoderParams<Real>& p, Var x) {
  Var w = ad::softmax(t, ad::matmul(t, x, bind(t, p.pool_score)), 0);
  return ad::sum(t, ad::mul(t, x, w), 0);
}

/// Densely gated mixture of experts, [1 x d_out_base] -> [1 x d_out_reduced].
template <typename Real>
Var moe_project(Tape<Real>& t, const ParamBinder<Real>& bind, const EncoderParams<Real>& p, Var z) {
  if (!p.has_moe()) throw UsageError("moe_project requires Reduced-stage parameters");
  Var gate = ad::softmax(t, ad::matmul(t, z, bind(t, p.gate_w)), 1);
  std::vector<Var> outs;
  outs.reserve(p.experts.size());
  for (const auto& E : p.experts) {
    Var hdn = ad::gelu(t, ad::add(t, ad::matmul(t, z, bind(t, E.w1)), bind(t, E.b1)));
    outs.push_back(ad::add(t, ad::matmul(t, hdn, bind(t, E.w2)), bind(t, E.b2)));
  }
  return ad::matmul(t, gate, ad::concat(t, outs, 0));
}

/// Full encoder forward pass; returns the unit-norm embedding [1 x d_out].
template <typename Real>
Var encode(Tape<Real>& t, const EncoderParams<Real>& p, const GraphInput& g, const EncoderConfig& c,
           const ForwardOptions<Real>& opt = {}) {
  if (g.node_count() == 0) throw ValidationError("cannot encode an empty graph");
  if (g.adjacency.node_count() != g.node_count()) throw ShapeError("adjacency does not match node count");
  const ParamBinder<Real> bind(p);
  const AttentionEdges edges = attention_edges(g.adjacency);
  Var x = swem_embed(t, bind, p, g, c, opt);
  for (const auto& L : p.layers) x = gt_layer(t, bind, L, x, edges, c, opt);
  x = affine_layer_norm(t, bind, x, p.final_ln_gain, p.final_ln_bias);
  Var z = ad::add(t, ad::matmul(t, pool_graph(t, bind, p, x), bind(t, p.out_w)), bind(t, p.out_b));
  if (c.stage == Stage::Reduced) z = moe_project(t, bind, p, z);
  if (opt.stats) ++opt.stats->graphs;
  return ad::l2_normalize(t, z);
}

/// Inference-only embedding as a plain vector.
template <typename Real>
std::vector<Real> embed(const EncoderParams<Real>& p, const GraphInput& g, const EncoderConfig& c,
                        EncoderStats* stats = nullptr) {
  Tape<Real> t(false);
  ForwardOptions<Real> opt;
  opt.stats = stats;
  return t.value(encode(t, p, g, c, opt)).data;
}

struct GraphEmbedding {
  std::string doc_id;
  GraphKind kind = GraphKind::FirstClaim;
  std::vector<float> vector;
};

}  // namespace patgraph
