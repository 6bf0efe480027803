#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "patgraph/autodiff.hpp"
#include "patgraph/checkpoint.hpp"
#include "patgraph/claim_parser.hpp"
#include "patgraph/config.hpp"
#include "patgraph/corpus.hpp"
#include "patgraph/embedding.hpp"
#include "patgraph/encoder.hpp"
#include "patgraph/error.hpp"
#include "patgraph/eval.hpp"
#include "patgraph/graph.hpp"
#include "patgraph/parallel.hpp"
#include "patgraph/rng.hpp"
#include "patgraph/tokenizer.hpp"

namespace patgraph {

// ---------------------------------------------------------------------------
// Configuration

struct Margins {
  double x = 0.40;
  double y = 0.30;
  double a = 0.20;

  double of(CitationCategory c) const {
    switch (c) {
      case CitationCategory::X: return x;
      case CitationCategory::Y: return y;
      case CitationCategory::A: return a;
    }
    return x;
  }
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct SplitFractions {
  double train = 0.7;
  double valid = 0.1;
  double test = 0.2;
};

struct TrainConfig {
  Margins margins;
  double lr = 3e-4;
  double lr_floor = 1e-6;
  size_t plateau_patience = 2;
  double plateau_factor = 2.0;
  size_t early_stop_patience = 3;
  size_t evals_per_epoch = 3;
  size_t max_epochs = 30;
  size_t max_steps = 0;             // 0: unlimited
  double time_budget_seconds = 0;   // 0: unlimited
  double graph_type_probability = 0.4;
  bool node_dropout = true;
  double embedding_dropout_p = 0.1;
  size_t node_budget = 8192;
  double trivial_ratio = 0.1;
  bool easy_decile_forcing = true;
  bool semi_hard = false;
  double token_embedding_lr_scale = 1.0;
  size_t ipc_key_chars = 3;  // batch bucket key: leading characters of the citing IPC class; 0 disables grouping
  AdamWConfig adamw;
  SplitFractions split;
  size_t max_valid_queries = 0;     // 0: all validation queries
  bool valid_pool_all = true;       // rank against every description, not only the validation split
  uint64_t seed = 1;
  size_t threads = 1;
  EncoderConfig encoder;

  void validate() const {
    if (!(margins.x > 0 && margins.y > 0 && margins.a > 0)) throw UsageError("train config: margins must be > 0");
    if (!(margins.x >= margins.y && margins.y >= margins.a)) {
      throw UsageError("train config: margins must satisfy X >= Y >= A");
    }
    if (!(lr > 0) || lr_floor < 0 || lr_floor > lr) throw UsageError("train config: bad learning rate or floor");
    if (!(plateau_factor > 1)) throw UsageError("train config: plateau_factor must be > 1");
    if (early_stop_patience < 1 || evals_per_epoch < 1 || plateau_patience < 1) {
      throw UsageError("train config: patience and evals_per_epoch must be >= 1");
    }
    for (double p : {graph_type_probability, embedding_dropout_p, trivial_ratio}) {
      if (!(p >= 0 && p <= 1)) throw UsageError("train config: probabilities must lie in [0, 1]");
    }
    if (node_budget < 2) throw UsageError("train config: node_budget must be >= 2");
    if (split.train <= 0 || split.valid < 0 || split.test < 0 ||
        std::abs(split.train + split.valid + split.test - 1.0) > 1e-9) {
      throw UsageError("train config: split fractions must be non-negative and sum to 1");
    }
    if (!(adamw.beta1 >= 0 && adamw.beta1 < 1 && adamw.beta2 >= 0 && adamw.beta2 < 1 && adamw.eps > 0 &&
          adamw.weight_decay >= 0)) {
      throw UsageError("train config: invalid AdamW hyperparameters");
    }
  }

  /// Reads the documented keys; unknown keys raise UsageError.
  static TrainConfig from_key_values(const KeyValues& kv) {
    TrainConfig c;
    kv.read("margin_x", c.margins.x);
    kv.read("margin_y", c.margins.y);
    kv.read("margin_a", c.margins.a);
    kv.read("lr", c.lr);
    kv.read("lr_floor", c.lr_floor);
    kv.read("plateau_patience", c.plateau_patience);
    kv.read("plateau_factor", c.plateau_factor);
    kv.read("early_stop_patience", c.early_stop_patience);
    kv.read("evals_per_epoch", c.evals_per_epoch);
    kv.read("max_epochs", c.max_epochs);
    kv.read("max_steps", c.max_steps);
    kv.read("time_budget_seconds", c.time_budget_seconds);
    kv.read("graph_type_probability", c.graph_type_probability);
    kv.read("node_dropout", c.node_dropout);
    kv.read("embedding_dropout_p", c.embedding_dropout_p);
    kv.read("node_budget", c.node_budget);
    kv.read("trivial_ratio", c.trivial_ratio);
    kv.read("easy_decile_forcing", c.easy_decile_forcing);
    kv.read("semi_hard", c.semi_hard);
    kv.read("ipc_key_chars", c.ipc_key_chars);
    kv.read("token_embedding_lr_scale", c.token_embedding_lr_scale);
    kv.read("beta1", c.adamw.beta1);
    kv.read("beta2", c.adamw.beta2);
    kv.read("adam_eps", c.adamw.eps);
    kv.read("weight_decay", c.adamw.weight_decay);
    kv.read("split_train", c.split.train);
    kv.read("split_valid", c.split.valid);
    kv.read("split_test", c.split.test);
    kv.read("max_valid_queries", c.max_valid_queries);
    kv.read("valid_pool_all", c.valid_pool_all);
    kv.read("seed", c.seed);
    kv.read("threads", c.threads);
    kv.read("d_token", c.encoder.d_token);
    kv.read("d_model", c.encoder.d_model);
    kv.read("n_layers", c.encoder.n_layers);
    kv.read("n_heads", c.encoder.n_heads);
    kv.read("d_ff", c.encoder.d_ff);
    kv.read("d_out_base", c.encoder.d_out_base);
    kv.read("n_experts", c.encoder.n_experts);
    kv.read("d_moe_hidden", c.encoder.d_moe_hidden);
    kv.read("d_out_reduced", c.encoder.d_out_reduced);
    kv.read("sublayer_dropout_p", c.encoder.sublayer_dropout_p);
    kv.read("max_node_tokens", c.encoder.max_node_tokens);
    kv.require_all_used();
    c.encoder.embedding_dropout_p = c.embedding_dropout_p;
    c.validate();
    return c;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["margins"] = {{"X", margins.x}, {"Y", margins.y}, {"A", margins.a}};
    j["lr"] = lr;
    j["lr_floor"] = lr_floor;
    j["plateau_patience"] = plateau_patience;
    j["plateau_factor"] = plateau_factor;
    j["early_stop_patience"] = early_stop_patience;
    j["evals_per_epoch"] = evals_per_epoch;
    j["max_epochs"] = max_epochs;
    j["max_steps"] = max_steps;
    j["graph_type_probability"] = graph_type_probability;
    j["node_dropout"] = node_dropout;
    j["embedding_dropout_p"] = embedding_dropout_p;
    j["node_budget"] = node_budget;
    j["trivial_ratio"] = trivial_ratio;
    j["easy_decile_forcing"] = easy_decile_forcing;
    j["semi_hard"] = semi_hard;
    j["ipc_key_chars"] = ipc_key_chars;
    j["token_embedding_lr_scale"] = token_embedding_lr_scale;
    j["adamw"] = {{"beta1", adamw.beta1},
                  {"beta2", adamw.beta2},
                  {"eps", adamw.eps},
                  {"weight_decay", adamw.weight_decay}};
    j["split"] = {{"train", split.train}, {"valid", split.valid}, {"test", split.test}};
    j["seed"] = seed;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Corpus split

struct CorpusSplit {
  std::vector<std::string> train, valid, test;  // doc ids in corpus order
  std::vector<CitationRecord> train_citations, valid_citations, test_citations;
  size_t dropped_citations = 0;
  std::map<std::string, int> split_of;  // 0 train, 1 valid, 2 test
};

/// Family-level partition. Families are shuffled with `seed` and assigned in
/// that order until each split reaches its share of documents. Citations
/// whose endpoints fall into different splits are dropped and counted.
inline CorpusSplit split_corpus(const std::vector<PatentDocument>& docs,
                                const std::vector<CitationRecord>& citations, SplitFractions f, uint64_t seed) {
  if (f.train < 0 || f.valid < 0 || f.test < 0 || std::abs(f.train + f.valid + f.test - 1.0) > 1e-9) {
    throw UsageError("split fractions must be non-negative and sum to 1");
  }
  std::map<std::string, std::vector<size_t>> families;
  for (size_t i = 0; i < docs.size(); ++i) {
    const auto& fam = docs[i].family_id.empty() ? docs[i].doc_id : docs[i].family_id;
    families[fam].push_back(i);
  }
  std::vector<std::string> order;
  for (const auto& [fam, members] : families) order.push_back(fam);
  Rng rng(seed);
  rng.shuffle(order);

  const double n = static_cast<double>(docs.size());
  const double bounds[2] = {f.train * n, (f.train + f.valid) * n};
  CorpusSplit s;
  size_t assigned = 0;
  std::vector<int> split_of_doc(docs.size(), 2);
  for (const auto& fam : order) {
    const double pos = static_cast<double>(assigned);
    const int which = pos < bounds[0] ? 0 : (pos < bounds[1] ? 1 : 2);
    for (size_t i : families[fam]) split_of_doc[i] = which;
    assigned += families[fam].size();
  }
  for (size_t i = 0; i < docs.size(); ++i) {
    s.split_of[docs[i].doc_id] = split_of_doc[i];
    (split_of_doc[i] == 0 ? s.train : split_of_doc[i] == 1 ? s.valid : s.test).push_back(docs[i].doc_id);
  }
  const double fr[3] = {f.train, f.valid, f.test};
  const std::vector<std::string>* parts[3] = {&s.train, &s.valid, &s.test};
  for (int k = 0; k < 3; ++k) {
    if (fr[k] > 0 && parts[k]->empty()) {
      throw ValidationError("split " + std::to_string(k) + " is empty after family partition");
    }
  }
  for (const auto& c : citations) {
    auto a = s.split_of.find(c.citing), b = s.split_of.find(c.cited);
    if (a == s.split_of.end() || b == s.split_of.end()) {
      throw ValidationError("citation " + c.citing + " -> " + c.cited + " references an unknown document");
    }
    if (a->second != b->second) {
      ++s.dropped_citations;
      continue;
    }
    (a->second == 0 ? s.train_citations : a->second == 1 ? s.valid_citations : s.test_citations).push_back(c);
  }
  return s;
}

/// Evaluation queries of one split: each of its citing documents with X
/// citations, relevant = every X-cited document of the corpus.
inline std::vector<EvalQuery> split_queries(const CorpusSplit& s, int which,
                                            const std::vector<CitationRecord>& all_citations) {
  const auto& ids = which == 0 ? s.train : which == 1 ? s.valid : s.test;
  return build_queries(all_citations, std::set<std::string>(ids.begin(), ids.end()));
}

// ---------------------------------------------------------------------------
// Samples and augmentation

struct TrainingSample {
  std::string citing, cited;
  CitationCategory category = CitationCategory::X;
  GraphKind anchor_kind = GraphKind::FirstClaim;
  GraphKind positive_kind = GraphKind::Description;
  std::string citing_family, cited_family;
  bool trivial = false;
};

/// Sample after augmentation: graph kinds and per-node drop masks.
struct AugmentedSample {
  size_t source = 0;  // index into the epoch's sample list; npos for injected samples
  TrainingSample sample;
  std::vector<bool> anchor_drop, positive_drop;
  bool forced = false;
};

inline constexpr size_t kNoSource = std::numeric_limits<size_t>::max();

/// Node-dropout probability by graph size.
inline double node_dropout_probability(size_t n) {
  if (n <= 5) return 0.0;
  if (n <= 10) return 0.05;
  return 0.10;
}

/// Removes the flagged nodes. Children of a dropped node re-attach to its
/// nearest kept hierarchical ancestor, functional edges touching dropped
/// nodes vanish, and anything cut off from the root is hung under it. The
/// root is never dropped. `kept` receives the old id of each new node.
inline InventionGraph drop_nodes(const InventionGraph& g, const std::vector<bool>& drop,
                                 std::vector<uint32_t>* kept = nullptr) {
  const size_t n = g.nodes.size();
  if (drop.size() != n) throw ShapeError("drop mask size does not match node count");
  auto dropped = [&](uint32_t v) { return drop[v] && v != g.root.value; };
  bool any = false;
  for (uint32_t v = 0; v < n; ++v) any = any || dropped(v);
  if (!any) {
    if (kept) {
      kept->resize(n);
      std::iota(kept->begin(), kept->end(), 0u);
    }
    return g;
  }

  std::vector<int64_t> parent(n, -1);
  for (const Edge& e : g.edges) {
    if (e.kind != EdgeKind::Functional && parent[e.dst.value] < 0) parent[e.dst.value] = e.src.value;
  }
  auto kept_ancestor = [&](uint32_t v) -> uint32_t {
    int64_t p = parent[v];
    size_t guard = 0;
    while (p >= 0 && dropped(static_cast<uint32_t>(p)) && guard++ < n) p = parent[static_cast<size_t>(p)];
    return p < 0 || dropped(static_cast<uint32_t>(p)) ? g.root.value : static_cast<uint32_t>(p);
  };

  std::vector<int64_t> remap(n, -1);
  InventionGraph out;
  out.doc_id = g.doc_id;
  out.kind = g.kind;
  std::vector<uint32_t> old_ids;
  for (uint32_t v = 0; v < n; ++v) {
    if (dropped(v)) continue;
    remap[v] = static_cast<int64_t>(out.nodes.size());
    Node node = g.nodes[v];
    node.id = NodeId{static_cast<uint32_t>(out.nodes.size())};
    out.nodes.push_back(std::move(node));
    old_ids.push_back(v);
  }
  out.root = NodeId{static_cast<uint32_t>(remap[g.root.value])};

  std::set<std::tuple<uint32_t, uint32_t, int>> seen;
  auto add_edge = [&](uint32_t src, uint32_t dst, EdgeKind k) {
    if (src == dst) return;
    if (seen.insert({src, dst, static_cast<int>(k)}).second) out.edges.push_back({NodeId{src}, NodeId{dst}, k});
  };
  for (const Edge& e : g.edges) {
    const uint32_t s = e.src.value, d = e.dst.value;
    if (dropped(d)) continue;
    if (!dropped(s)) {
      add_edge(static_cast<uint32_t>(remap[s]), static_cast<uint32_t>(remap[d]), e.kind);
    } else if (e.kind != EdgeKind::Functional) {
      add_edge(static_cast<uint32_t>(remap[kept_ancestor(d)]), static_cast<uint32_t>(remap[d]), e.kind);
    }
  }

  // Connectivity repair from the root.
  const size_t m = out.nodes.size();
  std::vector<std::vector<uint32_t>> undirected(m);
  for (const Edge& e : out.edges) {
    undirected[e.src.value].push_back(e.dst.value);
    undirected[e.dst.value].push_back(e.src.value);
  }
  std::vector<bool> reach(m, false);
  std::vector<uint32_t> stack{out.root.value};
  reach[out.root.value] = true;
  auto flood = [&]() {
    while (!stack.empty()) {
      const uint32_t v = stack.back();
      stack.pop_back();
      for (uint32_t u : undirected[v]) {
        if (!reach[u]) {
          reach[u] = true;
          stack.push_back(u);
        }
      }
    }
  };
  flood();
  for (uint32_t v = 0; v < m; ++v) {
    if (reach[v]) continue;
    add_edge(out.root.value, v, EdgeKind::PartOf);
    undirected[out.root.value].push_back(v);
    undirected[v].push_back(out.root.value);
    reach[v] = true;
    stack.push_back(v);
    flood();
  }
  if (kept) *kept = std::move(old_ids);
  return out;
}

/// Random drop mask under the size-dependent schedule.
inline std::vector<bool> random_drop_mask(const InventionGraph& g, Rng& rng) {
  const double p = node_dropout_probability(g.nodes.size());
  std::vector<bool> mask(g.nodes.size(), false);
  if (p == 0) return mask;
  for (size_t v = 0; v < mask.size(); ++v) mask[v] = v != g.root.value && rng.bernoulli(p);
  return mask;
}

/// Graphs of the corpus with token ids, prepared once.
struct PreparedGraph {
  InventionGraph graph;
  GraphInput input;
};

class TrainingCorpus {
 public:
  TrainingCorpus(const std::vector<PatentDocument>& docs, const std::vector<CitationRecord>& citations,
                 const GraphStore& graphs, const BpeVocab& vocab, size_t max_node_tokens)
      : index_(docs), vocab_(vocab), max_node_tokens_(max_node_tokens) {
    for (const auto& d : docs) {
      for (GraphKind k : {GraphKind::FirstClaim, GraphKind::AllClaims, GraphKind::Description}) {
        const InventionGraph& g = graphs.get(d.doc_id, k);
        PreparedGraph p{g, prepare_graph(g, vocab, max_node_tokens)};
        prepared_.emplace(std::make_pair(d.doc_id, k), std::move(p));
      }
    }
    for (const auto& c : citations) cited_by_[c.citing].insert(c.cited);
  }

  const CorpusIndex& index() const { return index_; }
  const BpeVocab& vocab() const { return vocab_; }

  const PreparedGraph& graph(const std::string& doc, GraphKind kind) const {
    auto it = prepared_.find({doc, kind});
    if (it == prepared_.end()) {
      throw ValidationError("no " + std::string(to_string(kind)) + " graph for document '" + doc + "'");
    }
    return it->second;
  }

  /// Input after dropping nodes; the cached input when nothing is dropped.
  GraphInput input(const std::string& doc, GraphKind kind, const std::vector<bool>& drop) const {
    const PreparedGraph& p = graph(doc, kind);
    if (std::find(drop.begin(), drop.end(), true) == drop.end()) return p.input;
    std::vector<uint32_t> kept;
    const InventionGraph g = drop_nodes(p.graph, drop, &kept);
    GraphInput in;
    for (uint32_t old : kept) in.node_tokens.push_back(p.input.node_tokens[old]);
    in.adjacency = to_adjacency(g);
    return in;
  }

  bool cites(const std::string& citing, const std::string& cited) const {
    auto it = cited_by_.find(citing);
    return it != cited_by_.end() && it->second.count(cited) > 0;
  }

  TrainingSample make_sample(const CitationRecord& c) const {
    TrainingSample s;
    s.citing = c.citing;
    s.cited = c.cited;
    s.category = c.category;
    s.citing_family = index_.family(c.citing);
    s.cited_family = index_.family(c.cited);
    return s;
  }

  TrainingSample trivial_sample(const std::string& doc) const {
    TrainingSample s;
    s.citing = s.cited = doc;
    s.category = CitationCategory::X;
    s.citing_family = s.cited_family = index_.family(doc);
    s.trivial = true;
    return s;
  }

 private:
  CorpusIndex index_;
  BpeVocab vocab_;
  size_t max_node_tokens_;
  std::map<std::pair<std::string, GraphKind>, PreparedGraph> prepared_;
  std::map<std::string, std::set<std::string>> cited_by_;
};

/// Graph-type augmentation and node dropout for one sample. With
/// probability p exactly one side, chosen uniformly, switches to its
/// AllClaims graph; `force_cited` switches the cited side unconditionally.
inline AugmentedSample augment_sample(const TrainingSample& s, size_t source, const TrainingCorpus& corpus,
                                      const TrainConfig& cfg, Rng& rng, bool force_cited = false) {
  AugmentedSample a;
  a.source = source;
  a.sample = s;
  a.forced = force_cited;
  if (force_cited) {
    a.sample.positive_kind = GraphKind::AllClaims;
  } else if (rng.bernoulli(cfg.graph_type_probability)) {
    if (rng.bernoulli(0.5)) {
      a.sample.anchor_kind = GraphKind::AllClaims;
    } else {
      a.sample.positive_kind = GraphKind::AllClaims;
    }
  }
  const auto& ag = corpus.graph(a.sample.citing, a.sample.anchor_kind).graph;
  const auto& pg = corpus.graph(a.sample.cited, a.sample.positive_kind).graph;
  if (cfg.node_dropout) {
    a.anchor_drop = random_drop_mask(ag, rng);
    a.positive_drop = random_drop_mask(pg, rng);
  } else {
    a.anchor_drop.assign(ag.nodes.size(), false);
    a.positive_drop.assign(pg.nodes.size(), false);
  }
  return a;
}

inline size_t kept_count(const std::vector<bool>& drop) {
  return static_cast<size_t>(std::count(drop.begin(), drop.end(), false));
}

/// Node cost of a sample: anchor plus positive node counts after dropout.
inline size_t sample_cost(const AugmentedSample& a) { return kept_count(a.anchor_drop) + kept_count(a.positive_drop); }

/// Appends ceil(ratio * |batch|) trivial samples (FirstClaim(d) against
/// Description(d)) for documents drawn from the batch.
inline std::vector<AugmentedSample> inject_trivial_citations(std::vector<AugmentedSample> batch,
                                                             const TrainingCorpus& corpus, double ratio, Rng& rng) {
  if (!(ratio >= 0 && ratio <= 1)) throw UsageError("trivial citation ratio must lie in [0, 1]");
  const size_t count = static_cast<size_t>(std::ceil(ratio * static_cast<double>(batch.size()) - 1e-9));
  if (count == 0 || batch.empty()) return batch;
  std::vector<std::string> docs;
  std::set<std::string> seen;
  for (const auto& a : batch) {
    for (const auto* d : {&a.sample.citing, &a.sample.cited}) {
      if (seen.insert(*d).second) docs.push_back(*d);
    }
  }
  rng.shuffle(docs);
  for (size_t i = 0; i < count; ++i) {
    const std::string& d = docs[i % docs.size()];
    AugmentedSample t;
    t.source = kNoSource;
    t.sample = corpus.trivial_sample(d);
    t.anchor_drop.assign(corpus.graph(d, GraphKind::FirstClaim).graph.nodes.size(), false);
    t.positive_drop.assign(corpus.graph(d, GraphKind::Description).graph.nodes.size(), false);
    batch.push_back(std::move(t));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Batching

struct BatchPlan {
  std::vector<std::vector<size_t>> batches;  // indices into the sample list
  size_t skipped_oversize = 0;
};

/// IPC-grouped dynamic batches. Samples are bucketed by key (IPC section and
/// class of the citing document); bucket order and order within buckets are
/// shuffled. A batch is filled from the current bucket, spilling to the
/// nearest non-empty bucket in key order, until the next sample would exceed
/// the node budget.
inline BatchPlan build_batches(const std::vector<size_t>& costs, const std::vector<std::string>& keys,
                               size_t node_budget, Rng& rng) {
  if (costs.size() != keys.size()) throw ShapeError("build_batches: costs and keys differ in length");
  BatchPlan plan;
  std::map<std::string, std::vector<size_t>> by_key;
  for (size_t i = 0; i < costs.size(); ++i) {
    if (costs[i] > node_budget) {
      ++plan.skipped_oversize;
      continue;
    }
    by_key[keys[i]].push_back(i);
  }
  std::vector<std::vector<size_t>> buckets;
  for (auto& [k, v] : by_key) buckets.push_back(std::move(v));
  for (auto& b : buckets) rng.shuffle(b);
  std::vector<size_t> visit(buckets.size());
  std::iota(visit.begin(), visit.end(), size_t{0});
  rng.shuffle(visit);
  std::vector<size_t> cursor(buckets.size(), 0);
  auto remaining = [&](size_t b) { return cursor[b] < buckets[b].size(); };
  auto nearest = [&](size_t from) -> std::optional<size_t> {
    for (size_t d = 1; d < buckets.size(); ++d) {
      if (from >= d && remaining(from - d)) return from - d;
      if (from + d < buckets.size() && remaining(from + d)) return from + d;
    }
    return std::nullopt;
  };

  size_t v = 0;
  std::vector<size_t> batch;
  size_t cost = 0;
  std::optional<size_t> current;
  for (;;) {
    if (!current || !remaining(*current)) {
      std::optional<size_t> next;
      if (current && !batch.empty()) next = nearest(*current);
      if (!next) {
        while (v < visit.size() && !remaining(visit[v])) ++v;
        if (v < visit.size()) next = visit[v];
      }
      if (!next) break;
      current = next;
    }
    const size_t idx = buckets[*current][cursor[*current]];
    if (cost + costs[idx] > node_budget) {
      plan.batches.push_back(std::move(batch));
      batch.clear();
      cost = 0;
      continue;
    }
    batch.push_back(idx);
    cost += costs[idx];
    ++cursor[*current];
  }
  if (!batch.empty()) plan.batches.push_back(std::move(batch));
  return plan;
}

// ---------------------------------------------------------------------------
// Mining and loss

inline double triplet_loss(double d_ap, double d_an, double margin) { return std::max(0.0, d_ap - d_an + margin); }

inline double cosine_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += double(a[i]) * b[i];
  return 1.0 - s;
}

struct MiningAnchor {
  std::string citing, positive;
  std::string citing_family, positive_family;
  size_t embedding = 0;  // row in the anchor embedding table
  double margin = 0.4;
  size_t positive_embedding = 0;  // row in the candidate table
};

struct MiningCandidate {
  std::string doc_id, family;
  size_t embedding = 0;  // row in the candidate table
};

/// Hardest (or semi-hard) in-batch negative per anchor as a candidate index;
/// nullopt when no candidate is eligible. Ties go to the lowest index.
inline std::vector<std::optional<size_t>> mine_hard_negatives(
    const std::vector<std::vector<float>>& anchor_emb, const std::vector<std::vector<float>>& candidate_emb,
    const std::vector<MiningAnchor>& anchors, const std::vector<MiningCandidate>& candidates,
    const std::function<bool(const std::string&, const std::string&)>& cites, bool semi_hard = false) {
  std::vector<std::optional<size_t>> out(anchors.size());
  for (size_t i = 0; i < anchors.size(); ++i) {
    const auto& a = anchors[i];
    const auto& ae = anchor_emb[a.embedding];
    const double d_ap = cosine_distance(ae, candidate_emb[a.positive_embedding]);
    std::optional<size_t> hardest, semi;
    double best = std::numeric_limits<double>::infinity(), best_semi = best;
    for (size_t c = 0; c < candidates.size(); ++c) {
      const auto& cand = candidates[c];
      if (cand.doc_id == a.positive || cand.doc_id == a.citing) continue;
      if (cand.family == a.citing_family || cand.family == a.positive_family) continue;
      if (cites(a.citing, cand.doc_id)) continue;
      const double d = cosine_distance(ae, candidate_emb[cand.embedding]);
      if (d < best) {
        best = d;
        hardest = c;
      }
      if (semi_hard && d > d_ap && d < best_semi) {
        best_semi = d;
        semi = c;
      }
    }
    out[i] = semi_hard && semi ? semi : hardest;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename Real>
struct AdamWState {
  std::vector<Tensor<Real>> m, v;
  uint64_t t = 0;
};

/// One AdamW step with decoupled decay p <- p - lr*wd*p on masked tensors.
/// `lr_scale`, when non-empty, multiplies the learning rate per tensor.
/// Rejects the whole step if any gradient is non-finite.
template <typename Real>
void adamw_step(const std::vector<Tensor<Real>*>& params, const std::vector<Tensor<Real>>& grads,
                const std::vector<bool>& decay_mask, AdamWState<Real>& st, double lr, const AdamWConfig& c,
                const std::vector<double>& lr_scale = {}) {
  if (params.size() != grads.size() || params.size() != decay_mask.size() ||
      (!lr_scale.empty() && lr_scale.size() != params.size())) {
    throw ShapeError("adamw: parameter and gradient counts differ");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape != grads[i].shape) throw ShapeError("adamw: gradient shape mismatch");
    if (!grads[i].all_finite()) throw NumericFault("adamw: non-finite gradient in tensor " + std::to_string(i));
  }
  if (st.m.empty()) {
    for (const auto* p : params) {
      st.m.emplace_back(p->shape);
      st.v.emplace_back(p->shape);
    }
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.t));
  for (size_t i = 0; i < params.size(); ++i) {
    Real* p = params[i]->data.data();
    const Real* g = grads[i].data.data();
    Real* m = st.m[i].data.data();
    Real* v = st.v[i].data.data();
    const double lr_i = lr_scale.empty() ? lr : lr * lr_scale[i];
    const double decay = decay_mask[i] ? lr_i * c.weight_decay : 0.0;
    for (size_t k = 0; k < grads[i].size(); ++k) {
      m[k] = static_cast<Real>(c.beta1 * m[k] + (1 - c.beta1) * g[k]);
      v[k] = static_cast<Real>(c.beta2 * v[k] + (1 - c.beta2) * double(g[k]) * g[k]);
      const double mhat = m[k] / bc1, vhat = v[k] / bc2;
      p[k] = static_cast<Real>(p[k] - decay * p[k] - lr_i * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

/// Decay applies to true matrices only; vectors (biases, gains, scales) are exempt.
template <typename Real>
std::vector<bool> decay_mask(const EncoderParams<Real>& p) {
  std::vector<bool> mask;
  for (const auto& [name, t] : p.named()) mask.push_back(t->shape.size() == 2 && t->rows() > 1 && t->cols() > 1);
  return mask;
}

// ---------------------------------------------------------------------------
// Schedules

/// Plateau LR halving and early stopping on a metric that should increase.
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, double floor, size_t plateau_patience, double factor, size_t stop_patience)
      : lr_(lr), floor_(floor), plateau_patience_(plateau_patience), factor_(factor),
        stop_patience_(stop_patience) {}

  /// Records one evaluation; returns true when the metric improved.
  bool observe(double metric) {
    ++evals_;
    if (metric > best_) {
      best_ = metric;
      best_eval_ = evals_;
      plateau_ = 0;
      stale_ = 0;
      return true;
    }
    ++stale_;
    if (++plateau_ >= plateau_patience_) {
      lr_ = std::max(floor_, lr_ / factor_);
      plateau_ = 0;
    }
    return false;
  }

  bool should_stop() const { return stale_ >= stop_patience_; }
  double lr() const { return lr_; }
  double best() const { return best_; }
  size_t best_eval() const { return best_eval_; }  // 1-based, 0 before any improvement

 private:
  double lr_, floor_;
  size_t plateau_patience_;
  double factor_;
  size_t stop_patience_;
  double best_ = -std::numeric_limits<double>::infinity();
  size_t best_eval_ = 0, evals_ = 0, plateau_ = 0, stale_ = 0;
};

/// Batch indices after which an evaluation runs: floor(N/E), 2 floor(N/E), ..., N.
inline std::vector<size_t> eval_points(size_t n_batches, size_t evals_per_epoch) {
  std::vector<size_t> pts;
  if (n_batches == 0) return pts;
  const size_t every = std::max<size_t>(1, n_batches / evals_per_epoch);
  for (size_t e = 1; e < evals_per_epoch; ++e) {
    if (e * every < n_batches) pts.push_back(e * every);
  }
  pts.push_back(n_batches);
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  return pts;
}

// ---------------------------------------------------------------------------
// Training step

struct StepResult {
  double loss = 0;
  size_t anchors = 0;     // anchors contributing to the loss
  size_t skipped = 0;     // anchors without an eligible negative
  size_t graphs = 0;
  std::vector<std::pair<size_t, double>> sample_losses;  // (source, loss) for non-injected samples
};

inline constexpr size_t kGradientShards = 16;

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const TrainingCorpus& corpus, EncoderConfig enc, EncoderParams<float> params)
      : cfg_(cfg), corpus_(corpus), enc_(std::move(enc)), params_(std::move(params)) {
    check_shapes(params_, enc_);
    mask_ = decay_mask(params_);
    for (const auto& [name, t] : params_.named()) {
      lr_scale_.push_back(name == "token_embedding" ? cfg_.token_embedding_lr_scale : 1.0);
    }
  }

  const EncoderParams<float>& params() const { return params_; }
  EncoderParams<float>& mutable_params() { return params_; }
  const EncoderConfig& encoder_config() const { return enc_; }
  const AdamWState<float>& optimizer_state() const { return adam_; }

  /// Forward, mine, backward and update on one batch. Dropout streams derive
  /// from (seed, step, graph) so the result is independent of thread count.
  StepResult step(const std::vector<AugmentedSample>& batch, double lr, uint64_t step_index) {
    StepResult res;
    const size_t S = batch.size();
    if (S == 0) return res;

    // Graph list: anchors 0..S-1, then deduplicated positives.
    std::vector<GraphInput> inputs;
    inputs.reserve(2 * S);
    std::vector<MiningAnchor> anchors(S);
    std::vector<MiningCandidate> candidates;
    std::map<std::string, size_t> candidate_of;
    std::vector<size_t> positive_graph(S);
    for (size_t i = 0; i < S; ++i) {
      const auto& a = batch[i];
      inputs.push_back(corpus_.input(a.sample.citing, a.sample.anchor_kind, a.anchor_drop));
    }
    for (size_t i = 0; i < S; ++i) {
      const auto& a = batch[i];
      auto it = candidate_of.find(a.sample.cited);
      if (it == candidate_of.end()) {
        const size_t c = candidates.size();
        candidates.push_back({a.sample.cited, a.sample.cited_family, c});
        candidate_of.emplace(a.sample.cited, c);
        inputs.push_back(corpus_.input(a.sample.cited, a.sample.positive_kind, a.positive_drop));
        positive_graph[i] = c;
      } else {
        positive_graph[i] = it->second;
      }
      anchors[i] = {a.sample.citing, a.sample.cited, a.sample.citing_family, a.sample.cited_family,
                    i, cfg_.margins.of(a.sample.category), positive_graph[i]};
    }
    const size_t G = inputs.size();
    res.graphs = G;

    // Forward with tapes kept for the backward pass.
    std::vector<std::unique_ptr<Tape<float>>> tapes(G);
    std::vector<Var> outs(G);
    std::vector<std::vector<float>> emb(G);
    parallel_for(G, cfg_.threads, [&](size_t g) {
      tapes[g] = std::make_unique<Tape<float>>(true);
      Rng rng(text::derive_seed(cfg_.seed, step_index, g));
      ForwardOptions<float> opt;
      opt.training = true;
      opt.rng = &rng;
      outs[g] = encode(*tapes[g], params_, inputs[g], enc_, opt);
      emb[g] = tapes[g]->value(outs[g]).data;
    });

    std::vector<std::vector<float>> anchor_emb(emb.begin(), emb.begin() + static_cast<long>(S));
    std::vector<std::vector<float>> cand_emb(emb.begin() + static_cast<long>(S), emb.end());
    const auto negatives = mine_hard_negatives(
        anchor_emb, cand_emb, anchors, candidates,
        [&](const std::string& a, const std::string& b) { return corpus_.cites(a, b); }, cfg_.semi_hard);

    // Loss and embedding gradients.
    const size_t d = enc_.d_out();
    std::vector<std::vector<double>> seed(G, std::vector<double>(d, 0.0));
    size_t active = 0;
    for (size_t i = 0; i < S; ++i) active += negatives[i].has_value();
    res.anchors = active;
    res.skipped = S - active;
    double total = 0;
    for (size_t i = 0; i < S; ++i) {
      if (!negatives[i]) continue;
      const auto& ea = anchor_emb[i];
      const auto& ep = cand_emb[positive_graph[i]];
      const auto& en = cand_emb[*negatives[i]];
      const double d_ap = cosine_distance(ea, ep), d_an = cosine_distance(ea, en);
      const double l = triplet_loss(d_ap, d_an, anchors[i].margin);
      total += l;
      if (batch[i].source != kNoSource) res.sample_losses.emplace_back(batch[i].source, l);
      if (l <= 0) continue;
      const double inv = 1.0 / static_cast<double>(active);
      auto& ga = seed[i];
      auto& gp = seed[S + positive_graph[i]];
      auto& gn = seed[S + *negatives[i]];
      for (size_t k = 0; k < d; ++k) {
        ga[k] += (double(en[k]) - ep[k]) * inv;
        gp[k] -= ea[k] * inv;
        gn[k] += ea[k] * inv;
      }
    }
    res.loss = active ? total / static_cast<double>(active) : 0.0;
    if (active == 0) return res;

    // Backward into fixed gradient shards, then an ordered reduction.
    auto named = params_.named();
    std::vector<std::vector<Tensor<float>>> shard_grads(kGradientShards);
    parallel_for(kGradientShards, cfg_.threads, [&](size_t s) {
      auto& acc = shard_grads[s];
      for (size_t g = s; g < G; g += kGradientShards) {
        bool any = false;
        for (double v : seed[g]) any = any || v != 0.0;
        if (any) {
          Tensor<float> sd({1, d});
          for (size_t k = 0; k < d; ++k) sd.data[k] = static_cast<float>(seed[g][k]);
          tapes[g]->backward(outs[g], sd);
          if (acc.empty()) {
            for (const auto& [name, t] : named) acc.emplace_back(t->shape);
          }
          tapes[g]->param_grads([&](int slot, const Tensor<float>& gr) {
            auto& dst = acc[static_cast<size_t>(slot)].data;
            for (size_t k = 0; k < gr.size(); ++k) dst[k] += gr.data[k];
          });
        }
        tapes[g].reset();
      }
    });
    std::vector<Tensor<float>> grads;
    for (const auto& [name, t] : named) grads.emplace_back(t->shape);
    for (const auto& acc : shard_grads) {
      if (acc.empty()) continue;
      for (size_t p = 0; p < grads.size(); ++p) {
        for (size_t k = 0; k < grads[p].size(); ++k) grads[p].data[k] += acc[p].data[k];
      }
    }
    std::vector<Tensor<float>*> ptrs;
    for (auto& [name, t] : named) ptrs.push_back(t);
    adamw_step(ptrs, grads, mask_, adam_, lr, cfg_.adamw, lr_scale_);
    return res;
  }

 private:
  TrainConfig cfg_;
  const TrainingCorpus& corpus_;
  EncoderConfig enc_;
  EncoderParams<float> params_;
  std::vector<bool> mask_;
  std::vector<double> lr_scale_;
  AdamWState<float> adam_;
};

// ---------------------------------------------------------------------------
// Model evaluation

/// Recall@k / nDCG@k of a parameter set: queries embed their FirstClaim
/// graph, the pool holds Description graphs.
inline EvalReport evaluate_model(const EncoderParams<float>& params, const EncoderConfig& enc,
                                 const TrainingCorpus& corpus, const std::vector<EvalQuery>& queries,
                                 const std::vector<std::string>& pool, size_t threads, size_t k_recall = 3,
                                 size_t k_ndcg = 150) {
  std::vector<const GraphInput*> pool_inputs, query_inputs;
  for (const auto& id : pool) pool_inputs.push_back(&corpus.graph(id, GraphKind::Description).input);
  for (const auto& q : queries) query_inputs.push_back(&corpus.graph(q.doc_id, GraphKind::FirstClaim).input);
  const auto pool_emb = embed_all(params, enc, pool_inputs, threads);
  const auto query_emb = embed_all(params, enc, query_inputs, threads);
  const VectorIndex index = build_index(pool, pool_emb);
  std::map<std::string, std::vector<float>> qmap;
  for (size_t i = 0; i < queries.size(); ++i) qmap[queries[i].doc_id] = query_emb[i];
  return evaluate_run(queries, index_search_fn(index, qmap), corpus.index(), pool.size(), k_recall, k_ndcg,
                      RecallMode::MeanOverRelevant, threads);
}

// ---------------------------------------------------------------------------
// Stage driver

struct EvalRecord {
  uint64_t step = 0;
  size_t epoch = 0;
  double loss = 0;
  double recall_at_3 = 0;
  double lr = 0;
  double elapsed_seconds = 0;
  std::string timestamp;

  nlohmann::ordered_json to_json() const {
    return {{"step", step}, {"epoch", epoch}, {"loss", loss}, {"recall_at_3", recall_at_3},
            {"lr", lr},     {"timestamp", timestamp}};
  }
};

struct StageData {
  const TrainingCorpus* corpus = nullptr;
  std::vector<CitationRecord> train_citations;
  std::vector<EvalQuery> valid_queries;
  std::vector<std::string> valid_pool;
};

struct StageResult {
  Checkpoint best;
  std::vector<EvalRecord> log;
  double best_recall = 0;
  uint64_t steps = 0;
  size_t epochs = 0;
  size_t skipped_oversize = 0;
  bool early_stopped = false;
  bool time_limited = false;
};

using EvalCallback = std::function<void(const EvalRecord&)>;

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Trains one stage. Base starts from fresh parameters; Reduced requires a
/// Base checkpoint, adds the MoE projection and fine-tunes everything.
inline StageResult run_stage(Stage stage, const StageData& data, const TrainConfig& cfg, const BpeVocab& vocab,
                             const std::optional<Checkpoint>& base = std::nullopt,
                             const EvalCallback& on_eval = nullptr) {
  cfg.validate();
  if (!data.corpus) throw UsageError("run_stage: no training corpus");
  if (data.valid_queries.empty()) throw ValidationError("run_stage: no validation queries");
  const TrainingCorpus& corpus = *data.corpus;

  EncoderConfig enc;
  EncoderParams<float> init;
  if (stage == Stage::Base) {
    enc = cfg.encoder;
    enc.vocab_size = vocab.size();
    enc.embedding_dropout_p = cfg.embedding_dropout_p;
    enc.stage = Stage::Base;
    init = init_params<float>(enc, cfg.seed);
  } else {
    if (!base) throw UsageError("the reduce stage requires a base-stage checkpoint");
    if (base->config.stage != Stage::Base) throw ValidationError("resume checkpoint is not a base-stage checkpoint");
    if (!(base->vocab == vocab)) throw ValidationError("resume checkpoint tokenizer differs from the training data");
    enc = base->config;
    enc.stage = Stage::Reduced;
    enc.embedding_dropout_p = cfg.embedding_dropout_p;
    init = base->params;
    add_moe(init, enc, cfg.seed);
  }
  enc.validate();

  Trainer trainer(cfg, corpus, enc, std::move(init));
  std::vector<TrainingSample> samples;
  for (const auto& c : data.train_citations) samples.push_back(corpus.make_sample(c));
  if (samples.empty()) throw ValidationError("run_stage: no training citations");

  std::vector<EvalQuery> vq = data.valid_queries;
  if (cfg.max_valid_queries > 0 && vq.size() > cfg.max_valid_queries) vq.resize(cfg.max_valid_queries);

  StageResult res;
  PlateauSchedule sched(cfg.lr, cfg.lr_floor, cfg.plateau_patience, cfg.plateau_factor, cfg.early_stop_patience);
  std::vector<double> last_loss(samples.size(), std::numeric_limits<double>::quiet_NaN());
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&]() { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  double loss_sum = 0;
  size_t loss_n = 0;
  uint64_t step = 0;
  bool stop = false;
  auto evaluate = [&](size_t epoch) {
    const EvalReport rep = evaluate_model(trainer.params(), enc, corpus, vq, data.valid_pool, cfg.threads);
    EvalRecord r;
    r.step = step;
    r.epoch = epoch;
    r.loss = loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0;
    r.recall_at_3 = rep.recall_at_k;
    r.lr = sched.lr();
    r.elapsed_seconds = elapsed();
    r.timestamp = utc_timestamp();
    loss_sum = 0;
    loss_n = 0;
    if (sched.observe(rep.recall_at_k)) {
      res.best.config = enc;
      res.best.vocab = vocab;
      res.best.params = trainer.params();
      res.best_recall = rep.recall_at_k;
      res.best.training = {{"stage", std::string(to_string(stage))},
                           {"best_step", step},
                           {"best_epoch", epoch},
                           {"valid_recall_at_3", rep.recall_at_k},
                           {"config", cfg.to_json()}};
    }
    res.log.push_back(r);
    if (on_eval) on_eval(r);
    if (sched.should_stop()) {
      res.early_stopped = true;
      stop = true;
    }
  };

  for (size_t epoch = 1; epoch <= cfg.max_epochs && !stop; ++epoch) {
    Rng rng(text::derive_seed(cfg.seed, 0xe90c, epoch));
    // Easiest decile by the loss each sample had at its last step.
    std::vector<bool> force(samples.size(), false);
    if (cfg.easy_decile_forcing && epoch >= 2) {
      std::vector<size_t> scored;
      for (size_t i = 0; i < samples.size(); ++i) {
        if (!std::isnan(last_loss[i])) scored.push_back(i);
      }
      std::stable_sort(scored.begin(), scored.end(),
                       [&](size_t a, size_t b) { return last_loss[a] < last_loss[b]; });
      const size_t decile = scored.size() / 10;
      for (size_t k = 0; k < decile; ++k) force[scored[k]] = true;
    }
    std::vector<AugmentedSample> aug;
    aug.reserve(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) aug.push_back(augment_sample(samples[i], i, corpus, cfg, rng, force[i]));
    std::vector<size_t> costs;
    std::vector<std::string> keys;
    for (const auto& a : aug) {
      costs.push_back(sample_cost(a));
      keys.push_back(corpus.index().ipc(a.sample.citing).substr(0, cfg.ipc_key_chars));
    }
    const BatchPlan plan = build_batches(costs, keys, cfg.node_budget, rng);
    res.skipped_oversize += plan.skipped_oversize;
    const auto points = eval_points(plan.batches.size(), cfg.evals_per_epoch);
    size_t next_point = 0;
    for (size_t b = 0; b < plan.batches.size() && !stop; ++b) {
      std::vector<AugmentedSample> batch;
      for (size_t idx : plan.batches[b]) batch.push_back(aug[idx]);
      batch = inject_trivial_citations(std::move(batch), corpus, cfg.trivial_ratio, rng);
      const StepResult sr = trainer.step(batch, sched.lr(), step);
      ++step;
      loss_sum += sr.loss;
      ++loss_n;
      for (const auto& [src, l] : sr.sample_losses) last_loss[src] = l;
      const bool out_of_time = cfg.time_budget_seconds > 0 && elapsed() > cfg.time_budget_seconds;
      const bool out_of_steps = cfg.max_steps > 0 && step >= cfg.max_steps;
      if (next_point < points.size() && b + 1 == points[next_point]) {
        ++next_point;
        evaluate(epoch);
      } else if (out_of_time || out_of_steps) {
        evaluate(epoch);
      }
      if (out_of_time) res.time_limited = true;
      if (out_of_time || out_of_steps) stop = true;
    }
    res.epochs = epoch;
  }
  res.steps = step;
  if (sched.best_eval() == 0) throw NumericFault("training produced no evaluation");
  return res;
}

}  // namespace patgraph
