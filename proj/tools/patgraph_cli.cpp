#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "patgraph/checkpoint.hpp"
#include "patgraph/claim_parser.hpp"
#include "patgraph/config.hpp"
#include "patgraph/corpus.hpp"
#include "patgraph/embedding.hpp"
#include "patgraph/encoder.hpp"
#include "patgraph/eval.hpp"
#include "patgraph/graph.hpp"
#include "patgraph/parallel.hpp"
#include "patgraph/retrieval.hpp"
#include "patgraph/synth.hpp"
#include "patgraph/tokenizer.hpp"
#include "patgraph/trainer.hpp"

namespace fs = std::filesystem;
using namespace patgraph;
using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Manifest: one JSON file per working directory recording what each stage
// produced, from which inputs and with which configuration.

std::string file_hash(const std::string& path) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(text::fnv1a(read_file(path))));
  return buf;
}

std::string string_hash(const std::string& s) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(text::fnv1a(s)));
  return buf;
}

class Manifest {
 public:
  explicit Manifest(std::string path) : path_(std::move(path)) {
    if (fs::exists(path_)) {
      try {
        data_ = json::parse(read_file(path_));
      } catch (const json::exception& e) {
        throw SchemaError("malformed manifest " + path_ + ": " + e.what());
      }
    }
    if (!data_.is_object()) data_ = json::object();
    if (!data_.contains("stages")) data_["stages"] = json::object();
  }

  /// Verifies an input exists; names the producing stage when it does not and
  /// warns when the file changed since that stage recorded it.
  void require_input(const std::string& path, const std::string& producer) const {
    if (!fs::exists(path)) {
      throw IoError("missing input '" + path + "' (produced by `patgraph " + producer + "`)");
    }
    const std::string canon = canonical(path);
    for (const auto& [stage, entry] : data_["stages"].items()) {
      if (!entry.contains("outputs")) continue;
      for (const auto& [out, hash] : entry["outputs"].items()) {
        if (out == canon && hash.get<std::string>() != file_hash(path)) {
          std::cerr << "warning: " << path << " changed since stage '" << stage << "' recorded it\n";
        }
      }
    }
  }

  void record(const std::string& stage, const std::vector<std::string>& inputs,
              const std::vector<std::string>& outputs, const std::string& config_hash) {
    json entry;
    entry["complete"] = true;
    entry["config_hash"] = config_hash;
    json in = json::object(), out = json::object();
    for (const auto& p : inputs) in[canonical(p)] = file_hash(p);
    for (const auto& p : outputs) out[canonical(p)] = file_hash(p);
    entry["inputs"] = in;
    entry["outputs"] = out;
    auto& stages = data_["stages"];
    if (stages.contains(stage) && stages[stage].contains("config_hash") &&
        stages[stage]["config_hash"].get<std::string>() != config_hash) {
      std::cerr << "note: stage '" << stage << "' re-run with a different configuration\n";
    }
    stages[stage] = entry;
    write_file(path_, data_.dump(2) + "\n");
  }

 private:
  static std::string canonical(const std::string& p) { return fs::weakly_canonical(p).string(); }

  std::string path_;
  json data_;
};

std::string manifest_path(const std::string& flag, const std::string& output) {
  if (!flag.empty()) return flag;
  fs::path out(output);
  const fs::path dir = fs::is_directory(out) ? out : out.parent_path();
  return ((dir.empty() ? fs::path(".") : dir) / "manifest.json").string();
}

std::optional<uint64_t> env_seed() {
  const char* s = std::getenv("PATGRAPH_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0') throw UsageError("PATGRAPH_SEED must be an unsigned integer");
  return static_cast<uint64_t>(v);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

GraphKind kind_flag(const std::string& s) {
  auto k = parse_graph_kind(s);
  if (!k) throw UsageError("unknown graph kind '" + s + "' (first_claim, all_claims, description)");
  return *k;
}

/// Text of every node of every graph, the tokenizer's training corpus.
std::vector<std::string> node_texts(const std::vector<InventionGraph>& graphs) {
  std::vector<std::string> out;
  for (const auto& g : graphs) {
    for (const auto& n : g.nodes) out.push_back(n.text);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

struct Common {
  std::string manifest;
  size_t threads = hardware_threads();
};

int cmd_gen_corpus(const Common& c, const std::string& config, const std::string& out) {
  GeneratorConfig g;
  std::string cfg_text;
  if (!config.empty()) {
    const auto kv = KeyValues::load(config);
    g.read(kv);
    kv.require_all_used();
    cfg_text = read_file(config);
  }
  if (auto s = env_seed()) g.seed = *s;
  const auto corpus = generate(g);
  ensure_dir(out);
  const std::string docs = (fs::path(out) / "corpus.jsonl").string();
  const std::string cites = (fs::path(out) / "citations.jsonl").string();
  write_documents(docs, corpus.documents);
  write_citations(cites, corpus.citations);
  Manifest m(manifest_path(c.manifest, out));
  m.record("gen-corpus", config.empty() ? std::vector<std::string>{} : std::vector<std::string>{config},
           {docs, cites}, string_hash(g.to_json().dump()));
  std::cout << "documents\t" << corpus.documents.size() << "\ncitations\t" << corpus.citations.size() << "\n";
  return 0;
}

int cmd_build_graphs(const Common& c, const std::string& corpus_path, const std::string& out) {
  Manifest m(manifest_path(c.manifest, out));
  m.require_input(corpus_path, "gen-corpus");
  const auto docs = read_documents(corpus_path);
  std::vector<DocumentGraphs> parsed(docs.size());
  parallel_for(docs.size(), c.threads, [&](size_t i) { parsed[i] = parse_document(docs[i]); });
  std::vector<InventionGraph> graphs;
  std::map<GraphKind, size_t> counts;
  size_t nodes = 0;
  for (auto& p : parsed) {
    for (auto* g : {&p.first_claim, &p.all_claims, &p.description}) {
      ++counts[g->kind];
      nodes += g->nodes.size();
      graphs.push_back(std::move(*g));
    }
  }
  write_graph_corpus(out, graphs);
  m.record("build-graphs", {corpus_path}, {out}, string_hash("parser-v1"));
  for (const auto& [k, n] : counts) std::cout << to_string(k) << "\t" << n << "\n";
  std::cout << "nodes\t" << nodes << "\n";
  return 0;
}

int cmd_train_tokenizer(const Common& c, const std::string& graphs_path, size_t vocab_size, const std::string& out) {
  Manifest m(manifest_path(c.manifest, out));
  m.require_input(graphs_path, "build-graphs");
  const auto graphs = read_graph_corpus(graphs_path);
  const auto texts = node_texts(graphs);
  const auto vocab = BpeVocab::train(texts, vocab_size);
  vocab.save(out);
  m.record("train-tokenizer", {graphs_path}, {out}, string_hash(std::to_string(vocab_size)));
  std::cout << "vocab_size\t" << vocab.size() << "\nmerges\t" << vocab.merges().size() << "\n";
  return 0;
}

struct TrainArgs {
  std::string stage = "base";
  std::string graphs, citations, corpus, vocab, config, out, resume;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  const Stage stage = parse_stage(a.stage);
  if (stage == Stage::Reduced && a.resume.empty()) {
    throw UsageError("train --stage reduce requires --resume <base checkpoint>");
  }
  Manifest m(manifest_path(c.manifest, a.out));
  m.require_input(a.corpus, "gen-corpus");
  m.require_input(a.citations, "gen-corpus");
  m.require_input(a.graphs, "build-graphs");
  m.require_input(a.vocab, "train-tokenizer");
  if (!a.resume.empty()) m.require_input(a.resume, "train --stage base");

  TrainConfig cfg;
  std::string cfg_text;
  if (!a.config.empty()) {
    m.require_input(a.config, "(user-supplied config)");
    cfg = TrainConfig::from_key_values(KeyValues::load(a.config));
    cfg_text = read_file(a.config);
  }
  if (auto s = env_seed()) cfg.seed = *s;
  cfg.threads = c.threads;

  const auto docs = read_documents(a.corpus);
  const auto cites = read_citations(a.citations);
  const GraphStore graphs(read_graph_corpus(a.graphs));
  const auto vocab = BpeVocab::load(a.vocab);
  std::optional<Checkpoint> base;
  if (!a.resume.empty()) base = load_checkpoint(a.resume);
  const size_t max_tokens = base ? base->config.max_node_tokens : cfg.encoder.max_node_tokens;

  const CorpusSplit split = split_corpus(docs, cites, cfg.split, cfg.seed);
  const TrainingCorpus corpus(docs, cites, graphs, vocab, max_tokens);
  StageData data;
  data.corpus = &corpus;
  data.train_citations = split.train_citations;
  data.valid_queries = split_queries(split, 1, cites);
  for (const auto& d : docs) data.valid_pool.push_back(d.doc_id);

  ensure_dir(a.out);
  const fs::path dir(a.out);
  const std::string log_path = (dir / (std::string(to_string(stage)) + "_log.jsonl")).string();
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw IoError("cannot write " + log_path);
  const auto res = run_stage(stage, data, cfg, vocab, base, [&](const EvalRecord& r) {
    log << r.to_json().dump() << "\n";
    log.flush();
    std::cerr << "step " << r.step << " epoch " << r.epoch << " loss " << r.loss << " recall@3 " << r.recall_at_3
              << " lr " << r.lr << "\n";
  });
  const std::string ckpt = (dir / (std::string(to_string(stage)) + ".ckpt")).string();
  save_checkpoint(ckpt, res.best);

  std::vector<std::string> outputs = {ckpt};
  if (stage == Stage::Base) {
    const std::string vq = (dir / "valid_queries.jsonl").string();
    const std::string tq = (dir / "test_queries.jsonl").string();
    write_queries(vq, data.valid_queries);
    write_queries(tq, split_queries(split, 2, cites));
    json sj;
    sj["seed"] = cfg.seed;
    sj["train"] = split.train;
    sj["valid"] = split.valid;
    sj["test"] = split.test;
    sj["dropped_citations"] = split.dropped_citations;
    const std::string sp = (dir / "split.json").string();
    write_file(sp, sj.dump(1) + "\n");
    outputs.insert(outputs.end(), {vq, tq, sp});
  }
  std::vector<std::string> inputs = {a.corpus, a.citations, a.graphs, a.vocab};
  if (!a.resume.empty()) inputs.push_back(a.resume);
  m.record(std::string("train-") + std::string(to_string(stage)), inputs, outputs,
           string_hash(cfg.to_json().dump() + cfg_text));
  std::cout << "best_recall_at_3\t" << res.best_recall << "\nsteps\t" << res.steps << "\nepochs\t" << res.epochs
            << "\ncheckpoint\t" << ckpt << "\n";
  if (res.skipped_oversize) std::cerr << "warning: " << res.skipped_oversize << " oversize samples skipped\n";
  return 0;
}

int cmd_embed(const Common& c, const std::string& ckpt_path, const std::string& graphs_path,
              const std::string& kind_name, const std::string& out) {
  Manifest m(manifest_path(c.manifest, out));
  m.require_input(ckpt_path, "train");
  m.require_input(graphs_path, "build-graphs");
  const GraphKind kind = kind_flag(kind_name);
  const auto ck = load_checkpoint(ckpt_path);
  const auto all = read_graph_corpus(graphs_path);
  std::vector<std::string> ids;
  std::vector<GraphInput> inputs;
  for (const auto& g : all) {
    if (g.kind != kind) continue;
    ids.push_back(g.doc_id);
    inputs.push_back(prepare_graph(g, ck.vocab, ck.config.max_node_tokens));
  }
  if (ids.empty()) throw ValidationError("no " + kind_name + " graphs in " + graphs_path);
  std::vector<const GraphInput*> ptrs;
  for (const auto& in : inputs) ptrs.push_back(&in);
  const auto rows = embed_all(ck.params, ck.config, ptrs, c.threads);
  build_index(ids, rows).save(out);
  m.record("embed", {ckpt_path, graphs_path}, {out}, string_hash(kind_name));
  std::cout << "embedded\t" << ids.size() << "\ndim\t" << ck.config.d_out() << "\n";
  return 0;
}

/// Query embedding of one document from the graphs file.
std::vector<float> embed_query(const Checkpoint& ck, const GraphStore& store, const std::string& doc, GraphKind kind) {
  const auto& g = store.get(doc, kind);
  return embed(ck.params, prepare_graph(g, ck.vocab, ck.config.max_node_tokens), ck.config);
}

void check_index_matches(const VectorIndex& index, const Checkpoint& ck) {
  if (index.dim() != ck.config.d_out()) {
    throw ValidationError("index dimension " + std::to_string(index.dim()) + " does not match checkpoint (" +
                          std::to_string(ck.config.d_out()) + "); re-run `patgraph embed` with this checkpoint");
  }
}

int cmd_search(const Common& c, const std::string& index_path, const std::string& ckpt_path,
               const std::string& graphs_path, const std::string& doc, const std::string& kind_name, size_t k,
               bool exclude_self) {
  Manifest m(manifest_path(c.manifest, index_path));
  m.require_input(index_path, "embed");
  m.require_input(ckpt_path, "train");
  m.require_input(graphs_path, "build-graphs");
  if (k == 0) throw UsageError("-k must be >= 1");
  const auto ck = load_checkpoint(ckpt_path);
  const auto index = VectorIndex::load(index_path);
  check_index_matches(index, ck);
  const GraphStore store(read_graph_corpus(graphs_path));
  const auto q = embed_query(ck, store, doc, kind_flag(kind_name));
  KeepFn keep = nullptr;
  if (exclude_self) keep = [&](const std::string& id) { return id != doc; };
  for (const auto& h : index.search(q, k, keep)) {
    std::printf("%s\t%.6f\n", h.doc_id.c_str(), h.score);
  }
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& index_path, const std::string& ckpt_path,
                 const std::string& graphs_path, const std::string& corpus_path, const std::string& queries_path,
                 const std::string& kind_name, const std::string& out, const std::string& csv) {
  Manifest m(manifest_path(c.manifest, out));
  m.require_input(index_path, "embed");
  m.require_input(ckpt_path, "train");
  m.require_input(graphs_path, "build-graphs");
  m.require_input(corpus_path, "gen-corpus");
  m.require_input(queries_path, "train --stage base");
  const auto ck = load_checkpoint(ckpt_path);
  const auto index = VectorIndex::load(index_path);
  check_index_matches(index, ck);
  const CorpusIndex corpus(read_documents(corpus_path));
  const GraphStore store(read_graph_corpus(graphs_path));
  const auto queries = read_queries(queries_path);
  const GraphKind kind = kind_flag(kind_name);
  std::vector<const GraphInput*> ptrs;
  std::vector<GraphInput> inputs;
  inputs.reserve(queries.size());
  for (const auto& q : queries) {
    inputs.push_back(prepare_graph(store.get(q.doc_id, kind), ck.vocab, ck.config.max_node_tokens));
  }
  for (const auto& in : inputs) ptrs.push_back(&in);
  const auto rows = embed_all(ck.params, ck.config, ptrs, c.threads);
  std::map<std::string, std::vector<float>> qmap;
  for (size_t i = 0; i < queries.size(); ++i) qmap[queries[i].doc_id] = rows[i];
  const auto rep = evaluate_run(queries, index_search_fn(index, qmap), corpus, index.size(), 3, 150,
                                RecallMode::MeanOverRelevant, c.threads);
  write_file(out, rep.to_json().dump(2) + "\n");
  std::vector<std::string> outputs = {out};
  if (!csv.empty()) {
    write_file(csv, rep.to_csv());
    outputs.push_back(csv);
  }
  m.record("evaluate", {index_path, ckpt_path, graphs_path, corpus_path, queries_path}, outputs,
           string_hash(kind_name));
  std::cout << "recall_at_3\t" << rep.recall_at_k << "\nndcg_at_150\t" << rep.ndcg_at_k << "\nqueries\t"
            << rep.query_count << "\n";
  return 0;
}

struct Bm25Args {
  std::string corpus, citations, queries, out;
  bool tune = false, evaluate = false;
  double k1 = Bm25Params{}.k1, b = Bm25Params{}.b;
};

int cmd_bm25(const Common& c, const Bm25Args& a) {
  if (a.tune == a.evaluate) throw UsageError("bm25 needs exactly one of --tune or --evaluate");
  if (a.tune && a.citations.empty()) throw UsageError("bm25 --tune requires --citations");
  if (a.evaluate && a.queries.empty()) throw UsageError("bm25 --evaluate requires --queries");
  Manifest m(manifest_path(c.manifest, a.out.empty() ? a.corpus : a.out));
  m.require_input(a.corpus, "gen-corpus");
  const auto docs = read_documents(a.corpus);
  const CorpusIndex corpus(docs);
  std::vector<std::string> ids, texts;
  std::map<std::string, std::string> claim;
  for (const auto& d : docs) {
    ids.push_back(d.doc_id);
    texts.push_back(d.description);
    claim[d.doc_id] = d.claims.front();
  }
  Bm25Index index(ids, texts, {a.k1, a.b});
  auto query_text = [&](const std::string& id) -> std::string {
    auto it = claim.find(id);
    if (it == claim.end()) throw ValidationError("query document '" + id + "' not in corpus");
    return it->second;
  };
  json out;
  std::vector<std::string> inputs = {a.corpus};
  if (a.tune) {
    m.require_input(a.citations, "gen-corpus");
    inputs.push_back(a.citations);
    const auto cites = read_citations(a.citations);
    std::set<std::string> citing;
    for (const auto& cr : cites) citing.insert(cr.citing);
    const auto queries = build_queries(cites, citing);
    const auto grid = bm25_grid({0.6, 0.9, 1.2, 1.5, 2.0, 2.7, 3.5}, {0.25, 0.5, 0.75, 1.0, 1.15});
    const auto res = tune_bm25(index, grid, queries, query_text, corpus, c.threads);
    out["best"] = {{"k1", res.best.k1}, {"b", res.best.b}};
    out["best_recall_at_3"] = res.best_recall;
    out["queries"] = queries.size();
    json g = json::array();
    for (const auto& [p, r] : res.grid) g.push_back({{"k1", p.k1}, {"b", p.b}, {"recall_at_3", r}});
    out["grid"] = g;
    std::cout << "k1\t" << res.best.k1 << "\nb\t" << res.best.b << "\nrecall_at_3\t" << res.best_recall << "\n";
  } else {
    m.require_input(a.queries, "train --stage base");
    inputs.push_back(a.queries);
    const auto queries = read_queries(a.queries);
    SearchFn fn = [&](const std::string& q, size_t k, const KeepFn& keep) {
      std::vector<std::string> r;
      for (auto& h : index.search(query_text(q), k, keep)) r.push_back(std::move(h.doc_id));
      return r;
    };
    const auto rep =
        evaluate_run(queries, fn, corpus, index.size(), 3, 150, RecallMode::MeanOverRelevant, c.threads);
    out = rep.to_json();
    out["k1"] = a.k1;
    out["b"] = a.b;
    std::cout << "recall_at_3\t" << rep.recall_at_k << "\nndcg_at_150\t" << rep.ndcg_at_k << "\n";
  }
  if (!a.out.empty()) {
    write_file(a.out, out.dump(2) + "\n");
    m.record(a.tune ? "bm25-tune" : "bm25-evaluate", inputs, {a.out},
             string_hash(std::to_string(a.k1) + "/" + std::to_string(a.b)));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"patgraph: graph-transformer prior-art search pipeline"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--manifest", common.manifest, "Manifest file (default: manifest.json beside the output)");
  app.add_option("--threads", common.threads, "Worker threads")->check(CLI::PositiveNumber);

  std::string config, out, corpus, graphs, citations, vocab, ckpt, index, queries, query_doc, csv;
  std::string kind = "description", query_kind = "first_claim";
  size_t vocab_size = 2000, k = 10;
  bool exclude_self = false;

  auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic corpus");
  gen->add_option("--config", config, "Generator key = value config");
  gen->add_option("--out", out, "Output directory")->required();

  auto* bg = app.add_subcommand("build-graphs", "Parse documents into invention graphs");
  bg->add_option("--corpus", corpus, "Documents JSONL")->required();
  bg->add_option("--out", out, "Graphs JSONL")->required();

  auto* tt = app.add_subcommand("train-tokenizer", "Train the BPE tokenizer on graph node texts");
  tt->add_option("--graphs", graphs, "Graphs JSONL")->required();
  tt->add_option("--vocab-size", vocab_size, "Vocabulary size")->check(CLI::PositiveNumber);
  tt->add_option("--out", out, "Vocab JSON")->required();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a stage (base or reduce)");
  tr->add_option("--stage", ta.stage, "base or reduce")->check(CLI::IsMember({"base", "reduce", "reduced"}));
  tr->add_option("--graphs", ta.graphs, "Graphs JSONL")->required();
  tr->add_option("--citations", ta.citations, "Citations JSONL")->required();
  tr->add_option("--corpus", ta.corpus, "Documents JSONL (families and IPC classes)")->required();
  tr->add_option("--vocab", ta.vocab, "Vocab JSON")->required();
  tr->add_option("--config", ta.config, "Training key = value config");
  tr->add_option("--out", ta.out, "Output directory")->required();
  tr->add_option("--resume", ta.resume, "Base-stage checkpoint (required for reduce)");

  auto* em = app.add_subcommand("embed", "Embed graphs into a vector index");
  em->add_option("--ckpt", ckpt, "Checkpoint")->required();
  em->add_option("--graphs", graphs, "Graphs JSONL")->required();
  em->add_option("--kind", kind, "Graph kind to embed");
  em->add_option("--out", out, "Index file")->required();

  auto* se = app.add_subcommand("search", "Rank the index for one query document");
  se->add_option("--index", index, "Index file")->required();
  se->add_option("--ckpt", ckpt, "Checkpoint")->required();
  se->add_option("--graphs", graphs, "Graphs JSONL holding the query graph")->required();
  se->add_option("--query-doc", query_doc, "Query document id")->required();
  se->add_option("--query-kind", query_kind, "Graph kind of the query");
  se->add_option("-k", k, "Number of results")->check(CLI::PositiveNumber);
  se->add_flag("--exclude-self", exclude_self, "Drop the query document from the results");

  auto* ev = app.add_subcommand("evaluate", "Recall@3 and nDCG@150 of an index");
  ev->add_option("--index", index, "Index file")->required();
  ev->add_option("--ckpt", ckpt, "Checkpoint")->required();
  ev->add_option("--graphs", graphs, "Graphs JSONL")->required();
  ev->add_option("--corpus", corpus, "Documents JSONL (family exclusion)")->required();
  ev->add_option("--queries", queries, "Queries JSONL")->required();
  ev->add_option("--query-kind", query_kind, "Graph kind of the queries");
  ev->add_option("--out", out, "Report JSON")->required();
  ev->add_option("--csv", csv, "Per-query CSV");

  Bm25Args ba;
  auto* bm = app.add_subcommand("bm25", "BM25 baseline: tune or evaluate");
  bm->add_option("--corpus", ba.corpus, "Documents JSONL")->required();
  bm->add_flag("--tune", ba.tune, "Grid-search k1 and b on the citations' X queries");
  bm->add_flag("--evaluate", ba.evaluate, "Evaluate on --queries");
  bm->add_option("--citations", ba.citations, "Citations JSONL (tuning)");
  bm->add_option("--queries", ba.queries, "Queries JSONL (evaluation)");
  bm->add_option("--k1", ba.k1, "Term-frequency saturation");
  bm->add_option("--b", ba.b, "Length normalization");
  bm->add_option("--out", ba.out, "Report JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_corpus(common, config, out);
    if (*bg) return cmd_build_graphs(common, corpus, out);
    if (*tt) return cmd_train_tokenizer(common, graphs, vocab_size, out);
    if (*tr) return cmd_train(common, ta);
    if (*em) return cmd_embed(common, ckpt, graphs, kind, out);
    if (*se) return cmd_search(common, index, ckpt, graphs, query_doc, query_kind, k, exclude_self);
    if (*ev) return cmd_evaluate(common, index, ckpt, graphs, corpus, queries, query_kind, out, csv);
    if (*bm) return cmd_bm25(common, ba);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const SchemaError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const ValidationError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
