#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "patgraph/corpus.hpp"
#include "patgraph/error.hpp"
#include "patgraph/parallel.hpp"

namespace patgraph {

struct EvalQuery {
  std::string doc_id;
  std::vector<std::string> relevant;  // X-cited documents
};

/// |relevant ∩ top-k| / |relevant|
inline double recall_at_k(std::span<const std::string> ranked, const std::set<std::string>& relevant,
                          size_t k) {
  if (relevant.empty()) throw ValidationError("recall_at_k: empty relevant set");
  if (k == 0) throw UsageError("recall_at_k: k must be >= 1");
  size_t hits = 0;
  for (size_t i = 0; i < std::min(k, ranked.size()); ++i) hits += relevant.count(ranked[i]);
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

/// Binary-gain nDCG with a log2(rank + 1) discount.
inline double ndcg_at_k(std::span<const std::string> ranked, const std::set<std::string>& relevant,
                        size_t k) {
  if (relevant.empty()) throw ValidationError("ndcg_at_k: empty relevant set");
  if (k == 0) throw UsageError("ndcg_at_k: k must be >= 1");
  double dcg = 0;
  for (size_t i = 0; i < std::min(k, ranked.size()); ++i) {
    if (relevant.count(ranked[i])) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  }
  double idcg = 0;
  for (size_t i = 0; i < std::min(k, relevant.size()); ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return dcg / idcg;
}

enum class RecallMode {
  MeanOverRelevant,  // fraction of the query's X citations found in the top k
  AnyRelevant,       // 1 if any X citation is in the top k
};

/// Ranked candidate ids for a query document. `keep` filters candidates; the
/// function returns up to k ids.
using SearchFn = std::function<std::vector<std::string>(
    const std::string& query_doc, size_t k, const std::function<bool(const std::string&)>& keep)>;

struct QueryResult {
  std::string doc_id;
  size_t relevant_count = 0;
  double recall = 0;
  double ndcg = 0;
  long first_relevant_rank = -1;  // 1-based, -1 when absent from the ranking
};

struct EvalReport {
  double recall_at_k = 0;
  double ndcg_at_k = 0;
  size_t k_recall = 3;
  size_t k_ndcg = 150;
  size_t pool_size = 0;
  size_t query_count = 0;
  std::vector<QueryResult> queries;

  nlohmann::ordered_json to_json(bool with_queries = true) const {
    nlohmann::ordered_json j;
    j["recall_at_" + std::to_string(k_recall)] = recall_at_k;
    j["ndcg_at_" + std::to_string(k_ndcg)] = ndcg_at_k;
    j["pool_size"] = pool_size;
    j["query_count"] = query_count;
    if (with_queries) {
      auto arr = nlohmann::ordered_json::array();
      for (const auto& q : queries) {
        arr.push_back({{"doc_id", q.doc_id},
                       {"relevant", q.relevant_count},
                       {"recall", q.recall},
                       {"ndcg", q.ndcg},
                       {"first_relevant_rank", q.first_relevant_rank}});
      }
      j["queries"] = std::move(arr);
    }
    return j;
  }

  std::string to_csv() const {
    std::string s = "doc_id,relevant,recall,ndcg,first_relevant_rank\n";
    for (const auto& q : queries) {
      nlohmann::json r = q.recall, n = q.ndcg;
      s += q.doc_id + "," + std::to_string(q.relevant_count) + "," + r.dump() + "," + n.dump() + "," +
           std::to_string(q.first_relevant_rank) + "\n";
    }
    return s;
  }
};

/// Runs every query through `search`, excluding the query's own family from
/// its ranking, and averages the per-query metrics.
inline EvalReport evaluate_run(const std::vector<EvalQuery>& queries, const SearchFn& search,
                               const CorpusIndex& corpus, size_t pool_size, size_t k_recall = 3,
                               size_t k_ndcg = 150, RecallMode mode = RecallMode::MeanOverRelevant,
                               size_t threads = 1) {
  EvalReport rep;
  rep.k_recall = k_recall;
  rep.k_ndcg = k_ndcg;
  rep.pool_size = pool_size;
  rep.query_count = queries.size();
  rep.queries.resize(queries.size());
  for (const auto& q : queries) {
    if (!corpus.contains(q.doc_id)) throw ValidationError("query document '" + q.doc_id + "' not in corpus");
    if (q.relevant.empty()) throw ValidationError("query '" + q.doc_id + "' has no relevant documents");
  }
  const size_t depth = std::max(k_recall, k_ndcg);
  parallel_for(queries.size(), threads, [&](size_t i) {
    const EvalQuery& q = queries[i];
    const std::string& family = corpus.family(q.doc_id);
    auto keep = [&](const std::string& cand) {
      return cand != q.doc_id && (!corpus.contains(cand) || corpus.family(cand) != family);
    };
    std::vector<std::string> ranked;
    for (auto& id : search(q.doc_id, depth, keep)) {
      if (keep(id)) ranked.push_back(std::move(id));
    }
    const std::set<std::string> rel(q.relevant.begin(), q.relevant.end());
    QueryResult r;
    r.doc_id = q.doc_id;
    r.relevant_count = rel.size();
    if (mode == RecallMode::MeanOverRelevant) {
      r.recall = recall_at_k(ranked, rel, k_recall);
    } else {
      r.recall = recall_at_k(ranked, rel, k_recall) > 0 ? 1.0 : 0.0;
    }
    r.ndcg = ndcg_at_k(ranked, rel, k_ndcg);
    for (size_t p = 0; p < ranked.size(); ++p) {
      if (rel.count(ranked[p])) {
        r.first_relevant_rank = static_cast<long>(p + 1);
        break;
      }
    }
    rep.queries[i] = std::move(r);
  });
  double rs = 0, ns = 0;
  for (const auto& r : rep.queries) {
    rs += r.recall;
    ns += r.ndcg;
  }
  if (!queries.empty()) {
    rep.recall_at_k = rs / static_cast<double>(queries.size());
    rep.ndcg_at_k = ns / static_cast<double>(queries.size());
  }
  return rep;
}

/// Queries from X citations: each citing document in `query_docs` becomes one
/// query whose relevant set is all of its X-cited documents.
inline std::vector<EvalQuery> build_queries(const std::vector<CitationRecord>& citations,
                                            const std::set<std::string>& query_docs) {
  std::map<std::string, std::set<std::string>> rel;
  for (const auto& c : citations) {
    if (c.category == CitationCategory::X && query_docs.count(c.citing)) rel[c.citing].insert(c.cited);
  }
  std::vector<EvalQuery> out;
  for (auto& [doc, set] : rel) out.push_back({doc, {set.begin(), set.end()}});
  return out;
}

inline nlohmann::ordered_json to_json(const EvalQuery& q) {
  return {{"doc_id", q.doc_id}, {"relevant", q.relevant}};
}

inline EvalQuery query_from_json(const nlohmann::ordered_json& j) {
  EvalQuery q;
  try {
    q.doc_id = j.at("doc_id").get<std::string>();
    q.relevant = j.at("relevant").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("query record: ") + e.what());
  }
  if (q.relevant.empty()) throw ValidationError("query '" + q.doc_id + "' has no relevant documents");
  return q;
}

inline std::vector<EvalQuery> read_queries(const std::string& path) {
  return detail::read_jsonl<EvalQuery>(path, query_from_json);
}

inline void write_queries(const std::string& path, const std::vector<EvalQuery>& qs) {
  detail::write_jsonl(path, qs);
}

}  // namespace patgraph
