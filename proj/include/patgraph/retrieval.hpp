#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "patgraph/checkpoint.hpp"
#include "patgraph/error.hpp"
#include "patgraph/eval.hpp"
#include "patgraph/text.hpp"

namespace patgraph {

struct Hit {
  std::string doc_id;
  double score = 0;
  friend bool operator==(const Hit&, const Hit&) = default;
};

using KeepFn = std::function<bool(const std::string&)>;

namespace retrieval_detail {

/// Top-k of (score, id) pairs: descending score, ascending id on ties.
inline std::vector<Hit> top_k(const std::vector<double>& scores, const std::vector<std::string>& ids,
                              size_t k, const KeepFn& keep) {
  std::vector<uint32_t> order;
  order.reserve(ids.size());
  for (uint32_t i = 0; i < ids.size(); ++i) {
    if (!keep || keep(ids[i])) order.push_back(i);
  }
  auto better = [&](uint32_t a, uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  };
  const size_t kk = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk), order.end(), better);
  std::vector<Hit> out;
  out.reserve(kk);
  for (size_t i = 0; i < kk; ++i) out.push_back({ids[order[i]], scores[order[i]]});
  return out;
}

}  // namespace retrieval_detail

// ---------------------------------------------------------------------------
// Exact dense index

class VectorIndex {
 public:
  VectorIndex() = default;

  VectorIndex(std::vector<std::string> ids, Tensor<float> matrix) : ids_(std::move(ids)), matrix_(std::move(matrix)) {
    if (matrix_.rows() != ids_.size()) throw ShapeError("vector index: id count does not match rows");
    std::set<std::string> seen;
    for (const auto& id : ids_) {
      if (!seen.insert(id).second) throw ValidationError("vector index: duplicate id '" + id + "'");
    }
    for (size_t r = 0; r < matrix_.rows(); ++r) {
      const float* row = matrix_.row_ptr(r);
      double n2 = 0;
      for (size_t c = 0; c < dim(); ++c) n2 += double(row[c]) * row[c];
      if (std::abs(std::sqrt(n2) - 1.0) > 1e-5) {
        throw ValidationError("vector index: row '" + ids_[r] + "' is not unit norm");
      }
    }
  }

  static VectorIndex from_rows(std::vector<std::string> ids, const std::vector<std::vector<float>>& rows) {
    const size_t d = rows.empty() ? 0 : rows[0].size();
    Tensor<float> m({rows.size(), d});
    for (size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != d) throw ShapeError("vector index: ragged rows");
      std::copy(rows[r].begin(), rows[r].end(), m.row_ptr(r));
    }
    return VectorIndex(std::move(ids), std::move(m));
  }

  size_t size() const { return ids_.size(); }
  size_t dim() const { return matrix_.shape.size() < 2 ? 0 : matrix_.cols(); }
  const std::vector<std::string>& ids() const { return ids_; }
  const Tensor<float>& matrix() const { return matrix_; }

  /// Row of a document, or -1.
  long find(const std::string& id) const {
    if (lookup_.empty() && !ids_.empty()) {
      for (size_t i = 0; i < ids_.size(); ++i) lookup_.emplace(ids_[i], i);
    }
    auto it = lookup_.find(id);
    return it == lookup_.end() ? -1 : static_cast<long>(it->second);
  }

  /// Exact top-k by dot product.
  std::vector<Hit> search(std::span<const float> query, size_t k, const KeepFn& keep = nullptr) const {
    if (ids_.empty()) throw ValidationError("knn search on an empty index");
    if (query.size() != dim()) {
      throw ShapeError("query dimension " + std::to_string(query.size()) + " does not match index dimension " +
                       std::to_string(dim()));
    }
    if (k == 0) throw UsageError("k must be >= 1");
    std::vector<double> scores(ids_.size());
    for (size_t r = 0; r < ids_.size(); ++r) scores[r] = kernels::dot(matrix_.row_ptr(r), query.data(), dim());
    return retrieval_detail::top_k(scores, ids_, k, keep);
  }

  std::string encode() const {
    nlohmann::ordered_json meta;
    meta["kind"] = "vector_index";
    meta["doc_ids"] = ids_;
    return encode_container(meta, {{"embeddings", &matrix_}});
  }

  static VectorIndex decode(const std::string& bytes, const std::string& origin) {
    Container c = decode_container(bytes, origin);
    if (c.meta.value("kind", "") != "vector_index") throw SchemaError(origin + ": not a vector index");
    try {
      auto ids = c.meta.at("doc_ids").get<std::vector<std::string>>();
      return VectorIndex(std::move(ids), c.tensor("embeddings"));
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(origin + ": " + e.what());
    }
  }

  void save(const std::string& path) const { write_file(path, encode()); }
  static VectorIndex load(const std::string& path) { return decode(read_file(path), path); }

 private:
  std::vector<std::string> ids_;
  Tensor<float> matrix_;
  mutable std::unordered_map<std::string, size_t> lookup_;
};

inline std::vector<Hit> knn_search(const VectorIndex& index, std::span<const float> query, size_t k,
                                   const KeepFn& keep = nullptr) {
  return index.search(query, k, keep);
}

// ---------------------------------------------------------------------------
// Okapi BM25

struct Bm25Params {
  double k1 = 2.7;
  double b = 1.15;
  friend bool operator==(const Bm25Params&, const Bm25Params&) = default;
};

class Bm25Index {
 public:
  Bm25Index() = default;

  Bm25Index(const std::vector<std::string>& ids, const std::vector<std::string>& texts, Bm25Params params = {})
      : ids_(ids), params_(params) {
    check_params(params_);
    if (ids.size() != texts.size()) throw ShapeError("bm25: id and text counts differ");
    std::set<std::string> seen;
    for (const auto& id : ids_) {
      if (!seen.insert(id).second) throw ValidationError("bm25: duplicate id '" + id + "'");
    }
    lengths_.resize(ids.size());
    for (uint32_t d = 0; d < ids.size(); ++d) {
      std::map<std::string, uint32_t> tf;
      const auto terms = text::terms(texts[d]);
      lengths_[d] = static_cast<uint32_t>(terms.size());
      for (const auto& t : terms) ++tf[t];
      for (const auto& [t, f] : tf) postings_[t].push_back({d, f});
    }
    finish();
  }

  size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  const Bm25Params& params() const { return params_; }
  void set_params(Bm25Params p) {
    check_params(p);
    params_ = p;
  }
  double average_length() const { return avg_len_; }
  size_t document_frequency(const std::string& term) const {
    auto it = postings_.find(term);
    return it == postings_.end() ? 0 : it->second.size();
  }

  double idf(const std::string& term) const {
    const double n = static_cast<double>(ids_.size());
    const double df = static_cast<double>(document_frequency(term));
    return std::log((n - df + 0.5) / (df + 0.5) + 1.0);
  }

  /// Scores of every document for the distinct terms of the query.
  std::vector<double> score_all(const std::vector<std::string>& query_terms) const {
    std::vector<double> scores(ids_.size(), 0.0);
    const std::set<std::string> distinct(query_terms.begin(), query_terms.end());
    for (const auto& t : distinct) {
      auto it = postings_.find(t);
      if (it == postings_.end()) continue;
      const double w = idf(t);
      for (const auto& [d, f] : it->second) scores[d] += w * tf_part(f, lengths_[d]);
    }
    return scores;
  }

  double score(const std::vector<std::string>& query_terms, size_t doc) const {
    if (doc >= ids_.size()) throw ValidationError("bm25: document index out of range");
    return score_all(query_terms)[doc];
  }

  std::vector<Hit> search(const std::string& query, size_t k, const KeepFn& keep = nullptr) const {
    const auto terms = text::terms(query);
    if (terms.empty() || ids_.empty()) return {};
    if (k == 0) throw UsageError("k must be >= 1");
    return retrieval_detail::top_k(score_all(terms), ids_, k, keep);
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["k1"] = params_.k1;
    j["b"] = params_.b;
    j["doc_ids"] = ids_;
    j["doc_lengths"] = lengths_;
    nlohmann::ordered_json post = nlohmann::ordered_json::object();
    for (const auto& [t, list] : postings_) {
      auto arr = nlohmann::ordered_json::array();
      for (const auto& [d, f] : list) arr.push_back({d, f});
      post[t] = std::move(arr);
    }
    j["postings"] = std::move(post);
    return j;
  }

  static Bm25Index from_json(const nlohmann::ordered_json& j) {
    Bm25Index idx;
    try {
      idx.params_ = {j.at("k1").get<double>(), j.at("b").get<double>()};
      idx.ids_ = j.at("doc_ids").get<std::vector<std::string>>();
      idx.lengths_ = j.at("doc_lengths").get<std::vector<uint32_t>>();
      for (const auto& [t, arr] : j.at("postings").items()) {
        auto& list = idx.postings_[t];
        for (const auto& p : arr) list.push_back({p.at(0).get<uint32_t>(), p.at(1).get<uint32_t>()});
      }
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(std::string("malformed bm25 index: ") + e.what());
    }
    check_params(idx.params_);
    if (idx.lengths_.size() != idx.ids_.size()) throw SchemaError("bm25 index: length table size mismatch");
    idx.finish();
    return idx;
  }

  void save(const std::string& path) const { write_file(path, to_json().dump() + "\n"); }
  static Bm25Index load(const std::string& path) {
    try {
      return from_json(nlohmann::ordered_json::parse(read_file(path)));
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(path + ": " + e.what());
    }
  }

 private:
  struct Posting {
    uint32_t doc;
    uint32_t tf;
  };

  static void check_params(const Bm25Params& p) {
    if (!(p.k1 > 0)) throw UsageError("bm25: k1 must be > 0");
    if (!(p.b >= 0 && p.b <= 2)) throw UsageError("bm25: b must lie in [0, 2]");
  }

  void finish() {
    double total = 0;
    for (uint32_t l : lengths_) total += l;
    avg_len_ = ids_.empty() ? 0.0 : total / static_cast<double>(ids_.size());
    if (avg_len_ == 0) avg_len_ = 1;
  }

  /// tf / (tf + k1 * max(0, 1 - b + b * len / avglen)); the clamp keeps b > 1
  /// from producing negative length factors on very short documents.
  double tf_part(uint32_t tf, uint32_t len) const {
    const double norm = std::max(0.0, 1.0 - params_.b + params_.b * static_cast<double>(len) / avg_len_);
    const double f = static_cast<double>(tf);
    return f / (f + params_.k1 * norm);
  }

  std::vector<std::string> ids_;
  std::vector<uint32_t> lengths_;
  std::map<std::string, std::vector<Posting>> postings_;
  Bm25Params params_;
  double avg_len_ = 1;
};

inline double bm25_score(const Bm25Index& index, const std::vector<std::string>& query_terms, size_t doc) {
  return index.score(query_terms, doc);
}

inline std::vector<Hit> bm25_search(const Bm25Index& index, const std::string& query, size_t k,
                                    const KeepFn& keep = nullptr) {
  return index.search(query, k, keep);
}

struct Bm25TuneResult {
  Bm25Params best;
  double best_recall = -1;
  std::vector<std::pair<Bm25Params, double>> grid;
};

/// Grid search over (k1, b) maximizing Recall@3 of `queries` whose text is
/// given by `query_text`. The first grid point wins ties.
inline Bm25TuneResult tune_bm25(Bm25Index index, const std::vector<Bm25Params>& grid,
                                const std::vector<EvalQuery>& queries,
                                const std::function<std::string(const std::string&)>& query_text,
                                const CorpusIndex& corpus, size_t threads = 1) {
  if (grid.empty()) throw UsageError("bm25 tuning grid is empty");
  Bm25TuneResult res;
  for (const auto& p : grid) {
    index.set_params(p);
    SearchFn fn = [&](const std::string& q, size_t k, const std::function<bool(const std::string&)>& keep) {
      std::vector<std::string> out;
      for (auto& h : index.search(query_text(q), k, keep)) out.push_back(std::move(h.doc_id));
      return out;
    };
    const double r = evaluate_run(queries, fn, corpus, index.size(), 3, 3, RecallMode::MeanOverRelevant, threads)
                         .recall_at_k;
    res.grid.emplace_back(p, r);
    if (r > res.best_recall) {
      res.best_recall = r;
      res.best = p;
    }
  }
  return res;
}

inline std::vector<Bm25Params> bm25_grid(const std::vector<double>& k1s, const std::vector<double>& bs) {
  std::vector<Bm25Params> g;
  for (double k1 : k1s) {
    for (double b : bs) g.push_back({k1, b});
  }
  return g;
}

}  // namespace patgraph
