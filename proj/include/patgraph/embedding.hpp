#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "patgraph/encoder.hpp"
#include "patgraph/eval.hpp"
#include "patgraph/parallel.hpp"
#include "patgraph/retrieval.hpp"

namespace patgraph {

/// Inference embeddings of many graphs; row i belongs to inputs[i].
template <typename Real>
std::vector<std::vector<float>> embed_all(const EncoderParams<Real>& p, const EncoderConfig& c,
                                          const std::vector<const GraphInput*>& inputs, size_t threads,
                                          EncoderStats* stats = nullptr) {
  std::vector<std::vector<float>> out(inputs.size());
  std::vector<EncoderStats> per(inputs.size());
  parallel_for(inputs.size(), threads, [&](size_t i) {
    const auto v = embed(p, *inputs[i], c, stats ? &per[i] : nullptr);
    out[i].assign(v.begin(), v.end());
  });
  if (stats) {
    for (const auto& s : per) {
      stats->attention_scores += s.attention_scores;
      stats->graphs += s.graphs;
    }
  }
  return out;
}

/// Exact index over the given rows. Rows are renormalized in double so that
/// float rounding never trips the unit-norm check.
inline VectorIndex build_index(std::vector<std::string> ids, const std::vector<std::vector<float>>& rows) {
  std::vector<std::vector<float>> unit = rows;
  for (auto& r : unit) {
    double n = 0;
    for (float x : r) n += double(x) * x;
    n = std::sqrt(n);
    if (n > 0) {
      for (float& x : r) x = static_cast<float>(x / n);
    }
  }
  return VectorIndex::from_rows(std::move(ids), unit);
}

/// SearchFn over a vector index, with query vectors looked up by doc id.
inline SearchFn index_search_fn(const VectorIndex& index, const std::map<std::string, std::vector<float>>& queries) {
  return [&index, &queries](const std::string& q, size_t k, const std::function<bool(const std::string&)>& keep) {
    auto it = queries.find(q);
    if (it == queries.end()) throw ValidationError("no query embedding for '" + q + "'");
    std::vector<std::string> out;
    for (auto& h : index.search(it->second, k, keep)) out.push_back(std::move(h.doc_id));
    return out;
  };
}

}  // namespace patgraph
