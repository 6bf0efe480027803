#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "patgraph/retrieval.hpp"
#include "patgraph/rng.hpp"

using namespace patgraph;

namespace {

std::vector<float> unit(std::vector<float> v) {
  double n = 0;
  for (float x : v) n += double(x) * x;
  for (float& x : v) x = static_cast<float>(x / std::sqrt(n));
  return v;
}

std::vector<std::vector<float>> random_unit_rows(Rng& rng, size_t n, size_t d) {
  std::vector<std::vector<float>> rows(n, std::vector<float>(d));
  for (auto& r : rows) {
    for (float& x : r) x = static_cast<float>(rng.normal());
    r = unit(r);
  }
  return rows;
}

std::vector<std::string> numbered(size_t n, const std::string& prefix = "doc") {
  std::vector<std::string> ids;
  for (size_t i = 0; i < n; ++i) ids.push_back(prefix + std::to_string(i));
  return ids;
}

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

/// Five-document corpus whose statistics are tabulated by hand below.
const std::vector<std::string> kFiveDocs = {
    "pump valve seal",           // d0: pump 1, valve 1, seal 1; len 3
    "Pump pump motor",           // d1: pump 2, motor 1; len 3
    "valve",                     // d2: valve 1; len 1
    "motor shaft gear housing",  // d3: len 4
    "seal, seal; seal pump",     // d4: seal 3, pump 1; len 4
};

}  // namespace

// ---------------------------------------------------------------------------
// Dense index

TEST(VectorIndex, OrthogonalBasis) {
  const auto idx = VectorIndex::from_rows({"doc1", "doc2"}, {{1, 0}, {0, 1}});
  const std::vector<float> q = {1, 0};
  const auto hits = idx.search(q, 1);
  ASSERT_EQ(hits.size(), 1u);
  EXPECT_EQ(hits[0].doc_id, "doc1");
  EXPECT_EQ(hits[0].score, 1.0);
}

TEST(VectorIndex, SelfSimilarityRanksFirst) {
  Rng rng(5);
  const auto rows = random_unit_rows(rng, 30, 16);
  const auto idx = VectorIndex::from_rows(numbered(30), rows);
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto hits = idx.search(rows[i], 1);
    EXPECT_EQ(hits[0].doc_id, "doc" + std::to_string(i));
    EXPECT_NEAR(hits[0].score, 1.0, 1e-6);
  }
}

TEST(VectorIndex, TiesBreakByDocId) {
  const auto idx = VectorIndex::from_rows({"b", "c", "a"}, {{1, 0}, {1, 0}, {1, 0}});
  const std::vector<float> q = {1, 0};
  const auto hits = idx.search(q, 3);
  EXPECT_EQ(hits[0].doc_id, "a");
  EXPECT_EQ(hits[1].doc_id, "b");
  EXPECT_EQ(hits[2].doc_id, "c");
}

TEST(VectorIndex, Errors) {
  EXPECT_THROW(VectorIndex::from_rows({"a"}, {{1, 1}}), ValidationError);
  EXPECT_THROW(VectorIndex::from_rows({"a", "a"}, {{1, 0}, {0, 1}}), ValidationError);
  const auto idx = VectorIndex::from_rows({"a"}, {{1, 0}});
  const std::vector<float> q3 = {1, 0, 0}, q2 = {1, 0};
  EXPECT_THROW(idx.search(q3, 1), ShapeError);
  EXPECT_THROW(idx.search(q2, 0), UsageError);
  EXPECT_THROW(VectorIndex().search(q2, 1), ValidationError);
}

TEST(VectorIndex, KeepFilterAndClamp) {
  const auto idx = VectorIndex::from_rows({"a", "b", "c"}, {{1, 0}, unit({1, 1}), {0, 1}});
  const std::vector<float> q = {1, 0};
  const auto hits = idx.search(q, 10, [](const std::string& id) { return id != "a"; });
  ASSERT_EQ(hits.size(), 2u);
  EXPECT_EQ(hits[0].doc_id, "b");
  EXPECT_EQ(hits[1].doc_id, "c");
}

class KnnOracle : public ::testing::TestWithParam<size_t> {};

TEST_P(KnnOracle, MatchesFullSort) {
  const size_t n = GetParam(), d = 12;
  Rng rng(100 + n);
  const auto rows = random_unit_rows(rng, n, d);
  const auto idx = VectorIndex::from_rows(numbered(n), rows);
  for (int trial = 0; trial < 5; ++trial) {
    const auto q = random_unit_rows(rng, 1, d)[0];
    std::vector<std::pair<double, std::string>> all;
    for (size_t i = 0; i < n; ++i) {
      double s = 0;
      for (size_t j = 0; j < d; ++j) s += double(rows[i][j]) * q[j];
      all.emplace_back(-s, "doc" + std::to_string(i));
    }
    std::sort(all.begin(), all.end());
    const size_t k = std::min<size_t>(10, n);
    const auto hits = idx.search(q, k);
    ASSERT_EQ(hits.size(), k);
    for (size_t i = 0; i < k; ++i) {
      EXPECT_EQ(hits[i].doc_id, all[i].second);
      EXPECT_NEAR(hits[i].score, -all[i].first, 1e-5);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Sizes, KnnOracle, ::testing::Values(1, 2, 7, 10, 100, 1000));

TEST(VectorIndex, PersistenceRoundTripIsBitExact) {
  Rng rng(11);
  const auto rows = random_unit_rows(rng, 40, 8);
  const auto idx = VectorIndex::from_rows(numbered(40), rows);
  const auto path = temp_file("patgraph_index.bin");
  idx.save(path.string());
  const auto back = VectorIndex::load(path.string());
  EXPECT_EQ(back.ids(), idx.ids());
  EXPECT_TRUE(back.matrix() == idx.matrix());
  for (int i = 0; i < 5; ++i) {
    const auto q = random_unit_rows(rng, 1, 8)[0];
    EXPECT_EQ(back.search(q, 7), idx.search(q, 7));
  }
  std::filesystem::remove(path);
}

TEST(VectorIndex, RejectsForeignContainer) {
  nlohmann::ordered_json meta;
  meta["kind"] = "encoder_checkpoint";
  Tensor<float> t({1, 1});
  t.data[0] = 1;
  EXPECT_THROW(VectorIndex::decode(encode_container(meta, {{"embeddings", &t}}), "x"), SchemaError);
}

// ---------------------------------------------------------------------------
// BM25

TEST(Bm25, TwoDocExample) {
  const Bm25Index idx({"doc1", "doc2"}, {"a b", "a"});
  const double expected = std::log(2.0) * 1.0 / (1.0 + 2.7 * (1.0 - 1.15 + 1.15 * 2.0 / 1.5));
  EXPECT_NEAR(idx.score({"b"}, 0), expected, 1e-12);
  EXPECT_EQ(idx.score({"b"}, 1), 0.0);
}

TEST(Bm25, AbsentTermContributesNothing) {
  const Bm25Index idx({"d"}, {"alpha beta"});
  EXPECT_EQ(idx.score({"gamma"}, 0), 0.0);
  EXPECT_EQ(idx.score({"gamma", "alpha"}, 0), idx.score({"alpha"}, 0));
}

TEST(Bm25, DoublingK1WithZeroTfKeepsZero) {
  Bm25Index idx({"d1", "d2"}, {"alpha beta", "beta"});
  const auto before = idx.score_all({"gamma"});
  idx.set_params({5.4, 1.15});
  EXPECT_EQ(idx.score_all({"gamma"}), before);
  EXPECT_EQ(before, std::vector<double>(2, 0.0));
}

TEST(Bm25, FiveDocHandOracle) {
  const std::vector<std::string> ids = {"d0", "d1", "d2", "d3", "d4"};
  const Bm25Index idx(ids, kFiveDocs);
  const double k1 = 2.7, b = 1.15, n = 5, avg = 15.0 / 5.0;
  const double len[5] = {3, 3, 1, 4, 4};
  // term: df, tf per document
  struct Row {
    const char* term;
    double df;
    double tf[5];
  };
  const Row table[] = {
      {"pump", 3, {1, 2, 0, 0, 1}},
      {"seal", 2, {1, 0, 0, 0, 3}},
      {"valve", 2, {1, 0, 1, 0, 0}},
      {"motor", 2, {0, 1, 0, 1, 0}},
      {"gear", 1, {0, 0, 0, 1, 0}},
  };
  auto oracle = [&](const std::vector<std::string>& q, size_t d) {
    double s = 0;
    for (const auto& row : table) {
      if (std::find(q.begin(), q.end(), row.term) == q.end()) continue;
      const double idf = std::log((n - row.df + 0.5) / (row.df + 0.5) + 1.0);
      const double norm = std::max(0.0, 1.0 - b + b * len[d] / avg);
      s += idf * row.tf[d] / (row.tf[d] + k1 * norm);
    }
    return s;
  };
  const std::vector<std::vector<std::string>> queries = {
      {"pump"}, {"seal"}, {"pump", "seal"}, {"valve", "motor"}, {"gear", "pump", "valve"}, {"nothing"}};
  for (const auto& q : queries) {
    for (size_t d = 0; d < 5; ++d) EXPECT_NEAR(idx.score(q, d), oracle(q, d), 1e-9) << q[0] << " d" << d;
  }
  EXPECT_NEAR(idx.idf("pump"), std::log(12.0 / 7.0), 1e-12);
  EXPECT_NEAR(idx.idf("seal"), std::log(2.4), 1e-12);
  EXPECT_EQ(idx.document_frequency("pump"), 3u);
  EXPECT_DOUBLE_EQ(idx.average_length(), 3.0);

  // Ranking equals a full-scan sort of the oracle scores, doc id tie-break.
  for (const auto& q : queries) {
    std::string text;
    for (const auto& t : q) text += t + " ";
    std::vector<std::pair<double, std::string>> all;
    for (size_t d = 0; d < 5; ++d) all.emplace_back(-oracle(q, d), ids[d]);
    std::sort(all.begin(), all.end());
    const auto hits = idx.search(text, 5);
    ASSERT_EQ(hits.size(), 5u);
    for (size_t i = 0; i < 5; ++i) EXPECT_EQ(hits[i].doc_id, all[i].second);
  }
}

TEST(Bm25, RepeatedQueryTermsCountOnce) {
  const Bm25Index idx({"d0", "d1", "d2", "d3", "d4"}, kFiveDocs);
  EXPECT_EQ(idx.score({"pump", "pump"}, 1), idx.score({"pump"}, 1));
}

TEST(Bm25, SearchExamples) {
  const Bm25Index single({"only"}, {"a rotary snow auger"});
  const auto hits = single.search("auger", 3);
  ASSERT_EQ(hits.size(), 1u);
  EXPECT_EQ(hits[0].doc_id, "only");

  const Bm25Index idx({"d0", "d1", "d2", "d3", "d4"}, kFiveDocs);
  EXPECT_TRUE(idx.search("", 3).empty());
  EXPECT_TRUE(idx.search(" ,; ", 3).empty());
  const auto all = idx.search("pump", 50);
  EXPECT_EQ(all.size(), 5u);
  for (size_t i = 1; i < all.size(); ++i) EXPECT_GE(all[i - 1].score, all[i].score);
}

TEST(Bm25, ParamValidation) {
  EXPECT_THROW(Bm25Index({"a"}, {"x"}, {0.0, 0.5}), UsageError);
  EXPECT_THROW(Bm25Index({"a"}, {"x"}, {1.0, 2.5}), UsageError);
  EXPECT_NO_THROW(Bm25Index({"a"}, {"x"}, {1.0, 2.0}));
  EXPECT_THROW(Bm25Index({"a", "a"}, {"x", "y"}), ValidationError);
}

class Bm25Properties : public ::testing::TestWithParam<uint64_t> {};

TEST_P(Bm25Properties, NonNegativeAndMonotoneInTf) {
  Rng rng(GetParam());
  const std::vector<std::string> words = {"w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7"};
  std::vector<std::vector<std::string>> docs(12);
  for (auto& d : docs) {
    const size_t len = 1 + rng.below(9);
    for (size_t i = 0; i < len; ++i) d.push_back(words[rng.below(words.size())]);
  }
  auto join = [](const std::vector<std::string>& ws) {
    std::string s;
    for (const auto& w : ws) s += w + " ";
    return s;
  };
  std::vector<std::string> texts;
  for (const auto& d : docs) texts.push_back(join(d));
  const auto ids = numbered(docs.size());
  const Bm25Index idx(ids, texts, {0.5 + 3 * rng.uniform(), 2 * rng.uniform()});
  for (const auto& w : words) {
    for (double s : idx.score_all({w})) EXPECT_GE(s, 0.0);
  }
  // Replacing another word by t raises tf(t) while keeping length, df and
  // the average length fixed.
  for (size_t d = 0; d < docs.size(); ++d) {
    const std::string t = docs[d][0];
    for (size_t i = 1; i < docs[d].size(); ++i) {
      if (docs[d][i] == t) continue;
      auto bumped_texts = texts;
      auto bumped = docs[d];
      bumped[i] = t;
      bumped_texts[d] = join(bumped);
      const Bm25Index bumped_idx(ids, bumped_texts, idx.params());
      if (bumped_idx.document_frequency(t) != idx.document_frequency(t)) continue;
      EXPECT_GE(bumped_idx.score({t}, d), idx.score({t}, d));
      break;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, Bm25Properties, ::testing::Range<uint64_t>(1, 16));

TEST(Bm25, PersistenceRoundTrip) {
  const Bm25Index idx({"d0", "d1", "d2", "d3", "d4"}, kFiveDocs, {1.7, 0.6});
  const auto path = temp_file("patgraph_bm25.json");
  idx.save(path.string());
  const auto back = Bm25Index::load(path.string());
  EXPECT_EQ(back.params(), idx.params());
  for (const char* q : {"pump", "seal valve", "motor gear housing"}) {
    EXPECT_EQ(back.search(q, 5), idx.search(q, 5));
  }
  std::filesystem::remove(path);
}

TEST(Bm25, MalformedIndexRejected) {
  EXPECT_THROW(Bm25Index::from_json(nlohmann::ordered_json{{"k1", 1.0}}), SchemaError);
}

TEST(Bm25Tuning, GridArgmaxMatchesExhaustiveOracle) {
  // Citing documents share rare terms with their cited documents; long
  // filler-heavy distractors reward length normalization.
  Rng rng(77);
  std::vector<PatentDocument> docs;
  std::vector<EvalQuery> queries;
  std::map<std::string, std::string> query_text;
  auto filler = [&](size_t n) {
    std::string s;
    for (size_t i = 0; i < n; ++i) s += "common" + std::to_string(rng.below(6)) + " ";
    return s;
  };
  for (int i = 0; i < 30; ++i) {
    const std::string key = "key" + std::to_string(i);
    PatentDocument cited;
    cited.doc_id = "c" + std::to_string(i);
    cited.family_id = cited.doc_id;
    cited.claims = {key + " " + filler(1 + rng.below(3))};
    cited.description = filler(rng.below(20));
    PatentDocument decoy;
    decoy.doc_id = "z" + std::to_string(i);
    decoy.family_id = decoy.doc_id;
    decoy.claims = {key + " " + key + " " + filler(20 + rng.below(30))};
    PatentDocument citing;
    citing.doc_id = "q" + std::to_string(i);
    citing.family_id = citing.doc_id;
    citing.claims = {key + " " + filler(3)};
    docs.insert(docs.end(), {cited, decoy, citing});
    queries.push_back({citing.doc_id, {cited.doc_id}});
    query_text[citing.doc_id] = citing.claims[0];
  }
  std::vector<std::string> ids, texts;
  for (const auto& d : docs) {
    ids.push_back(d.doc_id);
    texts.push_back(d.full_text());
  }
  const CorpusIndex corpus(docs);
  const auto grid = bm25_grid({0.5, 1.2, 2.7}, {0.0, 0.75, 1.15});
  const auto text_of = [&](const std::string& q) { return query_text.at(q); };
  const auto res = tune_bm25(Bm25Index(ids, texts), grid, queries, text_of, corpus);

  // Oracle: score every grid point by a direct per-query hit count.
  double best = -1;
  Bm25Params best_p;
  for (const auto& p : grid) {
    const Bm25Index idx(ids, texts, p);
    double hits = 0;
    for (const auto& q : queries) {
      const auto ranked = idx.search(text_of(q.doc_id), 3, [&](const std::string& id) { return id != q.doc_id; });
      for (const auto& h : ranked) hits += h.doc_id == q.relevant[0];
    }
    const double recall = hits / static_cast<double>(queries.size());
    if (recall > best) {
      best = recall;
      best_p = p;
    }
  }
  EXPECT_EQ(res.best, best_p);
  EXPECT_DOUBLE_EQ(res.best_recall, best);
  EXPECT_EQ(res.grid.size(), grid.size());

  const auto two = tune_bm25(Bm25Index(ids, texts), {{1.2, 0.75}, {2.7, 1.15}}, queries, text_of, corpus);
  const auto again = tune_bm25(Bm25Index(ids, texts), {{1.2, 0.75}, {2.7, 1.15}}, queries, text_of, corpus);
  EXPECT_EQ(two.best, again.best);
  EXPECT_EQ(two.best_recall, again.best_recall);
}
