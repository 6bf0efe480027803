#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "patgraph/eval.hpp"
#include "patgraph/rng.hpp"

using namespace patgraph;

namespace {

std::vector<std::string> ids(std::initializer_list<const char*> xs) { return {xs.begin(), xs.end()}; }

PatentDocument doc(const std::string& id, const std::string& family) {
  PatentDocument d;
  d.doc_id = id;
  d.family_id = family;
  d.claims = {"a claim"};
  return d;
}

/// Pool "p000".."p{n-1}", one document per family, plus query "q".
CorpusIndex flat_corpus(size_t n) {
  std::vector<PatentDocument> docs{doc("q", "fq")};
  for (size_t i = 0; i < n; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "p%03zu", i);
    docs.push_back(doc(buf, std::string("f") + buf));
  }
  return CorpusIndex(docs);
}

SearchFn ranked_by_scores(const std::vector<std::string>& pool, const std::vector<double>& scores) {
  return [pool, scores](const std::string&, size_t k, const std::function<bool(const std::string&)>& keep) {
    std::vector<size_t> order(pool.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
    std::vector<std::string> out;
    for (size_t i : order) {
      if (out.size() == k) break;
      if (keep(pool[i])) out.push_back(pool[i]);
    }
    return out;
  };
}

}  // namespace

TEST(RecallAtK, RankThreeIsInsideTopThree) {
  EXPECT_EQ(recall_at_k(ids({"a", "b", "r"}), {"r"}, 3), 1.0);
}

TEST(RecallAtK, RankFourIsOutside) {
  EXPECT_EQ(recall_at_k(ids({"a", "b", "c", "r"}), {"r"}, 3), 0.0);
}

TEST(RecallAtK, HalfOfTwoRelevant) {
  EXPECT_EQ(recall_at_k(ids({"r1", "a", "b", "r2"}), {"r1", "r2"}, 3), 0.5);
}

TEST(RecallAtK, Errors) {
  EXPECT_THROW(recall_at_k(ids({"a"}), {}, 3), ValidationError);
  EXPECT_THROW(recall_at_k(ids({"a"}), {"a"}, 0), UsageError);
}

TEST(NdcgAtK, SingleRelevantAtRankOne) { EXPECT_EQ(ndcg_at_k(ids({"r", "a"}), {"r"}, 150), 1.0); }

TEST(NdcgAtK, SingleRelevantAtRankThree) {
  EXPECT_DOUBLE_EQ(ndcg_at_k(ids({"a", "b", "r"}), {"r"}, 150), 0.5);
}

TEST(NdcgAtK, TwoRelevantInIdealPrefix) {
  EXPECT_DOUBLE_EQ(ndcg_at_k(ids({"r2", "r1", "a"}), {"r1", "r2"}, 150), 1.0);
}

TEST(NdcgAtK, IdealIsCappedByK) {
  // Three relevant but k = 2: the ideal ranking only has two slots.
  EXPECT_DOUBLE_EQ(ndcg_at_k(ids({"r1", "r2", "r3"}), {"r1", "r2", "r3"}, 2), 1.0);
}

TEST(NdcgAtK, Errors) {
  EXPECT_THROW(ndcg_at_k(ids({"a"}), {}, 3), ValidationError);
  EXPECT_THROW(ndcg_at_k(ids({"a"}), {"a"}, 0), UsageError);
}

TEST(EvaluateRun, OracleRetrieverIsPerfect) {
  const CorpusIndex corpus = flat_corpus(20);
  SearchFn oracle = [](const std::string&, size_t k, const std::function<bool(const std::string&)>&) {
    std::vector<std::string> out{"p007"};
    for (size_t i = 0; out.size() < k && i < 20; ++i) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "p%03zu", i);
      if (i != 7) out.emplace_back(buf);
    }
    return out;
  };
  const auto rep = evaluate_run({{"q", {"p007"}}}, oracle, corpus, 20);
  EXPECT_EQ(rep.recall_at_k, 1.0);
  EXPECT_EQ(rep.ndcg_at_k, 1.0);
  EXPECT_EQ(rep.queries[0].first_relevant_rank, 1);
}

TEST(EvaluateRun, RandomRetrieverMatchesThreeOverPool) {
  constexpr size_t kPool = 500, kTrials = 10000;
  const CorpusIndex corpus = flat_corpus(kPool);
  std::vector<std::string> pool;
  for (size_t i = 0; i < kPool; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "p%03zu", i);
    pool.emplace_back(buf);
  }
  Rng rng(20240611);
  std::vector<EvalQuery> queries;
  for (size_t t = 0; t < kTrials; ++t) queries.push_back({"q", {pool[rng.below(kPool)]}});
  SearchFn random_search = [&](const std::string&, size_t k, const std::function<bool(const std::string&)>&) {
    auto perm = pool;
    rng.shuffle(perm);
    perm.resize(std::min(k, perm.size()));
    return perm;
  };
  const auto rep = evaluate_run(queries, random_search, corpus, kPool, 3, 150);
  EXPECT_NEAR(rep.recall_at_k, 3.0 / kPool, 0.003);
  EXPECT_EQ(rep.query_count, kTrials);
}

TEST(EvaluateRun, SameFamilyCandidatesNeverScored) {
  const CorpusIndex corpus({doc("q", "F"), doc("q-twin", "F"), doc("a", "A"), doc("b", "B")});
  std::vector<std::string> seen;
  SearchFn leaky = [&](const std::string&, size_t, const std::function<bool(const std::string&)>&) {
    return ids({"q-twin", "q", "b", "a"});
  };
  const auto rep = evaluate_run({{"q", {"a"}}}, leaky, corpus, 4, 1, 150);
  // Without exclusion "a" sits at rank 4; with it, rank 2.
  EXPECT_EQ(rep.queries[0].first_relevant_rank, 2);
  EXPECT_DOUBLE_EQ(rep.ndcg_at_k, 1.0 / std::log2(3.0));
}

TEST(EvaluateRun, KeepFilterExcludesQueryAndFamily) {
  const CorpusIndex corpus({doc("q", "F"), doc("q-twin", "F"), doc("a", "A")});
  SearchFn probe = [](const std::string&, size_t, const std::function<bool(const std::string&)>& keep) {
    EXPECT_FALSE(keep("q"));
    EXPECT_FALSE(keep("q-twin"));
    EXPECT_TRUE(keep("a"));
    return ids({"a"});
  };
  evaluate_run({{"q", {"a"}}}, probe, corpus, 3);
}

TEST(EvaluateRun, UnknownQueryDocRejected) {
  const CorpusIndex corpus = flat_corpus(3);
  SearchFn none = [](const std::string&, size_t, const std::function<bool(const std::string&)>&) {
    return std::vector<std::string>{};
  };
  EXPECT_THROW(evaluate_run({{"missing", {"p000"}}}, none, corpus, 3), ValidationError);
}

TEST(EvaluateRun, AnyRelevantMode) {
  const CorpusIndex corpus = flat_corpus(10);
  SearchFn s = [](const std::string&, size_t, const std::function<bool(const std::string&)>&) {
    return ids({"p001", "p002", "p003", "p004"});
  };
  const EvalQuery q{"q", {"p001", "p009"}};
  EXPECT_EQ(evaluate_run({q}, s, corpus, 10).recall_at_k, 0.5);
  EXPECT_EQ(evaluate_run({q}, s, corpus, 10, 3, 150, RecallMode::AnyRelevant).recall_at_k, 1.0);
}

TEST(EvaluateRun, ThreadCountDoesNotChangeReport) {
  const CorpusIndex corpus = flat_corpus(50);
  std::vector<std::string> pool;
  std::vector<double> scores;
  Rng rng(3);
  for (size_t i = 0; i < 50; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "p%03zu", i);
    pool.emplace_back(buf);
    scores.push_back(rng.uniform());
  }
  std::vector<EvalQuery> qs;
  for (size_t i = 0; i < 40; ++i) qs.push_back({"q", {pool[i], pool[(i * 7) % 50]}});
  const auto search = ranked_by_scores(pool, scores);
  const auto a = evaluate_run(qs, search, corpus, 50, 3, 150, RecallMode::MeanOverRelevant, 1);
  const auto b = evaluate_run(qs, search, corpus, 50, 3, 150, RecallMode::MeanOverRelevant, 4);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
}

class MetricProperties : public ::testing::TestWithParam<uint64_t> {};

TEST_P(MetricProperties, MonotoneScoreTransformLeavesMetricsUnchanged) {
  Rng rng(GetParam());
  const size_t n = 60;
  const CorpusIndex corpus = flat_corpus(n);
  std::vector<std::string> pool;
  std::vector<double> scores, transformed;
  for (size_t i = 0; i < n; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "p%03zu", i);
    pool.emplace_back(buf);
    scores.push_back(rng.normal());
    transformed.push_back(std::exp(3.0 * scores.back()) - 7.0);
  }
  std::vector<EvalQuery> qs;
  for (int i = 0; i < 10; ++i) {
    const size_t r = 1 + rng.below(4);
    EvalQuery q{"q", {}};
    for (size_t j = 0; j < r; ++j) q.relevant.push_back(pool[rng.below(n)]);
    qs.push_back(q);
  }
  const auto a = evaluate_run(qs, ranked_by_scores(pool, scores), corpus, n, 3, 20);
  const auto b = evaluate_run(qs, ranked_by_scores(pool, transformed), corpus, n, 3, 20);
  EXPECT_EQ(a.recall_at_k, b.recall_at_k);
  EXPECT_EQ(a.ndcg_at_k, b.ndcg_at_k);
}

TEST_P(MetricProperties, RecallNonDecreasingInK) {
  Rng rng(GetParam());
  std::vector<std::string> ranked;
  for (int i = 0; i < 30; ++i) ranked.push_back("d" + std::to_string(i));
  rng.shuffle(ranked);
  std::set<std::string> rel;
  for (int i = 0; i < 5; ++i) rel.insert("d" + std::to_string(rng.below(30)));
  double prev = 0;
  for (size_t k = 1; k <= 35; ++k) {
    const double r = recall_at_k(ranked, rel, k);
    EXPECT_GE(r, prev);
    prev = r;
  }
  EXPECT_EQ(prev, 1.0);
}

TEST_P(MetricProperties, NdcgBoundsAndIdealCharacterisation) {
  Rng rng(GetParam());
  std::vector<std::string> ranked;
  for (int i = 0; i < 25; ++i) ranked.push_back("d" + std::to_string(i));
  rng.shuffle(ranked);
  std::set<std::string> rel;
  const size_t r = 1 + rng.below(5);
  while (rel.size() < r) rel.insert("d" + std::to_string(rng.below(25)));
  const double v = ndcg_at_k(ranked, rel, 25);
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, 1.0 + 1e-12);
  const bool ideal = std::all_of(ranked.begin(), ranked.begin() + static_cast<long>(rel.size()),
                                 [&](const std::string& d) { return rel.count(d) > 0; });
  EXPECT_EQ(std::abs(v - 1.0) < 1e-12, ideal);

  std::vector<std::string> best(rel.begin(), rel.end());
  for (const auto& d : ranked) {
    if (!rel.count(d)) best.push_back(d);
  }
  EXPECT_NEAR(ndcg_at_k(best, rel, 25), 1.0, 1e-12);
}

INSTANTIATE_TEST_SUITE_P(Seeds, MetricProperties, ::testing::Range<uint64_t>(1, 21));

TEST(EvalQueries, BuildFromXCitationsOnly) {
  std::vector<CitationRecord> cites = {{"q1", "a", CitationCategory::X},
                                       {"q1", "b", CitationCategory::Y},
                                       {"q1", "c", CitationCategory::X},
                                       {"q2", "a", CitationCategory::A},
                                       {"q3", "a", CitationCategory::X}};
  const auto qs = build_queries(cites, {"q1", "q2"});
  ASSERT_EQ(qs.size(), 1u);
  EXPECT_EQ(qs[0].doc_id, "q1");
  EXPECT_EQ(qs[0].relevant, ids({"a", "c"}));
}

TEST(EvalQueries, JsonlRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "patgraph_queries.jsonl";
  const std::vector<EvalQuery> qs = {{"q1", {"a", "b"}}, {"q2", {"c"}}};
  write_queries(path.string(), qs);
  const auto back = read_queries(path.string());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].relevant, qs[0].relevant);
  EXPECT_EQ(back[1].doc_id, "q2");
  std::filesystem::remove(path);
}

TEST(EvalReport, CsvHasOneRowPerQuery) {
  EvalReport r;
  r.queries = {{"q1", 1, 1.0, 1.0, 1}, {"q2", 2, 0.5, 0.25, 3}};
  const auto csv = r.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(csv.find("q2,2,0.5,0.25,3"), std::string::npos);
}
