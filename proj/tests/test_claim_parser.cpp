#include <gtest/gtest.h>

#include <map>
#include <set>

#include "patgraph/claim_parser.hpp"
#include "patgraph/rng.hpp"
#include "patgraph/synth.hpp"

using namespace patgraph;

namespace {

std::map<std::string, uint32_t> ids_by_text(const InventionGraph& g) {
  std::map<std::string, uint32_t> m;
  for (const auto& n : g.nodes) m[n.text] = n.id.value;
  return m;
}

std::set<std::tuple<std::string, std::string, EdgeKind>> edge_texts(const InventionGraph& g) {
  std::set<std::tuple<std::string, std::string, EdgeKind>> s;
  for (const auto& e : g.edges) s.insert({g.nodes[e.src.value].text, g.nodes[e.dst.value].text, e.kind});
  return s;
}

std::multiset<std::string> feature_texts(const InventionGraph& g) {
  std::multiset<std::string> s;
  for (const auto& n : g.nodes) {
    if (n.role == NodeRole::Feature) s.insert(n.text);
  }
  return s;
}

PatentDocument make_doc(std::vector<std::string> claims, std::string description = "") {
  PatentDocument d;
  d.doc_id = "D";
  d.family_id = "F";
  d.ipc_class = "E01H";
  d.claims = std::move(claims);
  d.description = std::move(description);
  return d;
}

}  // namespace

TEST(ParseClaim, Snowthrower) {
  const auto [g, trace] = parse_claim(
      "1. A snowthrower comprising a frame, a motor and an auger housing, wherein the frame connects the motor "
      "and the auger housing.");
  const std::string rel = "the frame connects the motor and the auger housing";
  const std::set<std::string> expected_nodes = {"snowthrower", "frame", "motor", "auger housing", rel};
  std::set<std::string> got;
  for (const auto& n : g.nodes) got.insert(n.text);
  EXPECT_EQ(got, expected_nodes);
  ASSERT_EQ(g.nodes.size(), 5u);
  EXPECT_EQ(g.nodes[g.root.value].text, "snowthrower");
  const auto id = ids_by_text(g);
  EXPECT_EQ(g.nodes[id.at(rel)].role, NodeRole::Relationship);
  const std::set<std::tuple<std::string, std::string, EdgeKind>> edges = {
      {"snowthrower", "frame", EdgeKind::PartOf},
      {"snowthrower", "motor", EdgeKind::PartOf},
      {"snowthrower", "auger housing", EdgeKind::PartOf},
      {rel, "frame", EdgeKind::Functional},
      {rel, "motor", EdgeKind::Functional},
      {rel, "auger housing", EdgeKind::Functional}};
  EXPECT_EQ(edge_texts(g), edges);
  EXPECT_EQ(g.edges.size(), 6u);
  EXPECT_EQ(trace.count("R1"), 1u);
  EXPECT_EQ(trace.count("R2"), 3u);  // one firing per listed child
  EXPECT_EQ(trace.count("R4"), 1u);
}

TEST(ParseClaim, FallbackSingleNode) {
  const auto [g, trace] = parse_claim("A widget.");
  ASSERT_EQ(g.nodes.size(), 1u);
  EXPECT_EQ(g.nodes[0].text, "widget");
  EXPECT_TRUE(g.edges.empty());
  EXPECT_EQ(trace.count("R6"), 1u);
}

TEST(ParseClaim, ExampleOfChain) {
  const auto g = parse_claim("A pump comprising a valve, such as a ball valve.").graph;
  const std::set<std::tuple<std::string, std::string, EdgeKind>> edges = {
      {"pump", "valve", EdgeKind::PartOf}, {"valve", "ball valve", EdgeKind::ExampleOf}};
  EXPECT_EQ(edge_texts(g), edges);
  EXPECT_EQ(g.nodes.size(), 3u);
}

TEST(ParseClaim, EmptyTextRejected) {
  EXPECT_THROW(parse_claim(""), ValidationError);
  EXPECT_THROW(parse_claim(" \t\n "), ValidationError);
}

TEST(ParseClaim, NormalizationAndUnification) {
  const auto g = parse_claim("A Pump (10) comprising a  Valve (12), a seal and a valve.").graph;
  const std::multiset<std::string> expected = {"pump", "valve", "seal"};
  EXPECT_EQ(feature_texts(g), expected);
}

TEST(ParseClaim, SingleMentionClauseHangsOffNearestFeature) {
  const auto g = parse_claim("A lamp comprising a bulb and a switch, wherein the switch is waterproof.").graph;
  const auto id = ids_by_text(g);
  ASSERT_EQ(g.nodes.size(), 4u);
  bool found = false;
  for (const auto& n : g.nodes) {
    if (n.role != NodeRole::Relationship) continue;
    found = true;
    for (const auto& e : g.edges) {
      if (e.dst == n.id) EXPECT_EQ(e.src.value, id.at("switch"));
    }
  }
  EXPECT_TRUE(found);
}

TEST(ParseClaim, TraceCoversEveryNodeAndEdgeOnce) {
  const auto [g, trace] = parse_claim(
      "An apparatus comprising a housing having a lid and a hinge, a motor such as a stepper motor, wherein "
      "the lid engages the hinge.");
  std::vector<int> node_hits(g.nodes.size(), 0), edge_hits(g.edges.size(), 0);
  for (const auto& f : trace.firings) {
    for (auto n : f.nodes) ++node_hits.at(n.value);
    for (auto e : f.edges) ++edge_hits.at(e);
  }
  for (size_t i = 0; i < node_hits.size(); ++i) EXPECT_EQ(node_hits[i], 1) << g.nodes[i].text;
  for (size_t i = 0; i < edge_hits.size(); ++i) EXPECT_EQ(edge_hits[i], 1) << i;
  EXPECT_TRUE(validate(g).ok());
}

TEST(ParseClaim, NeverThrowsOnArbitraryText) {
  Rng rng(17);
  const std::vector<std::string> pieces = {"a",     "the",   "comprising", ",",      ";",   "and", "such as",
                                           "e.g.",  "wherein", "for holding", "(3)",  "\xC3\xA9t\xC3\xA9",
                                           "\xE2\x80\x94", "frame", "motor", "including", ".",  "  ",  "\xF0\x9F\x94\xA7",
                                           "\xFF\xFE", "consisting of", "for example"};
  for (int rep = 0; rep < 2000; ++rep) {
    std::string s;
    for (size_t k = 1 + rng.below(25); k > 0; --k) s += pieces[rng.below(pieces.size())] + " ";
    if (text::trim(s).empty()) continue;
    try {
      const auto g = parse_claim(s).graph;
      EXPECT_TRUE(validate(g).ok()) << s;
    } catch (const ValidationError&) {
      // Inputs that normalize to nothing are rejected as empty.
    }
  }
}

TEST(ParseClaim, Deterministic) {
  const std::string c = "A device comprising a base, a arm including a joint, wherein the arm rotates the base.";
  EXPECT_EQ(serialize(parse_claim(c).graph), serialize(parse_claim(c).graph));
}

TEST(ParseDocument, SingleClaimNoDescriptionGivesEqualGraphs) {
  const auto dg = parse_document(make_doc({"A widget comprising a gear and a shaft."}));
  auto strip = [](InventionGraph g) {
    g.kind = GraphKind::FirstClaim;
    return g;
  };
  EXPECT_EQ(strip(dg.all_claims), dg.first_claim);
  EXPECT_EQ(strip(dg.description), dg.first_claim);
  EXPECT_EQ(dg.all_claims.kind, GraphKind::AllClaims);
  EXPECT_EQ(dg.description.kind, GraphKind::Description);
}

TEST(ParseDocument, SharedPhraseUnifiesAcrossClaims) {
  const auto dg = parse_document(make_doc({"A cart comprising a frame and a wheel.",
                                           "The cart of claim 1, further comprising a bracket, wherein the frame holds the bracket."}));
  const auto f = feature_texts(dg.all_claims);
  EXPECT_EQ(f.count("frame"), 1u);
  EXPECT_EQ(f.count("bracket"), 1u);
  EXPECT_TRUE(validate(dg.all_claims).ok());
}

TEST(ParseDocument, DescriptionAddsOnlyKeywordSentences) {
  const auto dg = parse_document(make_doc({"A cart comprising a frame and a wheel."},
                                          "The cart is red. The frame includes a rail. It rolls well."));
  const auto f = feature_texts(dg.description);
  EXPECT_EQ(f.count("rail"), 1u);
  EXPECT_EQ(f.count("frame"), 1u);
  EXPECT_EQ(dg.description.nodes.size(), dg.all_claims.nodes.size() + 1);
}

TEST(ParseDocument, NodeCapDropsDescriptionNodes) {
  std::string desc;
  for (int i = 0; i < 400; ++i) desc += "The frame includes a part" + std::to_string(i) + "x. ";
  const auto dg = parse_document(make_doc({"A cart comprising a frame and a wheel."}, desc));
  EXPECT_EQ(dg.description.nodes.size(), kMaxGraphNodes);
  EXPECT_EQ(feature_texts(dg.description).count("wheel"), 1u);
  EXPECT_TRUE(validate(dg.description).ok());
}

class ParseSynthetic : public ::testing::TestWithParam<uint64_t> {};

TEST_P(ParseSynthetic, PlantedStructureAndKindMonotonicity) {
  GeneratorConfig cfg;
  cfg.seed = GetParam();
  cfg.n_topics = 3;
  cfg.docs_per_topic = 15;
  const auto corpus = generate(cfg);
  for (const auto& d : corpus.documents) {
    const auto dg = parse_document(d);
    for (const auto* g : {&dg.first_claim, &dg.all_claims, &dg.description}) {
      ASSERT_TRUE(validate(*g).ok()) << d.doc_id;
    }
    const auto a = feature_texts(dg.first_claim), b = feature_texts(dg.all_claims),
               c = feature_texts(dg.description);
    EXPECT_TRUE(std::includes(b.begin(), b.end(), a.begin(), a.end()));
    EXPECT_TRUE(std::includes(c.begin(), c.end(), b.begin(), b.end()));
    const auto& info = corpus.info.at(d.doc_id);
    if (info.paraphrase) continue;
    // "A dev comprising a c1, a c2 and a c3, wherein the c1 v the c2."
    const auto& g = dg.first_claim;
    ASSERT_EQ(g.nodes.size(), 5u) << d.claims[0];
    const auto& cc = info.claim_components;
    std::set<std::tuple<std::string, std::string, EdgeKind>> expect = {
        {info.device, cc[0], EdgeKind::PartOf}, {info.device, cc[1], EdgeKind::PartOf},
        {info.device, cc[2], EdgeKind::PartOf}};
    std::string rel;
    for (const auto& n : g.nodes) {
      if (n.role == NodeRole::Relationship) rel = n.text;
    }
    expect.insert({rel, cc[0], EdgeKind::Functional});
    expect.insert({rel, cc[1], EdgeKind::Functional});
    EXPECT_EQ(edge_texts(g), expect) << d.claims[0];
    // The description realises every planted component exactly once.
    const auto feats = feature_texts(dg.description);
    for (const auto& comp : info.components) EXPECT_EQ(feats.count(comp), 1u) << comp;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, ParseSynthetic, ::testing::Values(1, 2, 3));
