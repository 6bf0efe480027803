#pragma once

// Deterministic keyword ruleset turning claim and description text into
// invention graphs.
//
//   R1 preamble   text before the first keyword -> root feature
//   R2 hierarchy  comprising/including/having/... lists -> part_of edges
//   R3 example    such as/for example/e.g. lists -> example_of edges
//   R4 function   wherein / for <verb>ing clauses -> relationship nodes
//   R5 normalize  lowercase, whitespace, reference numerals, unification
//   R6 fallback   no keyword -> single feature node

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "patgraph/corpus.hpp"
#include "patgraph/error.hpp"
#include "patgraph/graph.hpp"
#include "patgraph/text.hpp"

namespace patgraph {

inline constexpr size_t kMaxGraphNodes = 256;

struct RuleFiring {
  std::string rule_id;
  std::string span;
  std::vector<NodeId> nodes;  // nodes created by this firing
  std::vector<size_t> edges;  // indices into graph.edges created by this firing
};

struct RuleTrace {
  std::vector<RuleFiring> firings;

  size_t count(std::string_view rule) const {
    return static_cast<size_t>(std::count_if(firings.begin(), firings.end(),
                                             [&](const RuleFiring& f) { return f.rule_id == rule; }));
  }
};

struct ParsedClaim {
  InventionGraph graph;
  RuleTrace trace;
};

struct DocumentGraphs {
  InventionGraph first_claim;
  InventionGraph all_claims;
  InventionGraph description;
  RuleTrace trace;  // firings of the description-level merge, including cap drops
};

namespace parser_detail {

inline bool is_article(std::string_view w) { return w == "a" || w == "an" || w == "the"; }

inline bool is_hierarchy_word(std::string_view w) {
  return w == "comprising" || w == "comprises" || w == "including" || w == "includes" ||
         w == "having" || w == "contains" || w == "containing";
}

inline bool is_separator(std::string_view t) {
  return t == "," || t == ";" || t == ":" || t == ".";
}

/// Lowercase, drop parenthesized reference numerals such as "(12)" or
/// "(12a, 14)", collapse whitespace.
inline std::string normalize(std::string_view raw) {
  std::string lower = text::to_lower(raw);
  std::string out;
  out.reserve(lower.size());
  size_t i = 0;
  while (i < lower.size()) {
    if (lower[i] == '(') {
      size_t j = i + 1;
      bool digit_seen = false;
      bool ok = true;
      bool token_start = true;
      while (j < lower.size() && lower[j] != ')') {
        const char c = lower[j];
        if (c >= '0' && c <= '9') {
          digit_seen = true;
          token_start = false;
        } else if (c == ',' || text::is_space(c)) {
          token_start = true;
        } else if ((c >= 'a' && c <= 'z') || c == '\'') {
          if (token_start) {
            ok = false;
            break;
          }
        } else {
          ok = false;
          break;
        }
        ++j;
      }
      if (ok && digit_seen && j < lower.size()) {
        out.push_back(' ');
        i = j + 1;
        continue;
      }
    }
    out.push_back(lower[i]);
    ++i;
  }
  return text::collapse_whitespace(out);
}

/// Removes a leading claim number such as "1." or "12)".
inline std::string strip_claim_number(const std::string& s) {
  size_t i = 0;
  while (i < s.size() && s[i] >= '0' && s[i] <= '9') ++i;
  if (i == 0 || i >= s.size() || (s[i] != '.' && s[i] != ')')) return s;
  ++i;
  if (i < s.size() && !text::is_space(s[i])) return s;
  return std::string(text::trim(std::string_view(s).substr(i)));
}

/// Word and punctuation tokens; "e.g." and "i.e." stay whole.
inline std::vector<std::string> tokenize(const std::string& s) {
  std::vector<std::string> tokens;
  for (std::string w : text::split_whitespace(s)) {
    std::vector<std::string> tail;
    while (!w.empty()) {
      const char c = w.back();
      if (c == ',' || c == ';' || c == ':') {
        tail.emplace_back(1, c);
        w.pop_back();
      } else if (c == '.' && w != "e.g." && w != "i.e.") {
        tail.emplace_back(".");
        w.pop_back();
      } else {
        break;
      }
    }
    if (!w.empty()) tokens.push_back(std::move(w));
    tokens.insert(tokens.end(), tail.rbegin(), tail.rend());
  }
  return tokens;
}

/// Joins tokens, attaching punctuation to the preceding word.
inline std::string join(const std::vector<std::string>& tokens, size_t b, size_t e) {
  std::string s;
  for (size_t i = b; i < e; ++i) {
    if (!s.empty() && !is_separator(tokens[i])) s.push_back(' ');
    s += tokens[i];
  }
  return s;
}

inline std::string strip_trailing_punct(std::string s) {
  while (!s.empty() && (s.back() == ',' || s.back() == ';' || s.back() == ':' || s.back() == '.' ||
                        text::is_space(s.back()))) {
    s.pop_back();
  }
  return std::string(text::trim(s));
}

/// Head phrase: the part after the final comma with leading articles removed.
inline std::string head_phrase(const std::vector<std::string>& words) {
  size_t end = words.size();
  while (end > 0 && is_separator(words[end - 1])) --end;
  size_t start = 0;
  for (size_t i = 0; i < end; ++i) {
    if (words[i] == ",") start = i + 1;
  }
  std::vector<std::string> kept;
  for (size_t i = start; i < end; ++i) {
    if (is_separator(words[i])) continue;
    kept.push_back(words[i]);
  }
  size_t b = 0;
  while (b < kept.size() && is_article(kept[b])) ++b;
  std::string out;
  for (size_t i = b; i < kept.size(); ++i) {
    if (!out.empty()) out.push_back(' ');
    out += kept[i];
  }
  return out;
}

/// Drops dependent-claim references such as "of claim 1" or
/// "according to any of claims 1-3" from a preamble.
inline std::vector<std::string> strip_claim_reference(std::vector<std::string> words) {
  for (size_t i = 0; i < words.size(); ++i) {
    if (words[i] != "claim" && words[i] != "claims") continue;
    size_t b = i;
    static const std::set<std::string> lead = {"of",      "to",      "in", "according", "as",
                                               "claimed", "defined", "recited", "any",  "one",
                                               "accordance", "with"};
    while (b > 0 && lead.count(words[b - 1])) --b;
    size_t e = i + 1;
    while (e < words.size() && words[e] != "," && !is_hierarchy_word(words[e]) &&
           words[e] != "wherein") {
      const std::string& w = words[e];
      const bool numeric = !w.empty() && w[0] >= '0' && w[0] <= '9';
      if (!numeric && w != "or" && w != "to" && w != "and") break;
      ++e;
    }
    words.erase(words.begin() + static_cast<std::ptrdiff_t>(b),
                words.begin() + static_cast<std::ptrdiff_t>(e));
    break;
  }
  return words;
}

enum class SegmentType { Hierarchy, Example, Function };

struct Keyword {
  SegmentType type;
  size_t width;  // tokens consumed by the keyword itself
};

inline bool ends_with_ing(std::string_view w) {
  return w.size() > 4 && w.substr(w.size() - 3) == "ing";
}

inline std::optional<Keyword> keyword_at(const std::vector<std::string>& t, size_t i) {
  const std::string& w = t[i];
  const bool has_next = i + 1 < t.size();
  if (is_hierarchy_word(w)) return Keyword{SegmentType::Hierarchy, 1};
  if (w == "consisting" && has_next && t[i + 1] == "of") return Keyword{SegmentType::Hierarchy, 2};
  if (w == "such" && has_next && t[i + 1] == "as") return Keyword{SegmentType::Example, 2};
  if (w == "for" && has_next && t[i + 1] == "example") return Keyword{SegmentType::Example, 2};
  if (w == "e.g.") return Keyword{SegmentType::Example, 1};
  if (w == "wherein") return Keyword{SegmentType::Function, 1};
  if (w == "for" && has_next && ends_with_ing(t[i + 1])) return Keyword{SegmentType::Function, 0};
  return std::nullopt;
}

inline bool contains_keyword(const std::string& normalized) {
  const auto tokens = tokenize(normalized);
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (keyword_at(tokens, i)) return true;
  }
  return false;
}

/// Incremental graph construction with unification, edge guards, node cap
/// and rule tracing.
class GraphBuilder {
 public:
  explicit GraphBuilder(size_t cap = kMaxGraphNodes) : cap_(cap) {}

  size_t size() const { return graph_.nodes.size(); }
  bool has_root() const { return has_root_; }
  NodeId root() const { return graph_.root; }
  const InventionGraph& graph() const { return graph_; }
  RuleTrace& trace() { return trace_; }

  std::optional<NodeId> find(NodeRole role, const std::string& text) const {
    auto it = index_.find({role, text});
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  /// Returns the unified or new node; nullopt when the cap drops it.
  std::optional<NodeId> node(NodeRole role, const std::string& text, RuleFiring& firing) {
    if (auto existing = find(role, text)) {
      trace_.firings.push_back({"R5", text, {}, {}});
      return existing;
    }
    if (graph_.nodes.size() >= cap_) {
      trace_.firings.push_back({"cap", text, {}, {}});
      return std::nullopt;
    }
    NodeId id{static_cast<uint32_t>(graph_.nodes.size())};
    graph_.nodes.push_back({id, text, role});
    index_[{role, text}] = id;
    if (role == NodeRole::Feature) feature_order_.push_back(id);
    if (!has_root_) {
      graph_.root = id;
      has_root_ = true;
    }
    firing.nodes.push_back(id);
    return id;
  }

  bool edge(NodeId src, NodeId dst, EdgeKind kind, RuleFiring& firing) {
    if (src == dst) return false;
    if (kind == EdgeKind::PartOf && has_root_ && dst == graph_.root) return false;
    if (!edges_.insert({src.value, dst.value, static_cast<int>(kind)}).second) return false;
    firing.edges.push_back(graph_.edges.size());
    graph_.edges.push_back({src, dst, kind});
    return true;
  }

  void commit(RuleFiring firing) { trace_.firings.push_back(std::move(firing)); }

  const std::vector<NodeId>& features() const { return feature_order_; }

  /// Attaches every node outside the root's component to the root.
  void connect_orphans() {
    const size_t n = graph_.nodes.size();
    if (n <= 1) return;
    std::vector<std::vector<uint32_t>> nbr(n);
    for (const Edge& e : graph_.edges) {
      nbr[e.src.value].push_back(e.dst.value);
      nbr[e.dst.value].push_back(e.src.value);
    }
    std::vector<uint8_t> reached(n, 0);
    auto flood = [&](uint32_t start) {
      std::vector<uint32_t> stack{start};
      reached[start] = 1;
      while (!stack.empty()) {
        const uint32_t v = stack.back();
        stack.pop_back();
        for (uint32_t u : nbr[v]) {
          if (!reached[u]) {
            reached[u] = 1;
            stack.push_back(u);
          }
        }
      }
    };
    flood(graph_.root.value);
    for (uint32_t v = 0; v < n; ++v) {
      if (reached[v]) continue;
      RuleFiring f{"attach", graph_.nodes[v].text, {}, {}};
      edge(graph_.root, NodeId{v}, EdgeKind::PartOf, f);
      commit(std::move(f));
      // New edge joins v's whole component to the root component.
      nbr[graph_.root.value].push_back(v);
      nbr[v].push_back(graph_.root.value);
      flood(v);
    }
  }

  InventionGraph finish(std::string doc_id, GraphKind kind) {
    connect_orphans();
    graph_.doc_id = std::move(doc_id);
    graph_.kind = kind;
    return graph_;
  }

  /// Unifies another graph into this one; its root hangs off this root.
  void merge(const InventionGraph& other, const std::string& origin) {
    std::vector<std::optional<NodeId>> map(other.nodes.size());
    std::vector<const Node*> by_id(other.nodes.size());
    for (const Node& n : other.nodes) by_id[n.id.value] = &n;
    for (size_t i = 0; i < by_id.size(); ++i) {
      RuleFiring f{origin, by_id[i]->text, {}, {}};
      map[i] = node(by_id[i]->role, by_id[i]->text, f);
      if (!f.nodes.empty()) commit(std::move(f));
    }
    RuleFiring ef{origin, "edges", {}, {}};
    for (const Edge& e : other.edges) {
      const auto& s = map[e.src.value];
      const auto& d = map[e.dst.value];
      if (s && d) edge(*s, *d, e.kind, ef);
    }
    if (const auto& r = map[other.root.value]; r && has_root_) {
      edge(graph_.root, *r, EdgeKind::PartOf, ef);
    }
    if (!ef.edges.empty()) commit(std::move(ef));
  }

 private:
  size_t cap_;
  InventionGraph graph_;
  RuleTrace trace_;
  bool has_root_ = false;
  std::map<std::pair<NodeRole, std::string>, NodeId> index_;
  std::set<std::tuple<uint32_t, uint32_t, int>> edges_;
  std::vector<NodeId> feature_order_;
};

/// Feature phrases mentioned in a clause, longest match first, in order of
/// appearance.
inline std::vector<std::string> mentions(const std::vector<std::string>& clause_words,
                                         const std::vector<std::string>& phrases) {
  std::vector<std::pair<std::vector<std::string>, std::string>> cands;
  for (const auto& p : phrases) cands.emplace_back(text::split_whitespace(p), p);
  std::stable_sort(cands.begin(), cands.end(),
                   [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
  std::vector<uint8_t> used(clause_words.size(), 0);
  std::vector<std::pair<size_t, std::string>> hits;
  for (const auto& [words, phrase] : cands) {
    if (words.empty() || words.size() > clause_words.size()) continue;
    for (size_t i = 0; i + words.size() <= clause_words.size(); ++i) {
      bool match = true;
      for (size_t k = 0; k < words.size() && match; ++k) {
        match = !used[i + k] && clause_words[i + k] == words[k];
      }
      if (!match) continue;
      for (size_t k = 0; k < words.size(); ++k) used[i + k] = 1;
      hits.emplace_back(i, phrase);
    }
  }
  std::sort(hits.begin(), hits.end());
  std::vector<std::string> out;
  for (auto& [pos, phrase] : hits) {
    if (std::find(out.begin(), out.end(), phrase) == out.end()) out.push_back(phrase);
  }
  return out;
}

struct Segment {
  SegmentType type;
  bool wherein;
  size_t begin;  // first content token; "for <verb>ing" clauses keep their "for"
  size_t end;
};

/// Core of parse_claim. `context` lists feature phrases known from earlier
/// claims so that functional clauses can refer to them.
inline ParsedClaim parse_text(std::string_view raw, const std::vector<std::string>& context,
                              size_t cap = kMaxGraphNodes) {
  if (text::trim(raw).empty()) throw ValidationError("cannot parse empty claim text");

  const std::string norm = strip_claim_number(normalize(raw));
  std::vector<std::string> tokens = tokenize(norm);
  while (!tokens.empty() && tokens.back() == ".") tokens.pop_back();

  GraphBuilder b(cap);
  auto fallback = [&]() {
    size_t first = 0;
    while (first + 1 < tokens.size() && is_article(tokens[first])) ++first;
    std::string whole = strip_trailing_punct(join(tokens, first, tokens.size()));
    if (whole.empty()) whole = text::collapse_whitespace(text::to_lower(raw));
    RuleFiring f{"R6", whole, {}, {}};
    b.node(NodeRole::Feature, whole, f);
    b.commit(std::move(f));
    ParsedClaim out;
    out.trace = b.trace();
    out.graph = b.finish("", GraphKind::FirstClaim);
    return out;
  };

  // Segment the token stream at keywords.
  std::vector<Segment> segments;
  size_t preamble_end = tokens.size();
  {
    std::optional<Segment> cur;
    size_t i = 0;
    while (i < tokens.size()) {
      if (cur && cur->wherein) {
        // A wherein clause runs to the next wherein, ';' or '.'.
        const std::string& t = tokens[i];
        if (t == ";" || t == ".") {
          cur->end = i;
          segments.push_back(*cur);
          cur.reset();
          ++i;
          continue;
        }
        if (t != "wherein") {
          ++i;
          continue;
        }
      }
      const auto kw = keyword_at(tokens, i);
      if (!kw) {
        ++i;
        continue;
      }
      if (cur) {
        cur->end = i;
        segments.push_back(*cur);
      } else if (segments.empty()) {
        preamble_end = i;
      }
      cur = Segment{kw->type, tokens[i] == "wherein", i + kw->width, tokens.size()};
      i += std::max<size_t>(kw->width, 1);
    }
    if (cur) segments.push_back(*cur);
  }

  if (segments.empty()) return fallback();

  // R1: root from the preamble.
  std::vector<std::string> pre(tokens.begin(),
                               tokens.begin() + static_cast<std::ptrdiff_t>(preamble_end));
  const std::string root_text = head_phrase(strip_claim_reference(pre));
  if (root_text.empty()) return fallback();
  {
    RuleFiring f{"R1", root_text, {}, {}};
    b.node(NodeRole::Feature, root_text, f);
    b.commit(std::move(f));
  }

  std::vector<std::string> known = context;
  auto last_feature = [&]() { return b.features().back(); };

  auto split_items = [&](const Segment& s) {
    std::vector<std::string> items;
    std::vector<std::string> cur;
    auto flush = [&]() {
      std::string h = head_phrase(cur);
      if (!h.empty()) items.push_back(std::move(h));
      cur.clear();
    };
    for (size_t i = s.begin; i < s.end; ++i) {
      const std::string& t = tokens[i];
      if (is_separator(t) || t == "and") {
        flush();
      } else {
        cur.push_back(t);
      }
    }
    flush();
    return items;
  };

  for (const Segment& s : segments) {
    if (s.type == SegmentType::Hierarchy || s.type == SegmentType::Example) {
      const NodeId parent = last_feature();
      const EdgeKind kind = s.type == SegmentType::Hierarchy ? EdgeKind::PartOf : EdgeKind::ExampleOf;
      const char* rule = s.type == SegmentType::Hierarchy ? "R2" : "R3";
      for (const std::string& item : split_items(s)) {
        RuleFiring f{rule, item, {}, {}};
        if (auto child = b.node(NodeRole::Feature, item, f)) b.edge(parent, *child, kind, f);
        b.commit(std::move(f));
      }
      continue;
    }

    // R4: functional clause.
    std::string clause = strip_trailing_punct(join(tokens, s.begin, s.end));
    if (clause.empty()) continue;
    std::vector<std::string> words;
    for (size_t i = s.begin; i < s.end; ++i) {
      if (!is_separator(tokens[i])) words.push_back(tokens[i]);
    }
    std::vector<std::string> phrases = known;
    for (NodeId id : b.features()) phrases.push_back(b.graph().nodes[id.value].text);
    const auto hit = mentions(words, phrases);
    const NodeId anchor = last_feature();
    RuleFiring f{"R4", clause, {}, {}};
    auto rel = b.node(NodeRole::Relationship, clause, f);
    if (rel) {
      if (hit.size() >= 2) {
        for (const std::string& p : hit) {
          if (auto target = b.node(NodeRole::Feature, p, f)) {
            b.edge(*rel, *target, EdgeKind::Functional, f);
          }
        }
      } else {
        b.edge(*rel, anchor, EdgeKind::Functional, f);
      }
    }
    b.commit(std::move(f));
  }

  ParsedClaim out;
  out.graph = b.finish("", GraphKind::FirstClaim);
  out.trace = b.trace();
  return out;
}

/// Sentences of a description, split at '.', '!' or '?' followed by
/// whitespace or end of text; "e.g." and "i.e." do not end a sentence.
inline std::vector<std::string> sentences(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (size_t i = 0; i < s.size(); ++i) {
    cur.push_back(s[i]);
    const char c = s[i];
    if ((c == '.' || c == '!' || c == '?') && (i + 1 == s.size() || text::is_space(s[i + 1]))) {
      const std::string lower = text::to_lower(cur);
      const bool abbrev = lower.size() >= 4 && (lower.ends_with("e.g.") || lower.ends_with("i.e."));
      if (abbrev) continue;
      auto t = text::trim(cur);
      if (!t.empty()) out.emplace_back(t);
      cur.clear();
    }
  }
  auto t = text::trim(cur);
  if (!t.empty()) out.emplace_back(t);
  return out;
}

}  // namespace parser_detail

/// Converts one claim into a FirstClaim-kind graph plus its rule trace.
inline ParsedClaim parse_claim(std::string_view text) {
  return parser_detail::parse_text(text, {});
}

/// Builds the three graphs of a document. AllClaims extends the first-claim
/// graph with every further claim; Description extends AllClaims with the
/// keyword-bearing description sentences. Nodes beyond the cap are dropped,
/// description-origin nodes first since they are merged last.
inline DocumentGraphs parse_document(const PatentDocument& doc) {
  validate_document(doc);
  using namespace parser_detail;

  DocumentGraphs out;
  ParsedClaim first = parse_claim(doc.claims[0]);
  out.first_claim = first.graph;
  out.first_claim.doc_id = doc.doc_id;
  out.first_claim.kind = GraphKind::FirstClaim;

  GraphBuilder b;
  b.merge(first.graph, "claim:1");
  auto feature_texts = [&]() {
    std::vector<std::string> f;
    for (NodeId id : b.features()) f.push_back(b.graph().nodes[id.value].text);
    return f;
  };
  for (size_t i = 1; i < doc.claims.size(); ++i) {
    if (text::trim(doc.claims[i]).empty()) continue;
    ParsedClaim pc = parse_text(doc.claims[i], feature_texts());
    b.merge(pc.graph, "claim:" + std::to_string(i + 1));
  }
  b.connect_orphans();
  out.all_claims = b.graph();
  out.all_claims.doc_id = doc.doc_id;
  out.all_claims.kind = GraphKind::AllClaims;

  for (const std::string& sentence : sentences(doc.description)) {
    const std::string norm = normalize(sentence);
    if (!contains_keyword(norm)) continue;
    ParsedClaim pc = parse_text(sentence, feature_texts());
    b.merge(pc.graph, "description");
  }
  out.description = b.finish(doc.doc_id, GraphKind::Description);
  out.trace = b.trace();
  return out;
}

}  // namespace patgraph
