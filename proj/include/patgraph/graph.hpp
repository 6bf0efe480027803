#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "patgraph/error.hpp"
#include "patgraph/text.hpp"

namespace patgraph {

struct NodeId {
  uint32_t value = 0;
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

enum class NodeRole { Feature, Relationship };
enum class EdgeKind { PartOf, ExampleOf, Functional };
enum class GraphKind { FirstClaim, AllClaims, Description };

struct Node {
  NodeId id;
  std::string text;
  NodeRole role = NodeRole::Feature;
  friend bool operator==(const Node&, const Node&) = default;
};

struct Edge {
  NodeId src;
  NodeId dst;
  EdgeKind kind = EdgeKind::PartOf;
  friend bool operator==(const Edge&, const Edge&) = default;
};

/// Features and relationship snippets of one document, linked by typed edges.
/// Edges are directed (parent to child for PartOf/ExampleOf, relationship to
/// participant for Functional); the encoder symmetrizes them.
struct InventionGraph {
  std::string doc_id;
  GraphKind kind = GraphKind::FirstClaim;
  std::vector<Node> nodes;
  std::vector<Edge> edges;
  NodeId root;

  size_t node_count() const { return nodes.size(); }
  friend bool operator==(const InventionGraph&, const InventionGraph&) = default;
};

// ---------------------------------------------------------------------------
// Enum names as they appear in the corpus files.

inline std::string_view to_string(NodeRole r) {
  return r == NodeRole::Feature ? "feature" : "relationship";
}

inline std::string_view to_string(EdgeKind k) {
  switch (k) {
    case EdgeKind::PartOf: return "part_of";
    case EdgeKind::ExampleOf: return "example_of";
    case EdgeKind::Functional: return "functional";
  }
  return "part_of";
}

inline std::string_view to_string(GraphKind k) {
  switch (k) {
    case GraphKind::FirstClaim: return "first_claim";
    case GraphKind::AllClaims: return "all_claims";
    case GraphKind::Description: return "description";
  }
  return "first_claim";
}

inline std::optional<NodeRole> parse_node_role(std::string_view s) {
  if (s == "feature") return NodeRole::Feature;
  if (s == "relationship") return NodeRole::Relationship;
  return std::nullopt;
}

inline std::optional<EdgeKind> parse_edge_kind(std::string_view s) {
  if (s == "part_of") return EdgeKind::PartOf;
  if (s == "example_of") return EdgeKind::ExampleOf;
  if (s == "functional") return EdgeKind::Functional;
  return std::nullopt;
}

inline std::optional<GraphKind> parse_graph_kind(std::string_view s) {
  if (s == "first_claim") return GraphKind::FirstClaim;
  if (s == "all_claims") return GraphKind::AllClaims;
  if (s == "description") return GraphKind::Description;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Validation

enum class ViolationCode {
  EmptyGraph,
  DuplicateNodeId,
  NodeIdOutOfRange,
  EmptyText,
  DanglingEdge,
  SelfLoopEdge,
  DuplicateEdge,
  RootOutOfRange,
  RootHasPartOfParent,
  NotWeaklyConnected,
};

struct Violation {
  ViolationCode code;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }
  bool has(ViolationCode code) const {
    return std::any_of(violations.begin(), violations.end(),
                       [code](const Violation& v) { return v.code == code; });
  }
  std::string summary() const {
    std::string s;
    for (const auto& v : violations) {
      if (!s.empty()) s += "; ";
      s += v.message;
    }
    return s;
  }
};

/// Lists every invariant violation. Never throws on well-typed input.
inline ValidationReport validate(const InventionGraph& g) {
  ValidationReport report;
  auto add = [&](ViolationCode code, std::string msg) {
    report.violations.push_back({code, std::move(msg)});
  };
  const size_t n = g.nodes.size();
  if (n == 0) {
    add(ViolationCode::EmptyGraph, "graph has no nodes");
    return report;
  }

  std::vector<uint8_t> seen(n, 0);
  for (const Node& node : g.nodes) {
    const uint32_t id = node.id.value;
    if (id >= n) {
      add(ViolationCode::NodeIdOutOfRange,
          "node id " + std::to_string(id) + " outside [0, " + std::to_string(n) + ")");
    } else if (seen[id]++) {
      add(ViolationCode::DuplicateNodeId, "duplicate node id " + std::to_string(id));
    }
    if (text::trim(node.text).empty()) {
      add(ViolationCode::EmptyText, "node " + std::to_string(id) + " has empty text");
    }
  }

  auto exists = [&](NodeId id) { return id.value < n && seen[id.value]; };
  std::vector<std::tuple<uint32_t, uint32_t, int>> triples;
  triples.reserve(g.edges.size());
  for (const Edge& e : g.edges) {
    if (!exists(e.src) || !exists(e.dst)) {
      add(ViolationCode::DanglingEdge, "dangling edge endpoint " + std::to_string(e.src.value) +
                                           "->" + std::to_string(e.dst.value));
      continue;
    }
    if (e.src == e.dst) {
      add(ViolationCode::SelfLoopEdge, "self-loop edge on node " + std::to_string(e.src.value));
    }
    triples.emplace_back(e.src.value, e.dst.value, static_cast<int>(e.kind));
  }
  std::sort(triples.begin(), triples.end());
  for (size_t i = 1; i < triples.size(); ++i) {
    if (triples[i] == triples[i - 1]) {
      add(ViolationCode::DuplicateEdge,
          "duplicate edge " + std::to_string(std::get<0>(triples[i])) + "->" +
              std::to_string(std::get<1>(triples[i])));
    }
  }

  if (!exists(g.root)) {
    add(ViolationCode::RootOutOfRange, "root " + std::to_string(g.root.value) + " is not a node");
  } else {
    for (const Edge& e : g.edges) {
      if (e.dst == g.root && e.kind == EdgeKind::PartOf) {
        add(ViolationCode::RootHasPartOfParent, "root has an incoming part_of edge");
        break;
      }
    }
  }

  // Weak connectivity over the edges whose endpoints exist.
  std::vector<uint32_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0u);
  auto find = [&](uint32_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const Edge& e : g.edges) {
    if (exists(e.src) && exists(e.dst)) parent[find(e.src.value)] = find(e.dst.value);
  }
  size_t components = 0;
  for (uint32_t i = 0; i < n; ++i) {
    if (seen[i] && find(i) == i) ++components;
  }
  if (components > 1) {
    add(ViolationCode::NotWeaklyConnected,
        "graph not weakly connected (" + std::to_string(components) + " components)");
  }
  return report;
}

inline void require_valid(const InventionGraph& g) {
  const auto report = validate(g);
  if (!report.ok()) {
    throw ValidationError("invalid graph '" + g.doc_id + "': " + report.summary());
  }
}

// ---------------------------------------------------------------------------
// Adjacency

/// CSR neighbor lists: undirected, one self-loop per node, neighbors sorted.
struct Adjacency {
  std::vector<uint32_t> offsets;    // node_count + 1
  std::vector<uint32_t> neighbors;  // flattened, sorted per node

  size_t node_count() const { return offsets.empty() ? 0 : offsets.size() - 1; }
  size_t entry_count() const { return neighbors.size(); }
  std::span<const uint32_t> neighbors_of(size_t v) const {
    return {neighbors.data() + offsets[v], offsets[v + 1] - offsets[v]};
  }

  /// Complete graph with self-loops, used for dense references.
  static Adjacency complete(size_t n) {
    Adjacency a;
    a.offsets.resize(n + 1);
    for (size_t v = 0; v <= n; ++v) a.offsets[v] = static_cast<uint32_t>(v * n);
    a.neighbors.resize(n * n);
    for (size_t v = 0; v < n; ++v) {
      for (size_t u = 0; u < n; ++u) a.neighbors[v * n + u] = static_cast<uint32_t>(u);
    }
    return a;
  }
};

inline Adjacency to_adjacency(const InventionGraph& g) {
  require_valid(g);
  const size_t n = g.nodes.size();
  std::vector<std::vector<uint32_t>> lists(n);
  for (size_t v = 0; v < n; ++v) lists[v].push_back(static_cast<uint32_t>(v));
  for (const Edge& e : g.edges) {
    lists[e.src.value].push_back(e.dst.value);
    lists[e.dst.value].push_back(e.src.value);
  }
  Adjacency a;
  a.offsets.reserve(n + 1);
  a.offsets.push_back(0);
  for (auto& l : lists) {
    std::sort(l.begin(), l.end());
    l.erase(std::unique(l.begin(), l.end()), l.end());
    a.neighbors.insert(a.neighbors.end(), l.begin(), l.end());
    a.offsets.push_back(static_cast<uint32_t>(a.neighbors.size()));
  }
  return a;
}

// ---------------------------------------------------------------------------
// Serialization: one compact JSON object per graph.

inline nlohmann::ordered_json to_json(const InventionGraph& g) {
  nlohmann::ordered_json j;
  j["doc_id"] = g.doc_id;
  j["kind"] = to_string(g.kind);
  j["root"] = g.root.value;
  auto nodes = nlohmann::ordered_json::array();
  for (const Node& n : g.nodes) {
    nlohmann::ordered_json jn;
    jn["id"] = n.id.value;
    jn["text"] = n.text;
    jn["role"] = to_string(n.role);
    nodes.push_back(std::move(jn));
  }
  j["nodes"] = std::move(nodes);
  auto edges = nlohmann::ordered_json::array();
  for (const Edge& e : g.edges) {
    nlohmann::ordered_json je;
    je["src"] = e.src.value;
    je["dst"] = e.dst.value;
    je["kind"] = to_string(e.kind);
    edges.push_back(std::move(je));
  }
  j["edges"] = std::move(edges);
  return j;
}

namespace detail {

template <typename Json>
const Json& field(const Json& j, const char* key, const std::string& ctx) {
  auto it = j.find(key);
  if (it == j.end()) throw SchemaError(ctx + ": missing field \"" + key + "\"");
  return *it;
}

template <typename Json>
std::string string_field(const Json& j, const char* key, const std::string& ctx) {
  const auto& v = field(j, key, ctx);
  if (!v.is_string()) throw SchemaError(ctx + ": field \"" + key + "\" must be a string");
  return v.template get<std::string>();
}

template <typename Json>
uint32_t id_field(const Json& j, const char* key, const std::string& ctx) {
  const auto& v = field(j, key, ctx);
  if (!v.is_number_integer() || v.template get<int64_t>() < 0 ||
      v.template get<int64_t>() > static_cast<int64_t>(UINT32_MAX)) {
    throw SchemaError(ctx + ": field \"" + key + "\" must be a non-negative integer");
  }
  return static_cast<uint32_t>(v.template get<int64_t>());
}

}  // namespace detail

template <typename Json>
InventionGraph graph_from_json(const Json& j) {
  const std::string ctx = "graph record";
  if (!j.is_object()) throw SchemaError(ctx + ": expected a JSON object");
  InventionGraph g;
  g.doc_id = detail::string_field(j, "doc_id", ctx);
  auto kind = parse_graph_kind(detail::string_field(j, "kind", ctx));
  if (!kind) throw SchemaError(ctx + ": unknown graph kind");
  g.kind = *kind;
  g.root = NodeId{detail::id_field(j, "root", ctx)};
  const auto& nodes = detail::field(j, "nodes", ctx);
  const auto& edges = detail::field(j, "edges", ctx);
  if (!nodes.is_array() || !edges.is_array()) {
    throw SchemaError(ctx + ": nodes and edges must be arrays");
  }
  for (const auto& jn : nodes) {
    if (!jn.is_object()) throw SchemaError(ctx + ": node must be an object");
    Node n;
    n.id = NodeId{detail::id_field(jn, "id", ctx)};
    n.text = detail::string_field(jn, "text", ctx);
    auto role = parse_node_role(detail::string_field(jn, "role", ctx));
    if (!role) throw SchemaError(ctx + ": unknown node role");
    n.role = *role;
    g.nodes.push_back(std::move(n));
  }
  for (const auto& je : edges) {
    if (!je.is_object()) throw SchemaError(ctx + ": edge must be an object");
    Edge e;
    e.src = NodeId{detail::id_field(je, "src", ctx)};
    e.dst = NodeId{detail::id_field(je, "dst", ctx)};
    auto kind_e = parse_edge_kind(detail::string_field(je, "kind", ctx));
    if (!kind_e) throw SchemaError(ctx + ": unknown edge kind");
    e.kind = *kind_e;
    g.edges.push_back(e);
  }
  return g;
}

/// One-line JSON. Requires a valid graph.
inline std::string serialize(const InventionGraph& g) {
  require_valid(g);
  return to_json(g).dump();
}

/// Parses one record and enforces the graph invariants.
inline InventionGraph deserialize(std::string_view line) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("malformed graph JSON: ") + e.what());
  }
  InventionGraph g = graph_from_json(j);
  require_valid(g);
  return g;
}

inline void write_graph_corpus(const std::string& path, std::span<const InventionGraph> graphs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write graph corpus: " + path);
  for (const auto& g : graphs) out << serialize(g) << '\n';
}

inline std::vector<InventionGraph> read_graph_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read graph corpus: " + path);
  std::vector<InventionGraph> graphs;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    try {
      graphs.push_back(deserialize(line));
    } catch (const Error& e) {
      throw SchemaError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return graphs;
}

/// Graphs of one corpus indexed by (doc_id, kind).
class GraphStore {
 public:
  GraphStore() = default;
  explicit GraphStore(std::vector<InventionGraph> graphs) {
    for (auto& g : graphs) add(std::move(g));
  }

  void add(InventionGraph g) {
    auto key = std::make_pair(g.doc_id, g.kind);
    graphs_[std::move(key)] = std::move(g);
  }

  const InventionGraph* find(const std::string& doc_id, GraphKind kind) const {
    auto it = graphs_.find({doc_id, kind});
    return it == graphs_.end() ? nullptr : &it->second;
  }

  const InventionGraph& get(const std::string& doc_id, GraphKind kind) const {
    const auto* g = find(doc_id, kind);
    if (!g) {
      throw ValidationError("no " + std::string(to_string(kind)) + " graph for document '" +
                            doc_id + "'");
    }
    return *g;
  }

  size_t size() const { return graphs_.size(); }

  std::vector<std::string> doc_ids(GraphKind kind) const {
    std::vector<std::string> ids;
    for (const auto& [key, g] : graphs_) {
      if (key.second == kind) ids.push_back(key.first);
    }
    return ids;
  }

 private:
  std::map<std::pair<std::string, GraphKind>, InventionGraph> graphs_;
};

}  // namespace patgraph
