#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "patgraph/error.hpp"
#include "patgraph/graph.hpp"
#include "patgraph/text.hpp"

namespace patgraph {

struct PatentDocument {
  std::string doc_id;
  std::string family_id;
  std::string title;
  std::string ipc_class;            // e.g. "E01H"
  std::vector<std::string> claims;  // claims[0] is the first independent claim
  std::string description;

  /// Full text used by lexical baselines: title, claims, description.
  std::string full_text() const {
    std::string s = title;
    for (const auto& c : claims) {
      s += '\n';
      s += c;
    }
    s += '\n';
    s += description;
    return s;
  }

  friend bool operator==(const PatentDocument&, const PatentDocument&) = default;
};

enum class CitationCategory { X, Y, A };

inline std::string_view to_string(CitationCategory c) {
  switch (c) {
    case CitationCategory::X: return "X";
    case CitationCategory::Y: return "Y";
    case CitationCategory::A: return "A";
  }
  return "X";
}

inline std::optional<CitationCategory> parse_category(std::string_view s) {
  if (s == "X") return CitationCategory::X;
  if (s == "Y") return CitationCategory::Y;
  if (s == "A") return CitationCategory::A;
  return std::nullopt;
}

struct CitationRecord {
  std::string citing;
  std::string cited;
  CitationCategory category = CitationCategory::X;
  friend bool operator==(const CitationRecord&, const CitationRecord&) = default;
  friend auto operator<=>(const CitationRecord&, const CitationRecord&) = default;
};

inline void validate_document(const PatentDocument& d) {
  if (d.doc_id.empty()) throw ValidationError("document with empty doc_id");
  if (d.claims.empty()) throw ValidationError("document '" + d.doc_id + "' has no claims");
  if (d.ipc_class.empty()) throw ValidationError("document '" + d.doc_id + "' has no IPC class");
}

inline nlohmann::ordered_json to_json(const PatentDocument& d) {
  nlohmann::ordered_json j;
  j["doc_id"] = d.doc_id;
  j["family_id"] = d.family_id;
  j["title"] = d.title;
  j["ipc_class"] = d.ipc_class;
  j["claims"] = d.claims;
  j["description"] = d.description;
  return j;
}

inline PatentDocument document_from_json(const nlohmann::ordered_json& j) {
  const std::string ctx = "document record";
  if (!j.is_object()) throw SchemaError(ctx + ": expected a JSON object");
  PatentDocument d;
  d.doc_id = detail::string_field(j, "doc_id", ctx);
  d.family_id = detail::string_field(j, "family_id", ctx);
  d.title = detail::string_field(j, "title", ctx);
  d.ipc_class = detail::string_field(j, "ipc_class", ctx);
  d.description = detail::string_field(j, "description", ctx);
  const auto& claims = detail::field(j, "claims", ctx);
  if (!claims.is_array()) throw SchemaError(ctx + ": claims must be an array");
  for (const auto& c : claims) {
    if (!c.is_string()) throw SchemaError(ctx + ": claims must be strings");
    d.claims.push_back(c.get<std::string>());
  }
  validate_document(d);
  return d;
}

inline nlohmann::ordered_json to_json(const CitationRecord& c) {
  nlohmann::ordered_json j;
  j["citing"] = c.citing;
  j["cited"] = c.cited;
  j["category"] = to_string(c.category);
  return j;
}

inline CitationRecord citation_from_json(const nlohmann::ordered_json& j) {
  const std::string ctx = "citation record";
  if (!j.is_object()) throw SchemaError(ctx + ": expected a JSON object");
  CitationRecord c;
  c.citing = detail::string_field(j, "citing", ctx);
  c.cited = detail::string_field(j, "cited", ctx);
  auto cat = parse_category(detail::string_field(j, "category", ctx));
  if (!cat) throw SchemaError(ctx + ": category must be X, Y or A");
  c.category = *cat;
  if (c.citing == c.cited) throw ValidationError(ctx + ": self-citation of '" + c.citing + "'");
  return c;
}

namespace detail {

template <typename T, typename Fn>
std::vector<T> read_jsonl(const std::string& path, Fn&& parse) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::vector<T> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    try {
      out.push_back(parse(nlohmann::ordered_json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw SchemaError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

template <typename Range>
void write_jsonl(const std::string& path, const Range& items) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& item : items) out << to_json(item).dump() << '\n';
}

}  // namespace detail

inline std::vector<PatentDocument> read_documents(const std::string& path) {
  auto docs = detail::read_jsonl<PatentDocument>(path, document_from_json);
  std::set<std::string> ids;
  for (const auto& d : docs) {
    if (!ids.insert(d.doc_id).second) {
      throw ValidationError(path + ": duplicate doc_id '" + d.doc_id + "'");
    }
  }
  return docs;
}

inline void write_documents(const std::string& path, const std::vector<PatentDocument>& docs) {
  detail::write_jsonl(path, docs);
}

inline std::vector<CitationRecord> read_citations(const std::string& path) {
  return detail::read_jsonl<CitationRecord>(path, citation_from_json);
}

inline void write_citations(const std::string& path, const std::vector<CitationRecord>& cites) {
  detail::write_jsonl(path, cites);
}

/// Per-document metadata lookups shared by the trainer and evaluator.
class CorpusIndex {
 public:
  CorpusIndex() = default;
  explicit CorpusIndex(const std::vector<PatentDocument>& docs) {
    for (const auto& d : docs) {
      family_[d.doc_id] = d.family_id.empty() ? d.doc_id : d.family_id;
      ipc_[d.doc_id] = d.ipc_class;
      members_[family_[d.doc_id]].push_back(d.doc_id);
    }
  }

  bool contains(const std::string& doc_id) const { return family_.count(doc_id) > 0; }

  const std::string& family(const std::string& doc_id) const { return lookup(family_, doc_id); }
  const std::string& ipc(const std::string& doc_id) const { return lookup(ipc_, doc_id); }

  /// All documents of the family of doc_id, including doc_id itself.
  const std::vector<std::string>& family_members(const std::string& doc_id) const {
    return members_.at(family(doc_id));
  }

  size_t size() const { return family_.size(); }

 private:
  static const std::string& lookup(const std::map<std::string, std::string>& m,
                                   const std::string& key) {
    auto it = m.find(key);
    if (it == m.end()) throw ValidationError("unknown document '" + key + "'");
    return it->second;
  }

  std::map<std::string, std::string> family_;
  std::map<std::string, std::string> ipc_;
  std::map<std::string, std::vector<std::string>> members_;
};

}  // namespace patgraph
