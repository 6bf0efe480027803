#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "patgraph/error.hpp"
#include "patgraph/text.hpp"

namespace patgraph {

/// Byte-pair-encoding vocabulary over whitespace-split words.
///
/// Every observed character c contributes two base symbols: "c" and "c</w>",
/// the latter used when c ends a word. Merges are learned greedily by pair
/// frequency with ties broken by the (left, right) string order.
class BpeVocab {
 public:
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kUnk = 1;
  static constexpr std::string_view kEndOfWord = "</w>";

  using Merge = std::pair<std::string, std::string>;

  BpeVocab() { rebuild(); }

  static BpeVocab train(std::span<const std::string> texts, size_t vocab_size);

  /// Builds a vocabulary from an explicit alphabet and merge list.
  static BpeVocab from_parts(std::vector<std::string> alphabet, std::vector<Merge> merges) {
    BpeVocab v;
    std::sort(alphabet.begin(), alphabet.end());
    alphabet.erase(std::unique(alphabet.begin(), alphabet.end()), alphabet.end());
    v.alphabet_ = std::move(alphabet);
    v.merges_ = std::move(merges);
    v.rebuild();
    return v;
  }

  std::vector<int32_t> encode(std::string_view text) const;
  std::string decode(std::span<const int32_t> ids) const;

  size_t size() const { return tokens_.size(); }
  /// Number of base symbols (two per observed character).
  size_t base_size() const { return 2 * alphabet_.size(); }
  const std::vector<std::string>& alphabet() const { return alphabet_; }
  const std::vector<Merge>& merges() const { return merges_; }
  const std::string& token(int32_t id) const { return tokens_.at(static_cast<size_t>(id)); }

  /// Id of a token string, or -1.
  int32_t id(const std::string& tok) const {
    auto it = ids_.find(tok);
    return it == ids_.end() ? -1 : it->second;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["alphabet"] = alphabet_;
    auto m = nlohmann::ordered_json::array();
    for (const auto& [l, r] : merges_) m.push_back({l, r});
    j["merges"] = std::move(m);
    j["specials"] = {{"pad", kPad}, {"unk", kUnk}};
    j["end_of_word"] = std::string(kEndOfWord);
    return j;
  }

  static BpeVocab from_json(const nlohmann::ordered_json& j) {
    try {
      std::vector<std::string> alphabet = j.at("alphabet").get<std::vector<std::string>>();
      std::vector<Merge> merges;
      for (const auto& m : j.at("merges")) {
        if (!m.is_array() || m.size() != 2) throw SchemaError("vocab merge must be a pair");
        merges.emplace_back(m[0].get<std::string>(), m[1].get<std::string>());
      }
      const auto& sp = j.at("specials");
      if (sp.at("pad").get<int>() != kPad || sp.at("unk").get<int>() != kUnk) {
        throw SchemaError("vocab specials must be pad=0, unk=1");
      }
      return from_parts(std::move(alphabet), std::move(merges));
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(std::string("malformed vocab: ") + e.what());
    }
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write vocab: " + path);
    out << to_json().dump(1) << '\n';
  }

  static BpeVocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read vocab: " + path);
    try {
      return from_json(nlohmann::ordered_json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError("malformed vocab " + path + ": " + e.what());
    }
  }

  friend bool operator==(const BpeVocab& a, const BpeVocab& b) {
    return a.alphabet_ == b.alphabet_ && a.merges_ == b.merges_;
  }

 private:
  struct MergeRule {
    size_t rank;
    int32_t result;
  };

  static uint64_t pair_key(int32_t a, int32_t b) {
    return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) | static_cast<uint32_t>(b);
  }

  int32_t intern(const std::string& tok) {
    auto [it, inserted] = ids_.emplace(tok, static_cast<int32_t>(tokens_.size()));
    if (inserted) tokens_.push_back(tok);
    return it->second;
  }

  void rebuild() {
    tokens_.clear();
    ids_.clear();
    rules_.clear();
    intern("<pad>");
    intern("<unk>");
    for (const auto& c : alphabet_) {
      intern(c);
      intern(c + std::string(kEndOfWord));
    }
    for (size_t r = 0; r < merges_.size(); ++r) {
      const auto& [l, rt] = merges_[r];
      const int32_t li = intern(l);
      const int32_t ri = intern(rt);
      const int32_t out = intern(l + rt);
      rules_.emplace(pair_key(li, ri), MergeRule{r, out});
    }
  }

  std::vector<int32_t> encode_word(const std::string& word) const {
    const auto chars = text::utf8_chars(word);
    std::vector<int32_t> sym;
    sym.reserve(chars.size());
    for (size_t i = 0; i < chars.size(); ++i) {
      const bool last = i + 1 == chars.size();
      const int32_t t = id(last ? chars[i] + std::string(kEndOfWord) : chars[i]);
      sym.push_back(t < 0 ? kUnk : t);
    }
    while (sym.size() > 1) {
      size_t best_rank = SIZE_MAX;
      int32_t best_out = -1;
      uint64_t best_key = 0;
      for (size_t i = 0; i + 1 < sym.size(); ++i) {
        if (sym[i] == kUnk || sym[i + 1] == kUnk) continue;
        auto it = rules_.find(pair_key(sym[i], sym[i + 1]));
        if (it != rules_.end() && it->second.rank < best_rank) {
          best_rank = it->second.rank;
          best_out = it->second.result;
          best_key = it->first;
        }
      }
      if (best_out < 0) break;
      std::vector<int32_t> next;
      next.reserve(sym.size());
      for (size_t i = 0; i < sym.size(); ++i) {
        if (i + 1 < sym.size() && pair_key(sym[i], sym[i + 1]) == best_key) {
          next.push_back(best_out);
          ++i;
        } else {
          next.push_back(sym[i]);
        }
      }
      sym = std::move(next);
    }
    return sym;
  }

  std::vector<std::string> alphabet_;
  std::vector<Merge> merges_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int32_t> ids_;
  std::unordered_map<uint64_t, MergeRule> rules_;
};

inline BpeVocab BpeVocab::train(std::span<const std::string> texts, size_t vocab_size) {
  std::map<std::string, uint64_t> word_freq;
  std::set<std::string> chars;
  for (const auto& t : texts) {
    for (auto& w : text::split_whitespace(t)) {
      for (auto& c : text::utf8_chars(w)) chars.insert(c);
      ++word_freq[w];
    }
  }
  if (word_freq.empty()) throw UsageError("cannot train a tokenizer on an empty corpus");

  BpeVocab vocab = from_parts({chars.begin(), chars.end()}, {});
  if (vocab_size <= vocab.base_size() + 2) {
    throw UsageError("vocab_size " + std::to_string(vocab_size) +
                     " must exceed alphabet size + 2 = " + std::to_string(vocab.base_size() + 2));
  }

  // Working symbol table: ids index into `names`.
  std::vector<std::string> names = vocab.tokens_;
  std::unordered_map<std::string, int32_t> name_ids = vocab.ids_;
  auto sym_id = [&](const std::string& s) {
    auto [it, inserted] = name_ids.emplace(s, static_cast<int32_t>(names.size()));
    if (inserted) names.push_back(s);
    return it->second;
  };

  struct Word {
    std::vector<int32_t> sym;
    uint64_t freq;
  };
  std::vector<Word> words;
  words.reserve(word_freq.size());
  for (const auto& [w, f] : word_freq) {
    const auto cs = text::utf8_chars(w);
    Word word{{}, f};
    for (size_t i = 0; i < cs.size(); ++i) {
      word.sym.push_back(sym_id(i + 1 == cs.size() ? cs[i] + std::string(kEndOfWord) : cs[i]));
    }
    words.push_back(std::move(word));
  }

  size_t distinct = vocab.size();
  std::vector<Merge> merges;
  std::unordered_map<uint64_t, uint64_t> counts;
  while (distinct < vocab_size) {
    counts.clear();
    for (const Word& w : words) {
      for (size_t i = 0; i + 1 < w.sym.size(); ++i) counts[pair_key(w.sym[i], w.sym[i + 1])] += w.freq;
    }
    uint64_t best_count = 0;
    uint64_t best_key = 0;
    for (const auto& [key, c] : counts) {
      if (c < best_count) continue;
      if (c > best_count) {
        best_count = c;
        best_key = key;
        continue;
      }
      const auto lk = static_cast<int32_t>(key >> 32), rk = static_cast<int32_t>(key & 0xffffffffu);
      const auto lb = static_cast<int32_t>(best_key >> 32),
                 rb = static_cast<int32_t>(best_key & 0xffffffffu);
      if (std::tie(names[lk], names[rk]) < std::tie(names[lb], names[rb])) best_key = key;
    }
    if (best_count < 2) break;

    const auto l = static_cast<int32_t>(best_key >> 32);
    const auto r = static_cast<int32_t>(best_key & 0xffffffffu);
    const std::string merged = names[l] + names[r];
    if (!name_ids.count(merged)) ++distinct;
    const int32_t out = sym_id(merged);
    merges.emplace_back(names[l], names[r]);
    for (Word& w : words) {
      if (w.sym.size() < 2) continue;
      size_t o = 0;
      for (size_t i = 0; i < w.sym.size(); ++i) {
        if (i + 1 < w.sym.size() && w.sym[i] == l && w.sym[i + 1] == r) {
          w.sym[o++] = out;
          ++i;
        } else {
          w.sym[o++] = w.sym[i];
        }
      }
      w.sym.resize(o);
    }
  }
  vocab.merges_ = std::move(merges);
  vocab.rebuild();
  return vocab;
}

inline std::vector<int32_t> BpeVocab::encode(std::string_view text) const {
  std::vector<int32_t> out;
  for (const auto& w : text::split_whitespace(text)) {
    const auto ids = encode_word(w);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

inline std::string BpeVocab::decode(std::span<const int32_t> ids) const {
  std::string s;
  for (int32_t id : ids) {
    if (id == kPad) continue;
    if (id == kUnk || id < 0 || static_cast<size_t>(id) >= tokens_.size()) {
      s += "\xEF\xBF\xBD";
      continue;
    }
    const std::string& t = tokens_[static_cast<size_t>(id)];
    if (t.size() >= kEndOfWord.size() &&
        std::string_view(t).substr(t.size() - kEndOfWord.size()) == kEndOfWord) {
      s.append(t, 0, t.size() - kEndOfWord.size());
      s.push_back(' ');
    } else {
      s += t;
    }
  }
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

}  // namespace patgraph
