#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "patgraph/config.hpp"
#include "patgraph/corpus.hpp"
#include "patgraph/error.hpp"
#include "patgraph/rng.hpp"

namespace patgraph {

struct GeneratorConfig {
  uint64_t seed = 42;
  size_t n_topics = 20;
  size_t docs_per_topic = 100;
  size_t vocab_per_topic = 40;
  size_t shared_vocab_size = 30;
  size_t citations_per_doc = 3;  // cap on X citations of an original document
  double family_duplicate_probability = 0.25;
  size_t synonym_pairs_per_topic = 40;
  size_t devices_per_topic = 3;
  double derive_probability = 0.8;
  double keep_device_probability = 0.7;
  double shared_component_probability = 0.3;
  double y_citation_probability = 0.5;
  double a_citation_probability = 0.3;
  size_t min_description_components = 3;
  size_t max_description_components = 6;

  void validate() const {
    auto positive = [](size_t v, const char* name) {
      if (v < 1) throw UsageError(std::string("generator: ") + name + " must be >= 1");
    };
    positive(n_topics, "n_topics");
    positive(docs_per_topic, "docs_per_topic");
    positive(vocab_per_topic, "vocab_per_topic");
    positive(shared_vocab_size, "shared_vocab_size");
    positive(citations_per_doc, "citations_per_doc");
    positive(synonym_pairs_per_topic, "synonym_pairs_per_topic");
    positive(devices_per_topic, "devices_per_topic");
    positive(min_description_components, "min_description_components");
    for (double p : {family_duplicate_probability, derive_probability, keep_device_probability,
                     shared_component_probability, y_citation_probability, a_citation_probability}) {
      if (!(p >= 0 && p <= 1)) throw UsageError("generator: probabilities must lie in [0, 1]");
    }
    if (max_description_components < min_description_components) {
      throw UsageError("generator: max_description_components < min_description_components");
    }
    // Three claim components plus the description components must be distinct.
    if (vocab_per_topic < 3 + max_description_components) {
      throw UsageError("generator: vocab_per_topic " + std::to_string(vocab_per_topic) +
                       " cannot supply 3 claim + " + std::to_string(max_description_components) +
                       " description components");
    }
    if (synonym_pairs_per_topic > vocab_per_topic) {
      throw UsageError("generator: synonym_pairs_per_topic exceeds vocab_per_topic");
    }
  }

  void read(const KeyValues& kv) {
    kv.read("seed", seed);
    kv.read("n_topics", n_topics);
    kv.read("docs_per_topic", docs_per_topic);
    kv.read("vocab_per_topic", vocab_per_topic);
    kv.read("shared_vocab_size", shared_vocab_size);
    kv.read("citations_per_doc", citations_per_doc);
    kv.read("family_duplicate_probability", family_duplicate_probability);
    kv.read("synonym_pairs_per_topic", synonym_pairs_per_topic);
    kv.read("devices_per_topic", devices_per_topic);
    kv.read("derive_probability", derive_probability);
    kv.read("keep_device_probability", keep_device_probability);
    kv.read("shared_component_probability", shared_component_probability);
    kv.read("y_citation_probability", y_citation_probability);
    kv.read("a_citation_probability", a_citation_probability);
    kv.read("min_description_components", min_description_components);
    kv.read("max_description_components", max_description_components);
  }

  nlohmann::ordered_json to_json() const {
    return {{"seed", seed},
            {"n_topics", n_topics},
            {"docs_per_topic", docs_per_topic},
            {"vocab_per_topic", vocab_per_topic},
            {"shared_vocab_size", shared_vocab_size},
            {"citations_per_doc", citations_per_doc},
            {"family_duplicate_probability", family_duplicate_probability},
            {"synonym_pairs_per_topic", synonym_pairs_per_topic},
            {"devices_per_topic", devices_per_topic},
            {"derive_probability", derive_probability},
            {"keep_device_probability", keep_device_probability},
            {"shared_component_probability", shared_component_probability},
            {"y_citation_probability", y_citation_probability},
            {"a_citation_probability", a_citation_probability},
            {"min_description_components", min_description_components},
            {"max_description_components", max_description_components}};
  }
};

/// Ground truth the generator planted for one document.
struct SyntheticDocInfo {
  size_t topic = 0;
  bool paraphrase = false;
  std::string device;                   // canonical (unparaphrased) device noun
  std::vector<std::string> claim_components;  // canonical, in claim order
  std::set<std::string> components;     // canonical, claims and description
};

struct SyntheticCorpus {
  std::vector<PatentDocument> documents;
  std::vector<CitationRecord> citations;
  std::map<std::string, SyntheticDocInfo> info;
  std::vector<std::string> topic_ipc;
};

inline bool is_paraphrase_id(const std::string& doc_id) {
  return doc_id.size() > 2 && doc_id.compare(doc_id.size() - 2, 2, "-P") == 0;
}

namespace synth_detail {

inline const std::vector<std::string>& verbs() {
  static const std::vector<std::string> v = {"connects", "drives", "supports", "engages", "rotates", "holds",
                                             "guides",   "locks",  "heats",    "cools",   "moves",   "presses"};
  return v;
}

/// Pronounceable pseudo-words: two or three consonant-vowel syllables and an
/// optional final consonant. Never ends in "ing" and never collides with
/// template words.
class WordFactory {
 public:
  explicit WordFactory(Rng& rng) : rng_(rng) {
    for (const char* w : {"comprising", "comprises", "including", "includes", "having", "wherein", "claim",
                          "present", "disclosure", "relates", "embodiment", "with", "such"}) {
      used_.insert(w);
    }
    for (const auto& v : verbs()) used_.insert(v);
  }

  std::string make() {
    static constexpr char kCons[] = "bdfgklmnprstvz";
    static constexpr char kVow[] = "aeiou";
    for (;;) {
      std::string w;
      const size_t syl = 2 + rng_.below(2);
      for (size_t s = 0; s < syl; ++s) {
        w += kCons[rng_.below(sizeof kCons - 1)];
        w += kVow[rng_.below(sizeof kVow - 1)];
      }
      if (rng_.bernoulli(0.5)) w += kCons[rng_.below(sizeof kCons - 1)];
      if (w.size() < 5 || !used_.insert(w).second) continue;
      return w;
    }
  }

 private:
  Rng& rng_;
  std::set<std::string> used_;
};

struct Topic {
  std::string ipc;
  std::vector<std::string> devices, device_synonyms;
  std::vector<std::string> components;
  std::vector<std::string> component_synonyms;  // empty string: no synonym
};

struct Plan {
  size_t topic = 0;
  size_t device = 0;
  std::vector<size_t> claim;  // component ids
  size_t verb1 = 0, verb2 = 0;
  std::vector<std::pair<size_t, size_t>> extras;  // (attached-to id, new id)
  bool paraphrase = false;
  std::string doc_id, family_id;
};

/// Sibling topics share the first three characters of their IPC code.
inline std::string ipc_for_topic(size_t t) {
  static constexpr char kSections[] = "ABCDEFGH";
  const size_t group = t / 2;
  char buf[8];
  std::snprintf(buf, sizeof buf, "%c%02zu%c", kSections[group % 8], 1 + group / 8 % 99,
                static_cast<char>('A' + t % 2));
  return buf;
}

inline std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

}  // namespace synth_detail

/// Deterministic synthetic corpus with planted topics, lineages of derived
/// inventions (X citations), cross-topic Y links, random in-topic A links and
/// paraphrased family duplicates.
inline SyntheticCorpus generate(const GeneratorConfig& cfg) {
  using namespace synth_detail;
  cfg.validate();
  Rng rng(cfg.seed);
  WordFactory words(rng);

  const size_t V = cfg.vocab_per_topic;
  std::vector<Topic> topics(cfg.n_topics);
  for (size_t t = 0; t < cfg.n_topics; ++t) {
    Topic& tp = topics[t];
    tp.ipc = ipc_for_topic(t);
    for (size_t d = 0; d < cfg.devices_per_topic; ++d) {
      tp.devices.push_back(words.make());
      tp.device_synonyms.push_back(words.make());
    }
    for (size_t c = 0; c < V; ++c) tp.components.push_back(words.make());
    tp.component_synonyms.assign(V, "");
    std::vector<size_t> order(V);
    for (size_t c = 0; c < V; ++c) order[c] = c;
    rng.shuffle(order);
    for (size_t s = 0; s < cfg.synonym_pairs_per_topic; ++s) tp.component_synonyms[order[s]] = words.make();
  }
  std::vector<std::string> shared;
  for (size_t s = 0; s < cfg.shared_vocab_size; ++s) shared.push_back(words.make());

  const size_t shared_base = cfg.n_topics * V;
  auto canonical = [&](size_t id) -> const std::string& {
    return id >= shared_base ? shared[id - shared_base] : topics[id / V].components[id % V];
  };
  auto surface = [&](size_t id, bool para) -> const std::string& {
    if (para && id < shared_base) {
      const std::string& syn = topics[id / V].component_synonyms[id % V];
      if (!syn.empty()) return syn;
    }
    return canonical(id);
  };
  auto all_components = [](const Plan& p) {
    std::set<size_t> s(p.claim.begin(), p.claim.end());
    for (const auto& e : p.extras) s.insert(e.second);
    return s;
  };

  auto render = [&](const Plan& p) {
    const Topic& tp = topics[p.topic];
    const std::string& dev = p.paraphrase ? tp.device_synonyms[p.device] : tp.devices[p.device];
    auto s = [&](size_t id) -> const std::string& { return surface(id, p.paraphrase); };
    const std::string& v1 = verbs()[p.verb1];
    const std::string& v2 = verbs()[p.verb2];
    PatentDocument d;
    d.doc_id = p.doc_id;
    d.family_id = p.family_id;
    d.ipc_class = tp.ipc;
    d.title = capitalize(dev) + " with " + s(p.claim[0]);
    d.claims.push_back("A " + dev + " comprising a " + s(p.claim[0]) + ", a " + s(p.claim[1]) + " and a " +
                       s(p.claim[2]) + ", wherein the " + s(p.claim[0]) + " " + v1 + " the " + s(p.claim[1]) +
                       ".");
    d.claims.push_back("The " + dev + " of claim 1, wherein the " + s(p.claim[2]) + " " + v2 + " the " +
                       s(p.claim[0]) + ".");
    d.claims.push_back("The " + dev + " of claim 1, wherein the " + s(p.extras[0].first) + " comprises a " +
                       s(p.extras[0].second) + ".");
    std::string desc = "The present disclosure relates to a " + dev + ". The " + dev + " comprises a " +
                       s(p.claim[0]) + ", a " + s(p.claim[1]) + " and a " + s(p.claim[2]) + ".";
    for (const auto& [parent, child] : p.extras) desc += " The " + s(parent) + " includes a " + s(child) + ".";
    desc += " In one embodiment, the " + s(p.claim[2]) + " " + v2 + " the " + s(p.claim[0]) + ".";
    d.description = std::move(desc);
    return d;
  };

  SyntheticCorpus out;
  for (const auto& tp : topics) out.topic_ipc.push_back(tp.ipc);

  std::vector<Plan> plans;
  std::vector<std::vector<size_t>> originals_by_topic(cfg.n_topics);  // plan indices
  std::map<std::string, size_t> plan_of;

  auto add_citation = [&](const Plan& citing, const Plan& cited, CitationCategory cat,
                          std::set<std::string>& already) {
    if (citing.family_id == cited.family_id) return false;
    if (!already.insert(cited.doc_id).second) return false;
    out.citations.push_back({citing.doc_id, cited.doc_id, cat});
    return true;
  };

  for (size_t i = 0; i < cfg.docs_per_topic; ++i) {
    for (size_t t = 0; t < cfg.n_topics; ++t) {
      Plan p;
      p.topic = t;
      char id[32];
      std::snprintf(id, sizeof id, "T%02zu-D%04zu", t, i);
      p.doc_id = id;
      p.family_id = "F-" + p.doc_id;
      const auto& earlier = originals_by_topic[t];

      std::optional<size_t> parent_index;
      if (!earlier.empty() && rng.bernoulli(cfg.derive_probability)) {
        parent_index = earlier[rng.below(earlier.size())];
      }
      std::set<size_t> used;
      size_t shared_used = 0;
      if (parent_index) {
        const Plan* parent = &plans[*parent_index];
        p.device = rng.bernoulli(cfg.keep_device_probability) ? parent->device : rng.below(cfg.devices_per_topic);
        std::vector<size_t> keep = parent->claim;
        rng.shuffle(keep);
        keep.resize(2);
        size_t fresh;
        do {
          fresh = t * V + rng.below(V);
        } while (std::find(parent->claim.begin(), parent->claim.end(), fresh) != parent->claim.end());
        p.claim = {keep[0], keep[1], fresh};
        rng.shuffle(p.claim);
      } else {
        p.device = rng.below(cfg.devices_per_topic);
        while (p.claim.size() < 3) {
          const size_t c = t * V + rng.below(V);
          if (std::find(p.claim.begin(), p.claim.end(), c) == p.claim.end()) p.claim.push_back(c);
        }
      }
      used.insert(p.claim.begin(), p.claim.end());
      p.verb1 = rng.below(verbs().size());
      p.verb2 = rng.below(verbs().size());

      const size_t n_extra = cfg.min_description_components +
                             rng.below(cfg.max_description_components - cfg.min_description_components + 1);
      std::vector<size_t> attach_pool = p.claim;
      for (size_t e = 0; e < n_extra; ++e) {
        const size_t attach = e == 0 ? p.claim[1] : attach_pool[rng.below(attach_pool.size())];
        size_t c;
        if (e > 0 && rng.bernoulli(cfg.shared_component_probability) &&
            shared_used < cfg.shared_vocab_size) {
          do {
            c = shared_base + rng.below(cfg.shared_vocab_size);
          } while (used.count(c));
          ++shared_used;
        } else {
          do {
            c = t * V + rng.below(V);
          } while (used.count(c));
        }
        used.insert(c);
        attach_pool.push_back(c);
        p.extras.emplace_back(attach, c);
      }

      plans.push_back(p);
      const size_t self = plans.size() - 1;
      plan_of[p.doc_id] = self;
      const Plan& me = plans[self];

      // Citations, always to earlier documents.
      std::set<std::string> cited;
      size_t x_count = 0;
      if (parent_index) x_count += add_citation(me, plans[*parent_index], CitationCategory::X, cited);
      {
        std::vector<size_t> candidates;
        const std::set<size_t> mine(me.claim.begin(), me.claim.end());
        for (size_t k : earlier) {
          size_t common = 0;
          for (size_t c : plans[k].claim) common += mine.count(c);
          if (common >= 2 && !cited.count(plans[k].doc_id)) candidates.push_back(k);
        }
        rng.shuffle(candidates);
        for (size_t k : candidates) {
          if (x_count >= cfg.citations_per_doc) break;
          x_count += add_citation(me, plans[k], CitationCategory::X, cited);
        }
      }
      const size_t sibling = t ^ 1u;
      if (sibling < cfg.n_topics && rng.bernoulli(cfg.y_citation_probability)) {
        const auto mine = all_components(me);
        std::vector<size_t> candidates;
        for (size_t k : originals_by_topic[sibling]) {
          size_t common = 0;
          for (size_t c : all_components(plans[k])) common += mine.count(c);
          if (common == 1) candidates.push_back(k);
        }
        if (!candidates.empty()) {
          add_citation(me, plans[candidates[rng.below(candidates.size())]], CitationCategory::Y, cited);
        }
      }
      if (!earlier.empty() && rng.bernoulli(cfg.a_citation_probability)) {
        add_citation(me, plans[earlier[rng.below(earlier.size())]], CitationCategory::A, cited);
      }

      const size_t first_citation = out.citations.size() - cited.size();
      out.documents.push_back(render(me));
      originals_by_topic[t].push_back(self);

      if (rng.bernoulli(cfg.family_duplicate_probability)) {
        Plan dup = me;
        dup.paraphrase = true;
        dup.doc_id = me.doc_id + "-P";
        plans.push_back(dup);
        plan_of[dup.doc_id] = plans.size() - 1;
        const size_t n_cites = out.citations.size();
        for (size_t c = first_citation; c < n_cites; ++c) {
          CitationRecord r = out.citations[c];
          r.citing = dup.doc_id;
          out.citations.push_back(r);
        }
        out.documents.push_back(render(plans.back()));
      }
    }
  }

  for (const auto& p : plans) {
    SyntheticDocInfo info;
    info.topic = p.topic;
    info.paraphrase = p.paraphrase;
    info.device = topics[p.topic].devices[p.device];
    for (size_t c : p.claim) info.claim_components.push_back(canonical(c));
    for (size_t c : all_components(p)) info.components.insert(canonical(c));
    out.info.emplace(p.doc_id, std::move(info));
  }
  return out;
}

}  // namespace patgraph
