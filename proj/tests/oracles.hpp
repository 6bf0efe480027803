#pragma once

// Independent reference implementations used as test oracles.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "patgraph/encoder.hpp"
#include "patgraph/graph.hpp"
#include "patgraph/rng.hpp"
#include "patgraph/tokenizer.hpp"

namespace patgraph::testing {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor<double>& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (size_t r = 0; r < t.rows(); ++r) {
    for (size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  }
  return m;
}

inline Mat matmul(const Mat& a, const Tensor<double>& b) {
  Mat out(a.size(), std::vector<double>(b.cols(), 0.0));
  for (size_t i = 0; i < a.size(); ++i) {
    for (size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (size_t p = 0; p < b.rows(); ++p) s += a[i][p] * b.at(p, j);
      out[i][j] = s;
    }
  }
  return out;
}

inline Mat layer_norm(const Mat& x, const Tensor<double>& gain, const Tensor<double>& bias) {
  Mat out = x;
  for (size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    const double mean = std::accumulate(x[i].begin(), x[i].end(), 0.0) / n;
    double var = 0;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= n;
    for (size_t j = 0; j < x[i].size(); ++j) {
      out[i][j] = (x[i][j] - mean) / std::sqrt(var + 1e-5) * gain.data[j] + bias.data[j];
    }
  }
  return out;
}

inline double gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

/// Dense all-pairs Graph Transformer layer: every node attends to every node.
inline Mat dense_gt_layer(const LayerParams<double>& L, const Mat& x, const EncoderConfig& c) {
  const size_t n = x.size(), H = c.n_heads, dh = c.d_head();
  const Mat h = layer_norm(x, L.ln1_gain, L.ln1_bias);
  const Mat q = matmul(h, L.w_q), k = matmul(h, L.w_k), v = matmul(h, L.w_v);
  auto head_unit = [&](const Mat& m, size_t i, size_t hd) {
    std::vector<double> u(m[i].begin() + hd * dh, m[i].begin() + (hd + 1) * dh);
    double norm = 0;
    for (double e : u) norm += e * e;
    norm = std::sqrt(norm);
    for (double& e : u) e /= norm;
    return u;
  };
  Mat ctx(n, std::vector<double>(c.d_model, 0.0));
  for (size_t hd = 0; hd < H; ++hd) {
    for (size_t i = 0; i < n; ++i) {
      const auto qi = head_unit(q, i, hd);
      std::vector<double> logits(n);
      for (size_t j = 0; j < n; ++j) {
        const auto kj = head_unit(k, j, hd);
        double d = 0;
        for (size_t e = 0; e < dh; ++e) d += qi[e] * kj[e];
        logits[j] = d * L.qk_scale.data[hd];
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0;
      for (double& l : logits) z += (l = std::exp(l - mx));
      for (size_t j = 0; j < n; ++j) {
        for (size_t e = 0; e < dh; ++e) ctx[i][hd * dh + e] += logits[j] / z * v[j][hd * dh + e];
      }
    }
  }
  const Mat attn = matmul(ctx, L.w_o);
  Mat x1 = x;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < c.d_model; ++j) x1[i][j] += attn[i][j];
  }
  const Mat u = matmul(layer_norm(x1, L.ln2_gain, L.ln2_bias), L.w_in);
  Mat gated(n, std::vector<double>(c.d_ff));
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < c.d_ff; ++j) gated[i][j] = gelu(u[i][j]) * u[i][c.d_ff + j];
  }
  const Mat f = matmul(gated, L.w_out);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < c.d_model; ++j) x1[i][j] += f[i][j];
  }
  return x1;
}

/// Tiny configuration for finite-difference and equivalence checks.
inline EncoderConfig tiny_config(size_t vocab_size, Stage stage = Stage::Base) {
  EncoderConfig c;
  c.vocab_size = vocab_size;
  c.d_token = 4;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 6;
  c.d_out_base = 6;
  c.n_experts = 2;
  c.d_moe_hidden = 4;
  c.d_out_reduced = 3;
  c.embedding_dropout_p = 0.0;
  c.stage = stage;
  return c;
}

inline const std::vector<std::string>& word_pool() {
  static const std::vector<std::string> words = {
      "frame", "motor", "auger", "housing", "valve", "pump", "sensor", "shaft", "gear",
      "blade", "handle", "spring", "lever", "rotor", "nozzle", "filter", "seal", "drum"};
  return words;
}

/// Random valid graph: a random tree of PartOf edges plus extra Functional edges.
inline InventionGraph random_graph(Rng& rng, size_t n, const std::string& doc_id = "g") {
  InventionGraph g;
  g.doc_id = doc_id;
  g.kind = GraphKind::FirstClaim;
  const auto& words = word_pool();
  for (uint32_t i = 0; i < n; ++i) {
    std::string text = words[rng.below(words.size())];
    const size_t extra = rng.below(3);
    for (size_t w = 0; w < extra; ++w) text += " " + words[rng.below(words.size())];
    g.nodes.push_back({NodeId{i}, text, rng.bernoulli(0.2) ? NodeRole::Relationship : NodeRole::Feature});
  }
  g.root = NodeId{0};
  for (uint32_t i = 1; i < n; ++i) {
    g.edges.push_back({NodeId{static_cast<uint32_t>(rng.below(i))}, NodeId{i}, EdgeKind::PartOf});
  }
  const size_t extra_edges = rng.below(n);
  for (size_t e = 0; e < extra_edges; ++e) {
    const auto a = static_cast<uint32_t>(rng.below(n)), b = static_cast<uint32_t>(rng.below(n));
    if (a == b || b == 0) continue;
    Edge edge{NodeId{a}, NodeId{b}, EdgeKind::Functional};
    if (std::find(g.edges.begin(), g.edges.end(), edge) == g.edges.end()) g.edges.push_back(edge);
  }
  return g;
}

/// Relabels node i as perm[i] and remaps edges and root.
inline InventionGraph permute(const InventionGraph& g, const std::vector<uint32_t>& perm) {
  InventionGraph p = g;
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    p.nodes[perm[i]] = g.nodes[i];
    p.nodes[perm[i]].id = NodeId{perm[i]};
  }
  for (auto& e : p.edges) {
    e.src = NodeId{perm[e.src.value]};
    e.dst = NodeId{perm[e.dst.value]};
  }
  p.root = NodeId{perm[g.root.value]};
  return p;
}

inline std::vector<uint32_t> random_permutation(Rng& rng, size_t n) {
  std::vector<uint32_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0u);
  rng.shuffle(perm);
  return perm;
}

inline BpeVocab vocab_for_word_pool(size_t size = 80) {
  std::vector<std::string> texts;
  for (int rep = 0; rep < 3; ++rep) {
    for (const auto& w : word_pool()) texts.push_back(w);
  }
  return BpeVocab::train(texts, size);
}

/// Gives every token embedding column distinct values spaced 0.05 apart, so a
/// finite-difference step never straddles a switch of the max-pooled token.
template <typename Real>
void spread_token_embeddings(EncoderParams<Real>& p, Rng& rng) {
  const size_t v = p.token_embedding.rows(), d = p.token_embedding.cols();
  for (size_t j = 0; j < d; ++j) {
    const auto perm = random_permutation(rng, v);
    for (size_t r = 0; r < v; ++r) {
      p.token_embedding.at(r, j) = static_cast<Real>(0.05 * (double(perm[r]) - double(v) / 2.0));
    }
  }
}

/// Compares analytic parameter gradients of loss(params) against central
/// differences over every parameter entry. Returns the worst relative error
/// |analytic - fd| / max(1, |fd|).
inline double encoder_param_grad_error(
    EncoderParams<double> params,
    const std::function<Var(Tape<double>&, const EncoderParams<double>&)>& loss_fn, double h = 1e-3,
    std::string* worst = nullptr) {
  Tape<double> tape;
  tape.backward(loss_fn(tape, params));
  auto named = params.named();
  std::vector<Tensor<double>> analytic;
  for (const auto& [name, t] : named) analytic.emplace_back(t->shape);
  tape.param_grads([&](int slot, const Tensor<double>& g) {
    for (size_t i = 0; i < g.size(); ++i) analytic[static_cast<size_t>(slot)].data[i] += g.data[i];
  });
  auto eval = [&]() {
    Tape<double> t(false);
    return t.value(loss_fn(t, params)).data[0];
  };
  double max_err = 0;
  for (size_t k = 0; k < named.size(); ++k) {
    Tensor<double>& p = *named[k].second;
    for (size_t i = 0; i < p.size(); ++i) {
      const double orig = p.data[i];
      p.data[i] = orig + h;
      const double up = eval();
      p.data[i] = orig - h;
      const double down = eval();
      p.data[i] = orig;
      const double fd = (up - down) / (2 * h);
      const double err = std::abs(analytic[k].data[i] - fd) / std::max(1.0, std::abs(fd));
      if (err > max_err) {
        max_err = err;
        if (worst) {
          *worst = named[k].first + "[" + std::to_string(i) + "] analytic " +
                   std::to_string(analytic[k].data[i]) + " fd " + std::to_string(fd);
        }
      }
    }
  }
  return max_err;
}

/// Triplet loss max(0, d(a,p) - d(a,n) + margin) with cosine distance, composed
/// on one tape from three encoded graphs.
inline Var triplet_composition(Tape<double>& t, const EncoderParams<double>& p, const EncoderConfig& c,
                               const GraphInput& a, const GraphInput& pos, const GraphInput& neg,
                               double margin) {
  Var ea = encode(t, p, a, c);
  Var ep = encode(t, p, pos, c);
  Var en = encode(t, p, neg, c);
  Var sim_ap = ad::sum(t, ad::mul(t, ea, ep));
  Var sim_an = ad::sum(t, ad::mul(t, ea, en));
  // d_ap - d_an = (1 - sim_ap) - (1 - sim_an) = sim_an - sim_ap
  return ad::relu(t, ad::add_scalar(t, ad::sub(t, sim_an, sim_ap), margin));
}

}  // namespace patgraph::testing
