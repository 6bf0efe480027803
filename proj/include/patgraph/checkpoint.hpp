#pragma once

// Binary tensor container shared by encoder checkpoints and vector indexes.
//
// Layout: one line of compact UTF-8 JSON, space-padded so that the header
// including its '\n' terminator is a multiple of 64 bytes, followed by
// little-endian float32 payloads in directory order. Directory offsets are
// relative to the first payload byte.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "patgraph/autodiff.hpp"
#include "patgraph/encoder.hpp"
#include "patgraph/error.hpp"
#include "patgraph/tokenizer.hpp"

namespace patgraph {

inline constexpr int kContainerFormatVersion = 1;
inline constexpr size_t kHeaderAlignment = 64;

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

struct Container {
  nlohmann::ordered_json meta;  // everything except the tensor directory
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw SchemaError("container has no tensor '" + name + "'");
  }
};

inline std::string encode_container(const nlohmann::ordered_json& meta,
                                    const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors) {
  nlohmann::ordered_json header = meta;
  header["format_version"] = kContainerFormatVersion;
  nlohmann::ordered_json dir = nlohmann::ordered_json::object();
  size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (dir.contains(name)) throw UsageError("duplicate tensor name '" + name + "'");
    const size_t bytes = t->size() * sizeof(float);
    dir[name] = {{"shape", t->shape}, {"offset", offset}, {"length", bytes}};
    offset += bytes;
  }
  header["tensors"] = std::move(dir);
  std::string head = header.dump();
  const size_t padded = (head.size() + 1 + kHeaderAlignment - 1) / kHeaderAlignment * kHeaderAlignment;
  head.append(padded - head.size() - 1, ' ');
  head.push_back('\n');
  std::string out = std::move(head);
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : tensors) {
    out.append(reinterpret_cast<const char*>(t->data.data()), t->size() * sizeof(float));
  }
  return out;
}

inline Container decode_container(const std::string& bytes, const std::string& origin) {
  const size_t nl = bytes.find('\n');
  if (nl == std::string::npos || (nl + 1) % kHeaderAlignment != 0) {
    throw SchemaError(origin + ": missing or misaligned container header");
  }
  Container c;
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(origin + ": malformed container header: " + e.what());
  }
  if (!header.contains("format_version") || header["format_version"] != kContainerFormatVersion) {
    throw SchemaError(origin + ": unsupported container format version");
  }
  if (!header.contains("tensors") || !header["tensors"].is_object()) {
    throw SchemaError(origin + ": container header lacks a tensor directory");
  }
  const size_t base = nl + 1;
  try {
    for (const auto& [name, entry] : header["tensors"].items()) {
      std::vector<size_t> shape = entry.at("shape").get<std::vector<size_t>>();
      const size_t off = entry.at("offset").get<size_t>();
      const size_t len = entry.at("length").get<size_t>();
      Tensor<float> t(shape);
      if (len != t.size() * sizeof(float) || base + off + len > bytes.size()) {
        throw SchemaError(origin + ": tensor '" + name + "' has an inconsistent directory entry");
      }
      if (len > 0) std::memcpy(t.data.data(), bytes.data() + base + off, len);
      c.tensors.emplace_back(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(origin + ": malformed tensor directory: " + e.what());
  }
  header.erase("tensors");
  header.erase("format_version");
  c.meta = std::move(header);
  return c;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Everything needed to embed graphs: config, tokenizer and parameters.
struct Checkpoint {
  EncoderConfig config;
  BpeVocab vocab;
  EncoderParams<float> params;
  nlohmann::ordered_json training = nlohmann::ordered_json::object();  // free-form metadata
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  nlohmann::ordered_json meta;
  meta["kind"] = "encoder_checkpoint";
  meta["config"] = ck.config.to_json();
  meta["vocab"] = ck.vocab.to_json();
  meta["training"] = ck.training;
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  for (const auto& [name, t] : ck.params.named()) tensors.emplace_back(name, t);
  return encode_container(meta, tensors);
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  write_file(path, encode_checkpoint(ck));
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
  Container c = decode_container(bytes, origin);
  if (c.meta.value("kind", "") != "encoder_checkpoint") {
    throw SchemaError(origin + ": not an encoder checkpoint");
  }
  Checkpoint ck;
  ck.config = EncoderConfig::from_json(c.meta.at("config"));
  ck.vocab = BpeVocab::from_json(c.meta.at("vocab"));
  ck.training = c.meta.value("training", nlohmann::ordered_json::object());
  ck.params.layers.resize(ck.config.n_layers);
  bool moe = false;
  for (const auto& [name, t] : c.tensors) moe = moe || name == "moe.gate";
  if (moe) ck.params.experts.resize(ck.config.n_experts);
  std::map<std::string, Tensor<float>*> slots;
  for (auto& [name, t] : ck.params.named()) slots[name] = t;
  if (slots.size() != c.tensors.size()) throw SchemaError(origin + ": tensor count does not match config");
  for (auto& [name, t] : c.tensors) {
    auto it = slots.find(name);
    if (it == slots.end()) throw SchemaError(origin + ": unexpected tensor '" + name + "'");
    *it->second = std::move(t);
  }
  check_shapes(ck.params, ck.config);
  if (ck.vocab.size() > ck.config.vocab_size) {
    throw SchemaError(origin + ": tokenizer larger than the embedding table");
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file(path), path);
}

}  // namespace patgraph
