#pragma once

// Checkpoint container, load-time layer pruning, embedding compatibility /
// efficiency modes, re-factorization and dimension truncation.
//
// Container layout:
//
//   M3D-CHECKPOINT <version>\n
//   <JSON manifest>\n
//   END-MANIFEST\n
//   <payload: tensors in manifest order, row-major, little-endian IEEE-754>
//
// Tensor offsets are relative to the first payload byte, so the manifest text
// can be edited (e.g. num_hidden_layers) without touching the payload.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "m3d/error.hpp"
#include "m3d/model.hpp"
#include "m3d/svd.hpp"
#include "m3d/tensor.hpp"

namespace m3d {

inline constexpr int kContainerVersion = 1;
inline constexpr const char* kContainerMagic = "M3D-CHECKPOINT";
inline constexpr const char* kManifestEnd = "END-MANIFEST";

enum class DType { kF32, kF64 };

inline const char* dtype_name(DType t) { return t == DType::kF32 ? "f32" : "f64"; }
inline std::size_t dtype_size(DType t) { return t == DType::kF32 ? 4 : 8; }
inline DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::kF32;
  if (s == "f64") return DType::kF64;
  throw FormatError("unknown dtype \"" + s + "\"");
}
template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::kF32 : DType::kF64;
}

enum class EmbeddingMode { kDense, kFactorized };

inline const char* embedding_mode_name(EmbeddingMode m) {
  return m == EmbeddingMode::kDense ? "dense" : "factorized";
}

struct TensorEntry {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

struct Manifest {
  int version = kContainerVersion;
  nlohmann::json header;  // everything except the tensor table
  std::vector<TensorEntry> tensors;
  std::uint64_t payload_offset = 0;  // absolute file offset of the payload
  std::uint64_t payload_size = 0;

  const TensorEntry* find(const std::string& name) const {
    for (const auto& e : tensors)
      if (e.name == name) return &e;
    return nullptr;
  }
};

namespace detail {

template <typename U>
void append_le(std::string& out, U bits) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename U>
U read_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <typename T>
void encode_tensor(std::string& out, const Tensor<T>& t, DType dtype) {
  for (T v : t.data()) {
    if (dtype == DType::kF32)
      append_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    else
      append_le(out, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
  }
}

template <typename T>
Tensor<T> decode_tensor(const std::string& bytes, const TensorEntry& e) {
  Tensor<T> t(e.shape);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t w = dtype_size(e.dtype);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (e.dtype == DType::kF32)
      t[i] = static_cast<T>(std::bit_cast<float>(read_le<std::uint32_t>(p + i * w)));
    else
      t[i] = static_cast<T>(std::bit_cast<double>(read_le<std::uint64_t>(p + i * w)));
  }
  return t;
}

inline std::string manifest_text(const Manifest& m) {
  nlohmann::json j = m.header;
  j["format_version"] = m.version;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& e : m.tensors)
    table.push_back({{"name", e.name},
                     {"dtype", dtype_name(e.dtype)},
                     {"shape", e.shape},
                     {"offset", e.offset},
                     {"length", e.length}});
  j["tensors"] = table;
  return j.dump(1);
}

}  // namespace detail

/// A named tensor ready for writing.
template <typename T>
struct NamedTensor {
  std::string name;
  const Tensor<T>* tensor;
};

/// Writes a container: header fields + tensors in the given order.
template <typename T>
void write_container(const std::filesystem::path& path, nlohmann::json header,
                     const std::vector<NamedTensor<T>>& tensors, DType dtype = dtype_of<T>()) {
  Manifest m;
  m.header = std::move(header);
  std::string payload;
  for (const auto& nt : tensors) {
    if (!nt.tensor->all_finite())
      throw NumericalError("refusing to save non-finite tensor " + nt.name);
    TensorEntry e{nt.name, dtype, nt.tensor->shape(), payload.size(), 0};
    detail::encode_tensor(payload, *nt.tensor, dtype);
    e.length = payload.size() - e.offset;
    m.tensors.push_back(std::move(e));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << kContainerMagic << ' ' << kContainerVersion << '\n'
      << detail::manifest_text(m) << '\n'
      << kManifestEnd << '\n';
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

/// Reads and validates the manifest. Rejects version mismatches, offsets that
/// are not contiguous from zero, lengths inconsistent with shape×dtype, and
/// payloads that are truncated or carry unowned trailing bytes.
inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file");
  std::istringstream magic(line);
  std::string word;
  int version = 0;
  if (!(magic >> word >> version) || word != kContainerMagic)
    throw FormatError(path.string() + ": not a checkpoint container");
  if (version != kContainerVersion)
    throw FormatError(path.string() + ": container version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(kContainerVersion) + ")");
  std::string text;
  bool terminated = false;
  while (std::getline(in, line)) {
    if (line == kManifestEnd) {
      terminated = true;
      break;
    }
    text += line;
    text += '\n';
  }
  if (!terminated) throw FormatError(path.string() + ": manifest terminator missing");
  Manifest m;
  m.version = version;
  m.payload_offset = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(in.tellg());
  m.payload_size = file_size - m.payload_offset;

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": manifest is not valid JSON (" + e.what() + ")");
  }
  if (j.value("format_version", -1) != version)
    throw FormatError(path.string() + ": manifest format_version disagrees with header line");
  if (!j.contains("tensors") || !j["tensors"].is_array())
    throw FormatError(path.string() + ": manifest has no tensor table");
  std::uint64_t expected_offset = 0;
  try {
    for (const auto& t : j["tensors"]) {
      TensorEntry e;
      e.name = t.at("name").get<std::string>();
      e.dtype = parse_dtype(t.at("dtype").get<std::string>());
      e.shape = t.at("shape").get<Shape>();
      e.offset = t.at("offset").get<std::uint64_t>();
      e.length = t.at("length").get<std::uint64_t>();
      if (e.offset != expected_offset)
        throw FormatError(path.string() + ": tensor " + e.name + " offset " +
                          std::to_string(e.offset) + " is not contiguous (expected " +
                          std::to_string(expected_offset) + ")");
      if (e.length != shape_numel(e.shape) * dtype_size(e.dtype))
        throw FormatError(path.string() + ": tensor " + e.name + " length disagrees with shape");
      expected_offset += e.length;
      m.tensors.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed tensor table (" + e.what() + ")");
  }
  if (expected_offset != m.payload_size)
    throw FormatError(path.string() + ": payload holds " + std::to_string(m.payload_size) +
                      " bytes but the manifest owns " + std::to_string(expected_offset));
  j.erase("tensors");
  j.erase("format_version");
  m.header = std::move(j);
  return m;
}

/// Reads the requested tensors (all when `names` is empty), seeking past the
/// rest without materializing them.
template <typename T>
std::map<std::string, Tensor<T>> read_tensors(const std::filesystem::path& path,
                                              const Manifest& m,
                                              const std::function<bool(const std::string&)>& want) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::map<std::string, Tensor<T>> out;
  std::string buf;
  for (const auto& e : m.tensors) {
    if (!want(e.name)) continue;
    buf.resize(e.length);
    in.seekg(static_cast<std::streamoff>(m.payload_offset + e.offset));
    in.read(buf.data(), static_cast<std::streamsize>(e.length));
    if (static_cast<std::uint64_t>(in.gcount()) != e.length)
      throw FormatError(path.string() + ": truncated payload in tensor " + e.name);
    Tensor<T> t = detail::decode_tensor<T>(buf, e);
    if (!t.all_finite()) throw FormatError(path.string() + ": non-finite values in " + e.name);
    out.emplace(e.name, std::move(t));
  }
  return out;
}

/// Rewrites a container's manifest header in place (payload untouched).
inline void rewrite_manifest(const std::filesystem::path& path,
                             const std::function<void(nlohmann::json&)>& edit) {
  Manifest m = read_manifest(path);
  std::string payload(m.payload_size, '\0');
  {
    std::ifstream in(path, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(m.payload_offset));
    in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  }
  edit(m.header);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << kContainerMagic << ' ' << m.version << '\n'
      << detail::manifest_text(m) << '\n'
      << kManifestEnd << '\n';
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

// ---------------------------------------------------------------------------
// Embedding modes

/// Embedding storage size: v·d dense, v·r + r·d factorized.
inline std::size_t embedding_parameter_count(std::size_t vocab, std::size_t d_model,
                                             std::optional<std::size_t> rank) {
  return rank ? vocab * *rank + *rank * d_model : vocab * d_model;
}

template <typename T>
Tensor<T> materialize_compatibility(const FactorizedEmbedding<T>& emb) {
  return matmul(emb.E_A, emb.E_B);
}

/// Truncated-SVD re-factorization of a trained dense table at rank r'.
template <typename T>
FactorizedEmbedding<T> refactorize(const Tensor<T>& trained, std::size_t rank) {
  return factorize(trained, rank);
}

/// Weights whose embedding is stored densely (compatibility mode).
template <typename T>
ModelWeights<T> to_compatibility(const ModelWeights<T>& w) {
  ModelWeights<T> out = w;
  if (!w.factors) return out;
  out.dense_embedding = materialize_compatibility(*w.factors);
  out.factors.reset();
  out.config.factorized = false;
  return out;
}

/// Weights whose embedding is the rank-r' factorization of the trained
/// dense table (efficiency mode).
template <typename T>
ModelWeights<T> to_efficiency(const ModelWeights<T>& w, std::size_t rank) {
  ModelWeights<T> out = w;
  out.factors = refactorize(embedding_table(w), rank);
  out.dense_embedding = Tensor<T>();
  out.config.factorized = true;
  out.config.mel_rank = rank;
  std::vector<std::size_t> ranks;
  for (auto r : w.config.mel_rank_set)
    if (w.config.factorized && r < rank) ranks.push_back(r);
  ranks.push_back(rank);
  out.config.mel_rank_set = ranks;
  return out;
}

/// First d' coordinates of each row, L2-renormalized.
template <typename T>
Tensor<T> truncate_dims(const Tensor<T>& vectors, std::size_t dim) {
  require_matrix(vectors, "truncate_dims");
  if (dim < 1 || dim > vectors.cols()) throw ParameterError("dim outside [1, source dim]");
  return l2_normalize_rows(slice(vectors, 0, vectors.rows(), 0, dim));
}

/// Config of a model cut to its first `layers` blocks. Taps deeper than the
/// cut disappear; the cut depth itself is always a tap.
inline ModelConfig pruned_config(ModelConfig c, std::size_t layers) {
  if (layers < 1 || layers > c.n_layers)
    throw ParameterError("cannot prune a " + std::to_string(c.n_layers) + "-layer model to " +
                         std::to_string(layers) + " layers");
  c.n_layers = layers;
  std::vector<std::size_t> taps;
  for (auto l : c.mll_layers)
    if (l < layers) taps.push_back(l);
  taps.push_back(layers);
  c.mll_layers = taps;
  return c;
}

template <typename T>
ModelWeights<T> prune_layers(const ModelWeights<T>& w, std::size_t layers) {
  ModelWeights<T> out = w;
  out.config = pruned_config(w.config, layers);
  out.layers.resize(layers);
  return out;
}

// ---------------------------------------------------------------------------
// Model save / load

struct SaveOptions {
  std::optional<EmbeddingMode> mode;  // default: the model's own mode
  std::optional<std::size_t> rank;   // re-factorize to this rank (factorized mode)
  std::optional<DType> dtype;        // default: the weights' own precision
  nlohmann::json metadata = nlohmann::json::object();
};

template <typename T>
void save_model(const std::filesystem::path& path, const ModelWeights<T>& weights,
                const SaveOptions& opt = {}) {
  if (!weights.all_finite()) throw NumericalError("refusing to save non-finite weights");
  const EmbeddingMode mode = opt.mode.value_or(
      weights.factors ? EmbeddingMode::kFactorized : EmbeddingMode::kDense);
  ModelWeights<T> w;
  if (mode == EmbeddingMode::kDense) {
    w = to_compatibility(weights);
  } else if (weights.factors && (!opt.rank || *opt.rank == weights.factors->rank())) {
    w = weights;
  } else {
    if (!opt.rank) throw UsageError("factorized save of a dense model needs a rank");
    w = to_efficiency(weights, *opt.rank);
  }
  nlohmann::json header;
  header["config"] = w.config;
  header["embedding_mode"] = embedding_mode_name(mode);
  if (w.factors) header["stored_rank"] = w.factors->rank();
  header["stored_layers"] = w.layers.size();
  header["embedding_parameters"] = {
      {"stored", embedding_parameter_count(w.config.vocab_size, w.config.d_model,
                                           w.factors ? std::optional(w.factors->rank())
                                                     : std::nullopt)},
      {"dense_equivalent", w.config.vocab_size * w.config.d_model}};
  header["metadata"] = opt.metadata;
  std::vector<NamedTensor<T>> tensors;
  w.for_each([&](const std::string& n, const Tensor<T>& t) { tensors.push_back({n, &t}); });
  write_container(path, header, tensors, opt.dtype.value_or(dtype_of<T>()));
}

/// Loads a model honoring the manifest's num_hidden_layers: layer blocks at or
/// beyond it are skipped without being read.
template <typename T>
ModelWeights<T> load_model(const std::filesystem::path& path) {
  Manifest m = read_manifest(path);
  ModelConfig config;
  std::size_t stored_layers = 0;
  std::string mode;
  try {
    config = m.header.at("config").get<ModelConfig>();
    stored_layers = m.header.at("stored_layers").get<std::size_t>();
    mode = m.header.at("embedding_mode").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": incomplete manifest (" + e.what() + ")");
  }
  if (mode != "dense" && mode != "factorized")
    throw FormatError(path.string() + ": unknown embedding_mode \"" + mode + "\"");
  const std::size_t layers = config.n_layers;
  if (layers > stored_layers)
    throw FormatError(path.string() + ": num_hidden_layers " + std::to_string(layers) +
                      " exceeds the " + std::to_string(stored_layers) + " stored layer blocks");
  config.factorized = mode == "factorized";
  // Taps deeper than the manifest's depth are dropped; the depth itself stays.
  config = pruned_config(config, layers);
  try {
    config.validate();
  } catch (const UsageError& e) {
    throw FormatError(path.string() + ": invalid config (" + e.what() + ")");
  }

  auto want = [layers](const std::string& name) {
    if (name.rfind("layers.", 0) != 0) return true;
    const std::size_t idx = std::stoul(name.substr(7, name.find('.', 7) - 7));
    return idx < layers;
  };
  auto tensors = read_tensors<T>(path, m, want);
  auto take = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError(path.string() + ": missing tensor " + name);
    return std::move(it->second);
  };

  ModelWeights<T> w;
  w.config = config;
  if (config.factorized)
    w.factors = FactorizedEmbedding<T>{take("embed.E_A"), take("embed.E_B")};
  else
    w.dense_embedding = take("embed.E");
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    w.layers.push_back({take(p + "attn_norm"), take(p + "wq"), take(p + "wk"), take(p + "wv"),
                        take(p + "wo"), take(p + "ffn_norm"), take(p + "w1"), take(p + "w2")});
  }
  w.final_norm = take("final_norm");

  const std::size_t v = config.vocab_size, d = config.d_model;
  auto expect = [&](const Tensor<T>& t, Shape s, const std::string& name) {
    if (t.shape() != s)
      throw FormatError(path.string() + ": tensor " + name + " has shape " +
                        shape_str(t.shape()) + ", config implies " + shape_str(s));
  };
  if (w.factors) {
    if (w.factors->rank() != config.mel_rank)
      throw FormatError(path.string() + ": stored rank disagrees with config mel_rank");
    expect(w.factors->E_A, {v, config.mel_rank}, "embed.E_A");
    expect(w.factors->E_B, {config.mel_rank, d}, "embed.E_B");
  } else {
    expect(w.dense_embedding, {v, d}, "embed.E");
  }
  for (const auto& L : w.layers) {
    expect(L.wq, {d, d}, "wq");
    expect(L.w1, {d, config.d_ff}, "w1");
    expect(L.w2, {config.d_ff, d}, "w2");
  }
  expect(w.final_norm, {d}, "final_norm");
  return w;
}

/// Human-readable manifest summary.
inline std::string dump_manifest(const std::filesystem::path& path) {
  Manifest m = read_manifest(path);
  std::ostringstream os;
  os << "format_version  " << m.version << '\n';
  for (auto it = m.header.begin(); it != m.header.end(); ++it)
    os << it.key() << "  " << it.value().dump() << '\n';
  os << "payload_bytes  " << m.payload_size << '\n';
  os << "tensors  " << m.tensors.size() << '\n';
  os << "name\tdtype\tshape\toffset\tlength\n";
  for (const auto& e : m.tensors)
    os << e.name << '\t' << dtype_name(e.dtype) << '\t' << shape_str(e.shape) << '\t' << e.offset
       << '\t' << e.length << '\n';
  return os.str();
}

/// Tensors a checkpoint of this config holds: embedding (1 dense or 2
/// factorized) + 8 per layer + final norm.
inline std::size_t checkpoint_tensor_count(const ModelConfig& c) {
  return (c.factorized ? 2 : 1) + 8 * c.n_layers + 1;
}

}  // namespace m3d
