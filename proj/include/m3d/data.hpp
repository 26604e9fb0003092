#pragma once

// Training records in the three canonical formats, JSONL ingestion,
// instruction templating, self-mined hard negatives and the seeded
// two-stage mixture.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "m3d/error.hpp"
#include "m3d/model.hpp"
#include "m3d/tensor.hpp"

namespace m3d {

enum class Format { kRetrieval, kClustering, kClassification };

inline const char* format_name(Format f) {
  switch (f) {
    case Format::kRetrieval: return "retrieval";
    case Format::kClustering: return "clustering";
    case Format::kClassification: return "classification";
  }
  return "?";
}

inline std::optional<Format> parse_format(const std::string& s) {
  if (s == "retrieval") return Format::kRetrieval;
  if (s == "clustering") return Format::kClustering;
  if (s == "classification") return Format::kClassification;
  return std::nullopt;
}

struct Sample {
  std::string query;
  std::string positive;
  std::vector<std::string> hard_negatives;
  Format format = Format::kRetrieval;
  std::optional<std::string> instruction;
  std::string source;
  std::size_t line = 0;  // 1-based line in the originating file, 0 if synthetic

  void validate() const {
    if (positive.empty()) throw DataError("sample has an empty positive");
    if (format == Format::kClassification && hard_negatives.size() != 1)
      throw DataError("classification sample must carry exactly one hard negative");
  }

  friend bool operator==(const Sample&, const Sample&) = default;
};

inline nlohmann::json sample_to_json(const Sample& s) {
  nlohmann::json j{{"query", s.query},
                   {"positive", s.positive},
                   {"hard_negatives", s.hard_negatives},
                   {"format", format_name(s.format)}};
  if (s.instruction) j["instruction"] = *s.instruction;
  if (!s.source.empty()) j["source"] = s.source;
  return j;
}

/// Parses one record; extra fields are ignored.
inline Sample sample_from_json(const nlohmann::json& j, std::size_t line,
                               const std::string& default_source) {
  auto where = [&] { return "line " + std::to_string(line); };
  if (!j.is_object()) throw DataError(where() + ": record is not a JSON object");
  auto need_string = [&](const char* key) -> std::string {
    auto it = j.find(key);
    if (it == j.end()) throw DataError(where() + ": missing field \"" + key + "\"");
    if (!it->is_string()) throw DataError(where() + ": field \"" + key + "\" is not a string");
    return it->get<std::string>();
  };
  Sample s;
  s.line = line;
  s.query = need_string("query");
  s.positive = need_string("positive");
  const std::string fmt = need_string("format");
  auto f = parse_format(fmt);
  if (!f) throw DataError(where() + ": unknown format tag \"" + fmt + "\"");
  s.format = *f;
  if (auto it = j.find("hard_negatives"); it != j.end()) {
    if (!it->is_array()) throw DataError(where() + ": \"hard_negatives\" is not an array");
    for (const auto& n : *it) {
      if (!n.is_string()) throw DataError(where() + ": hard negative is not a string");
      s.hard_negatives.push_back(n.get<std::string>());
    }
  }
  if (auto it = j.find("instruction"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw DataError(where() + ": \"instruction\" is not a string");
    s.instruction = it->get<std::string>();
  }
  s.source = j.contains("source") && j["source"].is_string() ? j["source"].get<std::string>()
                                                             : default_source;
  try {
    s.validate();
  } catch (const DataError& e) {
    throw DataError(where() + ": " + e.what());
  }
  return s;
}

/// Streaming, order-preserving JSONL reader. Blank lines are skipped.
class JsonlReader {
 public:
  explicit JsonlReader(const std::filesystem::path& path)
      : in_(path), source_(path.stem().string()) {
    if (!in_) throw DataError("cannot open " + path.string());
  }

  std::optional<Sample> next() {
    std::string text;
    while (std::getline(in_, text)) {
      ++line_;
      if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(text);
      } catch (const nlohmann::json::parse_error& e) {
        throw DataError("line " + std::to_string(line_) + ": malformed JSON (" + e.what() + ")");
      }
      return sample_from_json(j, line_, source_);
    }
    return std::nullopt;
  }

 private:
  std::ifstream in_;
  std::string source_;
  std::size_t line_ = 0;
};

inline std::vector<Sample> load_jsonl(const std::filesystem::path& path) {
  JsonlReader reader(path);
  std::vector<Sample> out;
  while (auto s = reader.next()) out.push_back(std::move(*s));
  return out;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& s : samples) out << sample_to_json(s).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Clustering / multi-class canonicalization

struct LabeledClass {
  std::string label;
  std::vector<std::string> items;
};

/// Anchor = pool[class_id].items[anchor_index]; positive is a seeded draw
/// from the same class excluding the anchor; the hard negative is drawn from
/// a different class. Returns nullopt for a singleton class (caller counts
/// the skip).
inline std::optional<Sample> canonicalize_clustering(std::size_t anchor_index, std::size_t class_id,
                                                     const std::vector<LabeledClass>& pool,
                                                     std::mt19937_64& rng) {
  if (class_id >= pool.size() || anchor_index >= pool[class_id].items.size())
    throw UsageError("anchor outside the class pool");
  if (pool.size() < 2) throw DataError("clustering needs at least two classes");
  const auto& cls = pool[class_id].items;
  if (cls.size() < 2) return std::nullopt;

  std::uniform_int_distribution<std::size_t> pick_pos(0, cls.size() - 2);
  std::size_t pos = pick_pos(rng);
  if (pos >= anchor_index) ++pos;

  std::vector<std::size_t> others;
  for (std::size_t c = 0; c < pool.size(); ++c)
    if (c != class_id && !pool[c].items.empty()) others.push_back(c);
  if (others.empty()) throw DataError("no other non-empty class to draw a negative from");
  const std::size_t neg_class =
      others[std::uniform_int_distribution<std::size_t>(0, others.size() - 1)(rng)];
  const auto& neg_items = pool[neg_class].items;
  const std::size_t neg = std::uniform_int_distribution<std::size_t>(0, neg_items.size() - 1)(rng);

  Sample s;
  s.query = cls[anchor_index];
  s.positive = cls[pos];
  s.hard_negatives = {neg_items[neg]};
  s.format = Format::kClustering;
  return s;
}

struct ClusteringResult {
  std::vector<Sample> samples;
  std::size_t skipped_singletons = 0;
};

/// Every item of every class as an anchor, in pool order.
inline ClusteringResult canonicalize_clustering_pool(const std::vector<LabeledClass>& pool,
                                                     std::uint64_t seed,
                                                     const std::string& source = "clustering") {
  ClusteringResult out;
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < pool.size(); ++c)
    for (std::size_t i = 0; i < pool[c].items.size(); ++i) {
      auto s = canonicalize_clustering(i, c, pool, rng);
      if (!s) {
        ++out.skipped_singletons;
        continue;
      }
      s->source = source;
      out.samples.push_back(std::move(*s));
    }
  return out;
}

/// Two-way classification: the input's label text is the positive, the
/// other label text the single hard negative.
inline Sample canonicalize_classification(const std::string& text, std::size_t label,
                                          const std::vector<std::string>& label_texts) {
  if (label_texts.size() != 2)
    throw DataError("two-way classification needs exactly two label texts");
  if (label > 1) throw DataError("label index out of range");
  Sample s;
  s.query = text;
  s.positive = label_texts[label];
  s.hard_negatives = {label_texts[1 - label]};
  s.format = Format::kClassification;
  return s;
}

// ---------------------------------------------------------------------------
// Instructions

struct InstructionTemplate {
  std::string prefix = "Instruct: ";
  std::string separator = "\nQuery: ";

  std::string render(const std::string& instruction, const std::string& query) const {
    return prefix + instruction + separator + query;
  }
};

/// Prefixes the query with its instruction; documents are never touched and
/// an already-instructed query is left as is.
inline Sample apply_instruction(Sample s, const InstructionTemplate& tpl = {}) {
  if (!s.instruction || s.instruction->empty()) return s;
  const std::string head = tpl.prefix + *s.instruction + tpl.separator;
  if (s.query.compare(0, head.size(), head) != 0) s.query = head + s.query;
  return s;
}

// ---------------------------------------------------------------------------
// Hard-negative mining

struct MiningResult {
  std::vector<std::vector<std::size_t>> negatives;  // document indices per query
  std::size_t effective_k = 0;
  bool k_shrunk = false;
};

/// Top-k corpus documents by cosine to each query, excluding the query's gold
/// document; ties break by ascending document index. Inputs are embedding
/// matrices (rows need not be normalized).
template <typename T>
MiningResult mine_hard_negatives(const Tensor<T>& corpus_vecs, const Tensor<T>& query_vecs,
                                 const std::vector<std::size_t>& gold, std::size_t k) {
  if (gold.size() != query_vecs.rows()) throw UsageError("one gold document per query");
  const std::size_t n = corpus_vecs.rows();
  MiningResult out;
  out.effective_k = k;
  if (n < k + 1) {
    out.effective_k = n == 0 ? 0 : n - 1;
    out.k_shrunk = true;
  }
  for (std::size_t q = 0; q < query_vecs.rows(); ++q) {
    if (gold[q] >= n) throw DataError("gold document not in corpus");
    std::vector<std::pair<T, std::size_t>> scored;
    for (std::size_t d = 0; d < n; ++d)
      if (d != gold[q]) scored.emplace_back(cosine(query_vecs.row(q), corpus_vecs.row(d)), d);
    const std::size_t take = std::min(out.effective_k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + take, scored.end(),
                      [](const auto& a, const auto& b) {
                        return a.first > b.first || (a.first == b.first && a.second < b.second);
                      });
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < take; ++i) ids.push_back(scored[i].second);
    out.negatives.push_back(std::move(ids));
  }
  return out;
}

/// Self-mining with the model under training at full depth, dim and rank.
template <typename T>
MiningResult mine_hard_negatives(const ModelWeights<T>& model,
                                 const std::vector<std::string>& corpus,
                                 const std::vector<std::string>& queries,
                                 const std::vector<std::size_t>& gold, std::size_t k) {
  return mine_hard_negatives(embed(model, corpus), embed(model, queries), gold, k);
}

// ---------------------------------------------------------------------------
// Two-stage mixture

struct SourceSpec {
  std::string name;
  std::string path;
  double weight = 1.0;  // multiplies the per-source cap
};

struct MixtureSpec {
  int stage = 1;
  std::size_t per_source_cap = 100000;
  std::vector<SourceSpec> sources;
  std::uint64_t seed = 0;
  InstructionTemplate instruction_template;
};

struct DataSource {
  std::string name;
  std::vector<Sample> samples;
};

/// Applies the per-source cap (seeded subsample), then a global seeded
/// shuffle. Stage 1 admits only retrieval sources and leaves queries bare; stage 2
/// applies instructions to queries. Emission order depends only on
/// (spec, sources).
class MixtureIterator {
 public:
  MixtureIterator(const MixtureSpec& spec, std::vector<DataSource> sources) {
    if (spec.stage != 1 && spec.stage != 2) throw ConfigError("stage must be 1 or 2");
    std::mt19937_64 rng(spec.seed);
    for (std::size_t si = 0; si < sources.size(); ++si) {
      auto& src = sources[si];
      if (spec.stage == 1)
        for (const auto& s : src.samples)
          if (s.format != Format::kRetrieval)
            throw ConfigError("stage 1 admits only retrieval sources; \"" + src.name +
                              "\" contains " + format_name(s.format) + " samples");
      double weight = 1.0;
      for (const auto& ss : spec.sources)
        if (ss.name == src.name) weight = ss.weight;
      if (!(weight > 0)) throw ConfigError("source weight must be positive");
      const auto cap = static_cast<std::size_t>(static_cast<double>(spec.per_source_cap) * weight);
      std::vector<std::size_t> idx(src.samples.size());
      std::iota(idx.begin(), idx.end(), 0);
      if (idx.size() > cap) {
        std::mt19937_64 src_rng(spec.seed ^ (0x9e3779b97f4a7c15ULL * (si + 1)));
        std::shuffle(idx.begin(), idx.end(), src_rng);
        idx.resize(cap);
        std::sort(idx.begin(), idx.end());
      }
      for (std::size_t i : idx) {
        Sample s = std::move(src.samples[i]);
        if (s.source.empty()) s.source = src.name;
        if (spec.stage == 2) s = apply_instruction(std::move(s), spec.instruction_template);
        stream_.push_back(std::move(s));
      }
    }
    std::shuffle(stream_.begin(), stream_.end(), rng);
  }

  std::optional<Sample> next() {
    if (pos_ >= stream_.size()) return std::nullopt;
    return stream_[pos_++];
  }
  std::size_t size() const { return stream_.size(); }
  const std::vector<Sample>& samples() const { return stream_; }

 private:
  std::vector<Sample> stream_;
  std::size_t pos_ = 0;
};

/// Groups a sample stream into batches homogeneous in format and hard-negative
/// count, preserving stream order within each group. Partial batches are
/// emitted at the end.
inline std::vector<std::vector<Sample>> make_batches(const std::vector<Sample>& stream,
                                                     std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::map<std::pair<int, std::size_t>, std::vector<Sample>> open;
  std::vector<std::vector<Sample>> out;
  for (const auto& s : stream) {
    auto& bucket = open[{static_cast<int>(s.format), s.hard_negatives.size()}];
    bucket.push_back(s);
    if (bucket.size() == batch_size) {
      out.push_back(std::move(bucket));
      bucket.clear();
    }
  }
  for (auto& [key, bucket] : open)
    if (!bucket.empty()) out.push_back(std::move(bucket));
  return out;
}

}  // namespace m3d
