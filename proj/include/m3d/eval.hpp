#pragma once

// Retrieval / classification / STS metrics, the synthetic cluster-retrieval
// task, and the (depth, dim, rank) sweep driver.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "json.hpp"
#include "m3d/data.hpp"
#include "m3d/deploy.hpp"
#include "m3d/error.hpp"
#include "m3d/model.hpp"
#include "m3d/tensor.hpp"

namespace m3d {

// ---------------------------------------------------------------------------
// Metrics

struct NdcgResult {
  double value = 0.0;
  bool no_relevant = false;  // value is 0 by definition
};

/// NDCG@k with gain = relevance and discount 1/log2(position + 1).
inline NdcgResult ndcg_at_k(const std::vector<std::size_t>& ranked,
                            const std::map<std::size_t, double>& relevance, std::size_t k) {
  if (k < 1) throw ParameterError("k must be at least 1");
  std::vector<double> gains;
  for (const auto& [id, rel] : relevance)
    if (rel > 0) gains.push_back(rel);
  if (gains.empty()) return {0.0, true};
  std::sort(gains.rbegin(), gains.rend());
  double ideal = 0;
  for (std::size_t i = 0; i < std::min(k, gains.size()); ++i)
    ideal += gains[i] / std::log2(static_cast<double>(i) + 2.0);
  double dcg = 0;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) {
    auto it = relevance.find(ranked[i]);
    if (it != relevance.end() && it->second > 0)
      dcg += it->second / std::log2(static_cast<double>(i) + 2.0);
  }
  return {dcg / ideal, false};
}

/// Document ids by descending score; ties by ascending id.
inline std::vector<std::size_t> rank_by_score(const std::vector<double>& scores) {
  std::vector<std::size_t> ids(scores.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return ids;
}

/// 1-based ranks with ties given their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw ParameterError("spearman needs two equal-length score lists of length >= 2");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) throw NumericalError("spearman undefined for zero-variance scores");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Argmax cosine over label vectors; ties → lowest label index.
template <typename T>
std::size_t argmax_similarity(std::span<const T> text_vec, const Tensor<T>& label_vecs) {
  if (label_vecs.rows() < 2) throw ParameterError("need at least two labels");
  std::size_t best = 0;
  T best_score = cosine(text_vec, label_vecs.row(0));
  for (std::size_t i = 1; i < label_vecs.rows(); ++i) {
    const T s = cosine(text_vec, label_vecs.row(i));
    if (s > best_score) {
      best_score = s;
      best = i;
    }
  }
  return best;
}

template <typename T>
std::size_t classify_by_label_similarity(const ModelWeights<T>& model, const std::string& text,
                                         const std::vector<std::string>& label_texts,
                                         EmbedOptions opt = {}) {
  if (label_texts.size() < 2) throw ParameterError("need at least two label texts");
  Tensor<T> tv = embed(model, {text}, opt);
  return argmax_similarity<T>(tv.row(0), embed(model, label_texts, opt));
}

// ---------------------------------------------------------------------------
// Tasks

struct RetrievalTask {
  std::string name;
  std::vector<std::string> corpus;
  std::vector<std::string> queries;
  std::vector<std::map<std::size_t, double>> relevance;  // per query
};

struct ClassificationTask {
  std::string name;
  std::vector<std::string> texts;
  std::vector<std::size_t> labels;
  std::vector<std::string> label_texts;
};

struct StsTask {
  std::string name;
  std::vector<std::pair<std::string, std::string>> pairs;
  std::vector<double> gold_scores;
};

using EvalTask = std::variant<RetrievalTask, ClassificationTask, StsTask>;

inline const std::string& task_name(const EvalTask& t) {
  return std::visit([](const auto& x) -> const std::string& { return x.name; }, t);
}

inline const char* task_metric(const EvalTask& t) {
  if (std::holds_alternative<RetrievalTask>(t)) return "ndcg@10";
  if (std::holds_alternative<ClassificationTask>(t)) return "accuracy";
  return "spearman";
}

inline std::size_t task_size(const EvalTask& t) {
  if (auto* r = std::get_if<RetrievalTask>(&t)) return r->corpus.size();
  if (auto* c = std::get_if<ClassificationTask>(&t)) return c->texts.size();
  return std::get<StsTask>(t).pairs.size();
}

/// Scores precomputed unit vectors against a retrieval task.
template <typename T>
double retrieval_ndcg(const Tensor<T>& query_vecs, const Tensor<T>& corpus_vecs,
                      const RetrievalTask& task, std::size_t k = 10) {
  double total = 0;
  std::vector<double> scores(corpus_vecs.rows());
  for (std::size_t q = 0; q < query_vecs.rows(); ++q) {
    for (std::size_t d = 0; d < corpus_vecs.rows(); ++d)
      scores[d] = static_cast<double>(dot<T>(query_vecs.row(q), corpus_vecs.row(d)));
    total += ndcg_at_k(rank_by_score(scores), task.relevance[q], k).value;
  }
  return query_vecs.rows() ? total / static_cast<double>(query_vecs.rows()) : 0.0;
}

// ---------------------------------------------------------------------------
// Synthetic cluster retrieval

/// Each cluster owns a private slice of words. Documents draw `doc_len`
/// distinct words from their cluster's slice; a query copies `query_len`
/// words of its gold document, each replaced with probability `query_noise`
/// by a word from a random cluster. Relevance is binary on the gold document.
struct SynthTaskSpec {
  std::size_t n_clusters = 32;
  std::size_t docs_per_cluster = 16;
  std::size_t words_per_cluster = 48;
  std::size_t doc_len = 12;
  std::size_t query_len = 6;
  double query_noise = 0.2;
  std::size_t n_queries = 128;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_clusters < 2 || docs_per_cluster < 2) throw ConfigError("need >= 2 clusters and docs");
    if (doc_len < 1 || doc_len > words_per_cluster) throw ConfigError("doc_len out of range");
    if (query_len < 1 || query_len > doc_len) throw ConfigError("query_len out of range");
    if (query_noise < 0 || query_noise > 1) throw ConfigError("query_noise outside [0, 1]");
  }
};

inline void to_json(nlohmann::json& j, const SynthTaskSpec& s) {
  j = nlohmann::json{{"n_clusters", s.n_clusters},       {"docs_per_cluster", s.docs_per_cluster},
                     {"words_per_cluster", s.words_per_cluster}, {"doc_len", s.doc_len},
                     {"query_len", s.query_len},         {"query_noise", s.query_noise},
                     {"n_queries", s.n_queries},         {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SynthTaskSpec& s) {
  SynthTaskSpec d;
  s.n_clusters = j.value("n_clusters", d.n_clusters);
  s.docs_per_cluster = j.value("docs_per_cluster", d.docs_per_cluster);
  s.words_per_cluster = j.value("words_per_cluster", d.words_per_cluster);
  s.doc_len = j.value("doc_len", d.doc_len);
  s.query_len = j.value("query_len", d.query_len);
  s.query_noise = j.value("query_noise", d.query_noise);
  s.n_queries = j.value("n_queries", d.n_queries);
  s.seed = j.value("seed", d.seed);
}

inline std::string synth_word(std::size_t cluster, std::size_t index) {
  return "c" + std::to_string(cluster) + "w" + std::to_string(index);
}

struct SynthCorpus {
  std::vector<std::string> docs;
  std::vector<std::size_t> doc_cluster;
  std::vector<std::vector<std::size_t>> doc_words;  // word indices within the cluster slice
};

namespace detail {

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) out += (i ? " " : "") + words[i];
  return out;
}

inline SynthCorpus synth_corpus(const SynthTaskSpec& spec, std::mt19937_64& rng) {
  SynthCorpus c;
  std::vector<std::size_t> slice(spec.words_per_cluster);
  std::iota(slice.begin(), slice.end(), 0);
  for (std::size_t k = 0; k < spec.n_clusters; ++k)
    for (std::size_t i = 0; i < spec.docs_per_cluster; ++i) {
      std::shuffle(slice.begin(), slice.end(), rng);
      std::vector<std::size_t> picked(slice.begin(), slice.begin() + spec.doc_len);
      std::vector<std::string> words;
      for (auto w : picked) words.push_back(synth_word(k, w));
      c.docs.push_back(join_words(words));
      c.doc_cluster.push_back(k);
      c.doc_words.push_back(std::move(picked));
    }
  return c;
}

// Query draws for evaluation and training come from separate streams so the
// two never share queries while sharing one corpus.
inline constexpr std::uint64_t kEvalQueryStream = 0x5eed0000e7a1ULL;
inline constexpr std::uint64_t kTrainQueryStream = 0x5eed00007a17ULL;

inline std::string synth_query(const SynthTaskSpec& spec, const SynthCorpus& c, std::size_t doc,
                               std::mt19937_64& rng) {
  std::vector<std::size_t> words = c.doc_words[doc];
  std::shuffle(words.begin(), words.end(), rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> any_cluster(0, spec.n_clusters - 1);
  std::uniform_int_distribution<std::size_t> any_word(0, spec.words_per_cluster - 1);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < spec.query_len; ++i) {
    if (u(rng) < spec.query_noise)
      out.push_back(synth_word(any_cluster(rng), any_word(rng)));
    else
      out.push_back(synth_word(c.doc_cluster[doc], words[i]));
  }
  return join_words(out);
}

}  // namespace detail

/// Evaluation task: the spec's corpus and `n_queries` queries with one gold
/// document each. Pure function of the spec.
inline RetrievalTask generate_synth_task(const SynthTaskSpec& spec,
                                         const std::string& name = "synth-retrieval") {
  spec.validate();
  std::mt19937_64 corpus_rng(spec.seed);
  SynthCorpus c = detail::synth_corpus(spec, corpus_rng);
  std::mt19937_64 rng(spec.seed ^ detail::kEvalQueryStream);
  RetrievalTask t;
  t.name = name;
  t.corpus = c.docs;
  std::uniform_int_distribution<std::size_t> pick(0, c.docs.size() - 1);
  for (std::size_t q = 0; q < spec.n_queries; ++q) {
    const std::size_t gold = pick(rng);
    t.queries.push_back(detail::synth_query(spec, c, gold, rng));
    t.relevance.push_back({{gold, 1.0}});
  }
  return t;
}

/// Training samples over the same corpus as generate_synth_task with an
/// independent query stream; hard negatives are other documents of the gold
/// document's cluster.
inline std::vector<Sample> generate_synth_training(const SynthTaskSpec& spec,
                                                   std::size_t n_samples,
                                                   std::size_t n_hard_negatives,
                                                   const std::string& source = "synth") {
  spec.validate();
  if (n_hard_negatives + 1 > spec.docs_per_cluster)
    throw ConfigError("not enough documents per cluster for the requested hard negatives");
  std::mt19937_64 corpus_rng(spec.seed);
  SynthCorpus c = detail::synth_corpus(spec, corpus_rng);
  std::mt19937_64 rng(spec.seed ^ detail::kTrainQueryStream);
  std::uniform_int_distribution<std::size_t> pick(0, c.docs.size() - 1);
  std::vector<Sample> out;
  for (std::size_t n = 0; n < n_samples; ++n) {
    const std::size_t gold = pick(rng);
    Sample s;
    s.query = detail::synth_query(spec, c, gold, rng);
    s.positive = c.docs[gold];
    const std::size_t base = c.doc_cluster[gold] * spec.docs_per_cluster;
    std::vector<std::size_t> mates;
    for (std::size_t i = 0; i < spec.docs_per_cluster; ++i)
      if (base + i != gold) mates.push_back(base + i);
    std::shuffle(mates.begin(), mates.end(), rng);
    for (std::size_t i = 0; i < n_hard_negatives; ++i) s.hard_negatives.push_back(c.docs[mates[i]]);
    s.format = Format::kRetrieval;
    s.source = source;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sweep

struct SweepAxes {
  std::vector<std::size_t> depths;  // each must be a tap layer
  std::vector<std::size_t> dims;
  std::vector<std::size_t> ranks;   // 0 = embedding as stored, no re-factorization
};

enum class RankMode {
  kSvd,            // truncated SVD of the compatibility-mode matrix
  kColumnPrefix,   // first r' columns of E_A / rows of E_B (factorized models only)
};

struct SweepKey {
  std::size_t depth = 0, dim = 0, rank = 0;
  auto operator<=>(const SweepKey&) const = default;
};

struct EvalReport {
  // task name → metric value, per configuration
  std::map<SweepKey, std::map<std::string, double>> results;
  std::map<std::string, std::string> metric_names;
  std::map<std::string, std::size_t> corpus_sizes;
  double wall_seconds = 0;

  double at(std::size_t depth, std::size_t dim, std::size_t rank, const std::string& task) const {
    auto it = results.find({depth, dim, rank});
    if (it == results.end()) throw UsageError("no sweep entry for that configuration");
    return it->second.at(task);
  }
};

namespace detail {

template <typename T>
Tensor<T> raw_taps(const ModelWeights<T>& w, const std::vector<std::string>& texts,
                   std::size_t depth, std::optional<std::size_t> rank, std::size_t batch = 64) {
  const auto& c = w.config;
  Tensor<T> out({texts.size(), c.d_model});
  for (std::size_t start = 0; start < texts.size(); start += batch) {
    const std::size_t end = std::min(texts.size(), start + batch);
    std::vector<TokenSequence> tokens;
    for (std::size_t i = start; i < end; ++i)
      tokens.push_back(encode(texts[i], c.vocab(), c.max_seq_len));
    auto taps = forward_taps(w, tokens, rank, std::vector<std::size_t>{depth});
    std::copy(taps.at(depth).data().begin(), taps.at(depth).data().end(), out.row(start).data());
  }
  return out;
}

template <typename T>
Tensor<T> prefix_unit(const Tensor<T>& raw, std::size_t dim) {
  return l2_normalize_rows(slice(raw, 0, raw.rows(), 0, dim));
}

}  // namespace detail

/// Evaluates every task at every (depth, dim, rank). Embeddings are computed
/// once per (depth, rank) and reused across dims; the prefix is normalized
/// exactly as embed() does, so the full-config entry matches the plain path.
template <typename T>
EvalReport run_sweep(const ModelWeights<T>& model, const std::vector<EvalTask>& tasks,
                     const SweepAxes& axes, RankMode mode = RankMode::kSvd) {
  const auto start = std::chrono::steady_clock::now();
  const auto& c = model.config;
  for (auto d : axes.depths)
    if (!c.has_tap(d)) throw UsageError("sweep depth " + std::to_string(d) + " is not a tap");
  for (auto d : axes.dims)
    if (d < 1 || d > c.d_model) throw UsageError("sweep dim outside [1, d_model]");
  if (axes.depths.empty() || axes.dims.empty() || axes.ranks.empty())
    throw UsageError("empty sweep axis");

  EvalReport report;
  for (const auto& t : tasks) {
    report.metric_names[task_name(t)] = task_metric(t);
    report.corpus_sizes[task_name(t)] = task_size(t);
  }
  for (std::size_t rank : axes.ranks) {
    const ModelWeights<T>* m = &model;
    ModelWeights<T> refactored;
    std::optional<std::size_t> forward_rank;
    if (rank != 0) {
      if (mode == RankMode::kSvd) {
        if (rank > std::min(c.vocab_size, c.d_model)) throw UsageError("sweep rank too large");
        refactored = to_efficiency(model, rank);
        m = &refactored;
      } else {
        if (!model.factors || rank > model.factors->rank())
          throw UsageError("column-prefix ranks need a factorized model with rank >= r'");
        forward_rank = rank;
      }
    }
    for (std::size_t depth : axes.depths) {
      for (const auto& task : tasks) {
        const std::string& name = task_name(task);
        if (auto* rt = std::get_if<RetrievalTask>(&task)) {
          Tensor<T> qraw = detail::raw_taps(*m, rt->queries, depth, forward_rank);
          Tensor<T> draw = detail::raw_taps(*m, rt->corpus, depth, forward_rank);
          for (std::size_t dim : axes.dims)
            report.results[{depth, dim, rank}][name] = retrieval_ndcg(
                detail::prefix_unit(qraw, dim), detail::prefix_unit(draw, dim), *rt);
        } else if (auto* ct = std::get_if<ClassificationTask>(&task)) {
          Tensor<T> traw = detail::raw_taps(*m, ct->texts, depth, forward_rank);
          Tensor<T> lraw = detail::raw_taps(*m, ct->label_texts, depth, forward_rank);
          for (std::size_t dim : axes.dims) {
            Tensor<T> tv = detail::prefix_unit(traw, dim), lv = detail::prefix_unit(lraw, dim);
            std::size_t correct = 0;
            for (std::size_t i = 0; i < tv.rows(); ++i)
              correct += argmax_similarity<T>(tv.row(i), lv) == ct->labels[i];
            report.results[{depth, dim, rank}][name] =
                tv.rows() ? static_cast<double>(correct) / static_cast<double>(tv.rows()) : 0.0;
          }
        } else {
          const auto& st = std::get<StsTask>(task);
          std::vector<std::string> a, b;
          for (const auto& [x, y] : st.pairs) {
            a.push_back(x);
            b.push_back(y);
          }
          Tensor<T> araw = detail::raw_taps(*m, a, depth, forward_rank);
          Tensor<T> braw = detail::raw_taps(*m, b, depth, forward_rank);
          for (std::size_t dim : axes.dims) {
            Tensor<T> av = detail::prefix_unit(araw, dim), bv = detail::prefix_unit(braw, dim);
            std::vector<double> pred;
            for (std::size_t i = 0; i < av.rows(); ++i)
              pred.push_back(static_cast<double>(dot<T>(av.row(i), bv.row(i))));
            report.results[{depth, dim, rank}][name] = spearman(pred, st.gold_scores);
          }
        }
      }
    }
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

/// Plain evaluation path: embed() at one configuration, then NDCG@10.
template <typename T>
double evaluate_retrieval(const ModelWeights<T>& model, const RetrievalTask& task,
                          EmbedOptions opt = {}) {
  return retrieval_ndcg(embed(model, task.queries, opt), embed(model, task.corpus, opt), task);
}

// ---------------------------------------------------------------------------
// Report serialization

inline std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  os << "depth\tdim\trank\ttask\tmetric\tvalue\n";
  for (const auto& [key, tasks] : r.results)
    for (const auto& [name, value] : tasks)
      os << key.depth << '\t' << key.dim << '\t' << key.rank << '\t' << name << '\t'
         << r.metric_names.at(name) << '\t' << std::fixed << std::setprecision(6) << value
         << '\n';
  return os.str();
}

inline nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [key, tasks] : r.results)
    for (const auto& [name, value] : tasks)
      entries.push_back({{"depth", key.depth},
                         {"dim", key.dim},
                         {"rank", key.rank},
                         {"task", name},
                         {"metric", r.metric_names.at(name)},
                         {"value", value}});
  return {{"kind", "eval-report"},
          {"corpus_sizes", r.corpus_sizes},
          {"wall_seconds", r.wall_seconds},
          {"entries", entries}};
}

/// Structured report file: same magic-line / JSON / terminator header as a
/// checkpoint container, with an empty payload.
inline void write_report_file(const std::filesystem::path& path, const nlohmann::json& body,
                              const char* magic = "M3D-REPORT") {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  nlohmann::json j = body;
  j["format_version"] = 1;
  out << magic << " 1\n" << j.dump(1) << "\nEND-MANIFEST\n";
}

inline nlohmann::json read_report_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line, text;
  std::getline(in, line);
  if (line.rfind("M3D-", 0) != 0) throw FormatError(path.string() + ": not a report file");
  bool done = false;
  while (std::getline(in, line)) {
    if (line == "END-MANIFEST") {
      done = true;
      break;
    }
    text += line + "\n";
  }
  if (!done) throw FormatError(path.string() + ": report terminator missing");
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace m3d
