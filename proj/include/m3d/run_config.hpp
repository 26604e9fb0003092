#pragma once
// Structured run configuration shared by every CLI subcommand, plus the task
// file format consumed by evaluation.

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "m3d/bench.hpp"
#include "m3d/data.hpp"
#include "m3d/error.hpp"
#include "m3d/eval.hpp"
#include "m3d/model.hpp"
#include "m3d/objective.hpp"
#include "m3d/training.hpp"

namespace m3d {

inline void to_json(nlohmann::json& j, const LossConfig& c) {
  j = nlohmann::json{
      {"temperature", c.temperature},
      {"n_hard_negatives", c.n_hard_negatives},
      {"coefficients", c.coefficients == CoefficientRule::kUniform ? "uniform" : "sqrt_dim_ratio"},
      {"in_batch_negatives", c.in_batch_negatives}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
  LossConfig d;
  c.temperature = j.value("temperature", d.temperature);
  c.n_hard_negatives = j.value("n_hard_negatives", d.n_hard_negatives);
  const std::string rule = j.value("coefficients", std::string("sqrt_dim_ratio"));
  if (rule == "uniform")
    c.coefficients = CoefficientRule::kUniform;
  else if (rule == "sqrt_dim_ratio")
    c.coefficients = CoefficientRule::kSqrtDimRatio;
  else
    throw ConfigError("unknown coefficient rule \"" + rule + "\"");
  c.in_batch_negatives = j.value("in_batch_negatives", d.in_batch_negatives);
}

inline void to_json(nlohmann::json& j, const MixtureSpec& m) {
  nlohmann::json sources = nlohmann::json::array();
  for (const auto& s : m.sources)
    sources.push_back({{"name", s.name}, {"path", s.path}, {"weight", s.weight}});
  j = nlohmann::json{{"per_source_cap", m.per_source_cap},
                     {"seed", m.seed},
                     {"sources", sources},
                     {"instruction_prefix", m.instruction_template.prefix},
                     {"instruction_separator", m.instruction_template.separator}};
}

inline void from_json(const nlohmann::json& j, MixtureSpec& m) {
  MixtureSpec d;
  m.per_source_cap = j.value("per_source_cap", d.per_source_cap);
  m.seed = j.value("seed", d.seed);
  m.instruction_template.prefix = j.value("instruction_prefix", d.instruction_template.prefix);
  m.instruction_template.separator =
      j.value("instruction_separator", d.instruction_template.separator);
  m.sources.clear();
  for (const auto& s : j.value("sources", nlohmann::json::array())) {
    SourceSpec src;
    src.path = s.at("path").get<std::string>();
    src.name = s.value("name", std::filesystem::path(src.path).stem().string());
    src.weight = s.value("weight", 1.0);
    m.sources.push_back(src);
  }
}

struct EvalSection {
  std::vector<std::string> tasks;  // task file paths
  std::vector<std::size_t> depths, dims, ranks;  // empty → model defaults
  RankMode rank_mode = RankMode::kSvd;
};

inline void to_json(nlohmann::json& j, const EvalSection& e) {
  j = nlohmann::json{{"tasks", e.tasks},
                     {"depths", e.depths},
                     {"dims", e.dims},
                     {"ranks", e.ranks},
                     {"rank_mode", e.rank_mode == RankMode::kSvd ? "svd" : "column_prefix"}};
}

inline void from_json(const nlohmann::json& j, EvalSection& e) {
  e.tasks = j.value("tasks", std::vector<std::string>{});
  e.depths = j.value("depths", std::vector<std::size_t>{});
  e.dims = j.value("dims", std::vector<std::size_t>{});
  e.ranks = j.value("ranks", std::vector<std::size_t>{});
  const std::string mode = j.value("rank_mode", std::string("svd"));
  if (mode == "svd")
    e.rank_mode = RankMode::kSvd;
  else if (mode == "column_prefix")
    e.rank_mode = RankMode::kColumnPrefix;
  else
    throw ConfigError("unknown rank_mode \"" + mode + "\"");
}

/// Axes with unset entries filled from the model: every tap, every nested
/// dim, and the stored embedding plus halvings of d_model below its rank.
inline SweepAxes resolve_axes(const EvalSection& e, const ModelConfig& c) {
  SweepAxes a{e.depths, e.dims, e.ranks};
  if (a.depths.empty()) a.depths = c.mll_layers;
  if (a.dims.empty()) a.dims = c.mrl_dims;
  if (a.ranks.empty()) {
    a.ranks = {0};
    for (std::size_t r = c.d_model / 2; r >= 1; r /= 2)
      if (r < c.full_rank()) a.ranks.push_back(r);
  }
  return a;
}

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  MixtureSpec data;
  EvalSection eval;
  BenchWorkload bench;

  /// Loss sets follow the model's taps and dims.
  LossConfig resolved_loss() const { return loss_config_for(model, loss); }
};

inline void to_json(nlohmann::json& j, const RunConfig& r) {
  j = nlohmann::json{{"model", r.model}, {"loss", r.loss},   {"train", r.train},
                     {"data", r.data},   {"eval", r.eval},   {"bench", r.bench}};
}

inline void from_json(const nlohmann::json& j, RunConfig& r) {
  RunConfig d;
  r.model = j.value("model", d.model);
  r.loss = j.value("loss", d.loss);
  r.train = j.value("train", d.train);
  r.data = j.value("data", d.data);
  r.eval = j.value("eval", d.eval);
  r.bench = j.value("bench", d.bench);
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  try {
    return read_json_file(path).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Task files

inline nlohmann::json task_to_json(const EvalTask& t) {
  if (auto* r = std::get_if<RetrievalTask>(&t)) {
    nlohmann::json rel = nlohmann::json::array();
    for (const auto& m : r->relevance) {
      nlohmann::json q = nlohmann::json::object();
      for (const auto& [doc, grade] : m) q[std::to_string(doc)] = grade;
      rel.push_back(q);
    }
    return {{"type", "retrieval"},
            {"name", r->name},
            {"corpus", r->corpus},
            {"queries", r->queries},
            {"relevance", rel}};
  }
  if (auto* c = std::get_if<ClassificationTask>(&t))
    return {{"type", "classification"},
            {"name", c->name},
            {"texts", c->texts},
            {"labels", c->labels},
            {"label_texts", c->label_texts}};
  const auto& s = std::get<StsTask>(t);
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& [a, b] : s.pairs) pairs.push_back({a, b});
  return {{"type", "sts"}, {"name", s.name}, {"pairs", pairs}, {"gold_scores", s.gold_scores}};
}

inline EvalTask task_from_json(const nlohmann::json& j) {
  try {
    const std::string type = j.at("type").get<std::string>();
    if (type == "retrieval") {
      RetrievalTask r;
      r.name = j.at("name").get<std::string>();
      r.corpus = j.at("corpus").get<std::vector<std::string>>();
      r.queries = j.at("queries").get<std::vector<std::string>>();
      for (const auto& q : j.at("relevance")) {
        std::map<std::size_t, double> m;
        for (auto it = q.begin(); it != q.end(); ++it) {
          const std::size_t doc = std::stoul(it.key());
          if (doc >= r.corpus.size()) throw DataError("relevance names a doc outside the corpus");
          m[doc] = it.value().get<double>();
        }
        r.relevance.push_back(m);
      }
      if (r.relevance.size() != r.queries.size())
        throw DataError("one relevance map per query is required");
      return r;
    }
    if (type == "classification") {
      ClassificationTask c;
      c.name = j.at("name").get<std::string>();
      c.texts = j.at("texts").get<std::vector<std::string>>();
      c.labels = j.at("labels").get<std::vector<std::size_t>>();
      c.label_texts = j.at("label_texts").get<std::vector<std::string>>();
      if (c.labels.size() != c.texts.size()) throw DataError("one label per text is required");
      for (auto l : c.labels)
        if (l >= c.label_texts.size()) throw DataError("label index outside label_texts");
      return c;
    }
    if (type == "sts") {
      StsTask s;
      s.name = j.at("name").get<std::string>();
      for (const auto& p : j.at("pairs"))
        s.pairs.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
      s.gold_scores = j.at("gold_scores").get<std::vector<double>>();
      if (s.gold_scores.size() != s.pairs.size()) throw DataError("one gold score per pair");
      return s;
    }
    throw DataError("unknown task type \"" + type + "\"");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("task file: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw DataError("task file: relevance keys must be document indices");
  }
}

inline EvalTask read_task_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return task_from_json(j);
}

}  // namespace m3d
