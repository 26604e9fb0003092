#pragma once

// Inference throughput and memory across pruned depths and embedding modes.

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "m3d/deploy.hpp"
#include "m3d/error.hpp"
#include "m3d/model.hpp"
#include "m3d/tokenizer.hpp"

namespace m3d {

struct BenchWorkload {
  std::size_t batch_size = 16;
  std::size_t seq_len = 32;
  std::size_t iterations = 4;  // forward passes per trial
  std::size_t trials = 5;
  std::size_t warmups = 2;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1 || seq_len < 2 || iterations < 1)
      throw ConfigError("bench workload needs batch >= 1, seq_len >= 2, iterations >= 1");
    if (trials < 5) throw ConfigError("bench needs at least 5 trials");
  }
};

inline void to_json(nlohmann::json& j, const BenchWorkload& w) {
  j = nlohmann::json{{"batch_size", w.batch_size}, {"seq_len", w.seq_len},
                     {"iterations", w.iterations}, {"trials", w.trials},
                     {"warmups", w.warmups},       {"seed", w.seed}};
}

inline void from_json(const nlohmann::json& j, BenchWorkload& w) {
  BenchWorkload d;
  w.batch_size = j.value("batch_size", d.batch_size);
  w.seq_len = j.value("seq_len", d.seq_len);
  w.iterations = j.value("iterations", d.iterations);
  w.trials = j.value("trials", d.trials);
  w.warmups = j.value("warmups", d.warmups);
  w.seed = j.value("seed", d.seed);
}

struct BenchResult {
  std::size_t depth = 0;
  std::string rank_mode;  // "dense" or "rank-<r>"
  std::size_t parameters = 0;
  std::size_t embedding_parameters = 0;
  std::optional<std::size_t> peak_rss_bytes;  // empty → unmeasured
  double tokens_per_second = 0;               // median over trials
  std::vector<double> trial_tokens_per_second;
  BenchWorkload workload;
};

/// Closed-form parameter count of a config truncated to `depth` layers.
inline std::size_t analytic_parameter_count(const ModelConfig& c, std::size_t depth,
                                            std::optional<std::size_t> rank) {
  const std::size_t d = c.d_model;
  const std::size_t per_layer = 4 * d * d + 2 * d * c.d_ff + 2 * d;
  return embedding_parameter_count(c.vocab_size, d, rank) + depth * per_layer + d;
}

/// VmHWM from /proc/self/status, in bytes.
inline std::optional<std::size_t> peak_rss_bytes() {
  std::ifstream in("/proc/self/status");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("VmHWM:", 0) == 0) {
      std::istringstream is(line.substr(6));
      std::size_t kb = 0;
      if (is >> kb) return kb * 1024;
    }
  }
  return std::nullopt;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw UsageError("median of empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

/// Prunes to `depth`, optionally re-factorizes at `rank`, and times forward
/// passes over a fixed random-token workload.
template <typename T>
BenchResult measure(const ModelWeights<T>& model, std::size_t depth,
                    std::optional<std::size_t> rank, const BenchWorkload& workload) {
  workload.validate();
  const auto& c = model.config;
  if (depth < 1 || depth > c.n_layers) throw UsageError("bench depth outside [1, L]");
  if (workload.seq_len > c.max_seq_len) throw ConfigError("bench seq_len exceeds max_seq_len");

  ModelWeights<T> m = prune_layers(model, depth);
  m = rank ? to_efficiency(m, *rank) : to_compatibility(m);

  std::mt19937_64 rng(workload.seed);
  std::uniform_int_distribution<std::uint32_t> tok(3, static_cast<std::uint32_t>(c.vocab_size - 1));
  std::vector<TokenSequence> batch(workload.batch_size);
  for (auto& seq : batch) {
    seq.push_back(kBosId);
    for (std::size_t i = 2; i < workload.seq_len; ++i) seq.push_back(tok(rng));
    seq.push_back(kEosId);
  }
  const std::vector<std::size_t> tap{depth};
  const double tokens =
      static_cast<double>(workload.batch_size * workload.seq_len * workload.iterations);

  auto run = [&] {
    for (std::size_t i = 0; i < workload.iterations; ++i) (void)forward_taps(m, batch, rank, tap);
  };
  for (std::size_t i = 0; i < workload.warmups; ++i) run();

  BenchResult r;
  for (std::size_t t = 0; t < workload.trials; ++t) {
    const auto start = std::chrono::steady_clock::now();
    run();
    const double s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.trial_tokens_per_second.push_back(tokens / std::max(s, 1e-9));
  }
  r.depth = depth;
  r.rank_mode = rank ? "rank-" + std::to_string(*rank) : "dense";
  r.parameters = analytic_parameter_count(c, depth, rank);
  r.embedding_parameters = embedding_parameter_count(c.vocab_size, c.d_model, rank);
  r.peak_rss_bytes = peak_rss_bytes();
  r.tokens_per_second = median(r.trial_tokens_per_second);
  r.workload = workload;
  return r;
}

/// Columns: layers, rank mode, parameters, peak memory, throughput.
inline std::string bench_table(const std::vector<BenchResult>& rows) {
  std::ostringstream os;
  os << "layers\trank\tparameters\tpeak_memory_gb\tthroughput_tok_s\n";
  for (const auto& r : rows) {
    os << r.depth << '\t' << r.rank_mode << '\t' << r.parameters << '\t';
    if (r.peak_rss_bytes)
      os << std::fixed << std::setprecision(4) << static_cast<double>(*r.peak_rss_bytes) / 1e9;
    else
      os << "unmeasured";
    os << '\t' << std::fixed << std::setprecision(1) << r.tokens_per_second << '\n';
  }
  return os.str();
}

inline nlohmann::json bench_json(const std::vector<BenchResult>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j{{"layers", r.depth},
                     {"rank_mode", r.rank_mode},
                     {"parameters", r.parameters},
                     {"embedding_parameters", r.embedding_parameters},
                     {"tokens_per_second", r.tokens_per_second},
                     {"trials", r.trial_tokens_per_second},
                     {"workload", r.workload}};
    j["peak_rss_bytes"] = r.peak_rss_bytes ? nlohmann::json(*r.peak_rss_bytes)
                                           : nlohmann::json("unmeasured");
    out.push_back(j);
  }
  return {{"kind", "bench-report"}, {"results", out}};
}

}  // namespace m3d
