#pragma once

// Contrastive loss, the summed layer×dimension objective, loss coefficients,
// negative assembly and the MEL rank sampler.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "m3d/autograd.hpp"
#include "m3d/data.hpp"
#include "m3d/error.hpp"
#include "m3d/tensor.hpp"

namespace m3d {

enum class CoefficientRule {
  kSqrtDimRatio,  // c = 1/sqrt(d_model/d')
  kUniform,       // c = 1
};

struct LossConfig {
  double temperature = 0.5;
  std::size_t n_hard_negatives = 7;  // classification batches always use 1
  CoefficientRule coefficients = CoefficientRule::kSqrtDimRatio;
  std::vector<std::size_t> mrl_dims{8, 16, 32, 64};
  std::vector<std::size_t> mll_layers{1, 2, 4, 8};
  std::size_t d_model = 64;
  bool in_batch_negatives = false;

  void validate() const {
    if (!(temperature > 0)) throw ConfigError("temperature must be positive");
    if (mrl_dims.empty() || mll_layers.empty()) throw ConfigError("empty layer or dim set");
    for (auto d : mrl_dims)
      if (d < 1 || d > d_model) throw ConfigError("MRL dim outside [1, d_model]");
  }
};

/// Weight of the (layer, dim) term: 1/sqrt(d_model/d'), the same for every layer.
inline double loss_weight(std::size_t /*layer*/, std::size_t dim, std::size_t d_model,
                          CoefficientRule rule = CoefficientRule::kSqrtDimRatio) {
  if (dim < 1 || dim > d_model) throw ParameterError("dim outside [1, d_model]");
  if (rule == CoefficientRule::kUniform) return 1.0;
  return 1.0 / std::sqrt(static_cast<double>(d_model) / static_cast<double>(dim));
}

/// −log softmax of the positive among {positive} ∪ negatives, with cosine
/// similarities divided by the temperature.
template <typename T>
T contrastive_loss(std::span<const T> query, std::span<const T> positive,
                   const std::vector<std::span<const T>>& negatives, T temperature) {
  if (!(temperature > T(0))) throw ParameterError("temperature must be positive");
  std::vector<T> logits{cosine(query, positive) / temperature};
  for (const auto& n : negatives) logits.push_back(cosine(query, n) / temperature);
  const T mx = *std::max_element(logits.begin(), logits.end());
  T total = T(0);
  for (T l : logits) total += std::exp(l - mx);
  return mx + std::log(total) - logits.front();
}

/// Vectors of one contrastive batch. Row i of `queries` competes over
/// documents.row(candidates[i][0]) (its positive) and
/// documents.row(candidates[i][j]) for j ≥ 1 (its negatives).
template <typename T>
struct ContrastiveBatch {
  Tensor<T> queries;
  Tensor<T> documents;
  std::vector<std::vector<std::size_t>> candidates;
};

/// Text layout of a batch: documents are the B positives followed by every
/// sample's hard negatives in order.
struct AssembledBatch {
  Format format = Format::kRetrieval;
  std::vector<std::string> queries;
  std::vector<std::string> documents;
  std::vector<std::vector<std::size_t>> candidates;

  std::size_t negatives_per_query() const {
    return candidates.empty() ? 0 : candidates.front().size() - 1;
  }
};

/// Builds candidate lists: each query's hard negatives, plus (retrieval only,
/// when enabled) the other queries' positives. Clustering and classification
/// use hard negatives only. `max_hard_negatives` truncates longer lists.
inline AssembledBatch assemble_negatives(const std::vector<Sample>& batch, bool use_in_batch,
                                         std::size_t max_hard_negatives = SIZE_MAX) {
  if (batch.empty()) throw UsageError("empty batch");
  AssembledBatch out;
  out.format = batch.front().format;
  for (const auto& s : batch)
    if (s.format != out.format) throw UsageError("batch mixes sample formats");
  if (use_in_batch && out.format != Format::kRetrieval)
    throw UsageError(std::string("in-batch negatives are not allowed for ") +
                     format_name(out.format) + " batches; only hard negatives are used");
  const std::size_t n = std::min(batch.front().hard_negatives.size(), max_hard_negatives);
  for (const auto& s : batch)
    if (std::min(s.hard_negatives.size(), max_hard_negatives) != n)
      throw UsageError("hard-negative count differs within a batch");

  const std::size_t b = batch.size();
  for (const auto& s : batch) {
    out.queries.push_back(s.query);
    out.documents.push_back(s.positive);
  }
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<std::size_t> cand{i};
    for (std::size_t j = 0; j < n; ++j) {
      cand.push_back(out.documents.size());
      out.documents.push_back(batch[i].hard_negatives[j]);
    }
    if (use_in_batch)
      for (std::size_t j = 0; j < b; ++j)
        if (j != i) cand.push_back(j);
    out.candidates.push_back(std::move(cand));
  }
  return out;
}

/// Mean over the batch of the contrastive loss, on the tape.
template <typename T>
Var<T> batch_contrastive_loss(GradTape<T>& tape, const Var<T>& queries, const Var<T>& documents,
                              const std::vector<std::vector<std::size_t>>& candidates,
                              T temperature) {
  if (!(temperature > T(0))) throw ParameterError("temperature must be positive");
  if (candidates.size() != queries.rows()) throw DimensionError("one candidate list per query");
  Var<T> qn = l2_normalize_rows(tape, queries);
  Var<T> dn = l2_normalize_rows(tape, documents);
  Var<T> sims = matmul_transposed(tape, qn, dn);
  Var<T> logits = scale(tape, take_per_row(tape, sims, candidates), T(1) / temperature);
  Var<T> per_query = sub(tape, logsumexp_rows(tape, logits), slice_cols(tape, logits, 0, 1));
  return mean(tape, per_query);
}

template <typename T>
T batch_contrastive_loss(const ContrastiveBatch<T>& batch, T temperature) {
  GradTape<T> tape(false);
  return batch_contrastive_loss(tape, tape.constant(batch.queries), tape.constant(batch.documents),
                                batch.candidates, temperature)
      .value()
      .item();
}

/// Σ_l Σ_d' c_{l,d'} · mean-over-batch contrastive loss on the first d'
/// coordinates of the layer-l taps.
template <typename T>
Var<T> total_3dml_loss(GradTape<T>& tape, const TapVars<T>& query_taps,
                       const TapVars<T>& doc_taps,
                       const std::vector<std::vector<std::size_t>>& candidates,
                       const LossConfig& cfg) {
  cfg.validate();
  const T tau = static_cast<T>(cfg.temperature);
  Var<T> total;
  for (std::size_t layer : cfg.mll_layers) {
    auto q = query_taps.find(layer);
    auto d = doc_taps.find(layer);
    if (q == query_taps.end() || d == doc_taps.end())
      throw UsageError("missing tap for layer " + std::to_string(layer));
    for (std::size_t dim : cfg.mrl_dims) {
      Var<T> qd = dim < q->second.cols() ? slice_cols(tape, q->second, 0, dim) : q->second;
      Var<T> dd = dim < d->second.cols() ? slice_cols(tape, d->second, 0, dim) : d->second;
      const T c = static_cast<T>(loss_weight(layer, dim, cfg.d_model, cfg.coefficients));
      Var<T> term = batch_contrastive_loss(tape, qd, dd, candidates, tau);
      if (c != T(1)) term = scale(tape, term, c);
      total = total ? add(tape, total, term) : term;
    }
  }
  return total;
}

/// Uniform draws over the MEL rank set; one draw per optimization step.
class RankSampler {
 public:
  RankSampler(std::vector<std::size_t> rank_set, std::uint64_t seed)
      : ranks_(std::move(rank_set)), rng_(seed) {
    if (ranks_.empty()) throw ConfigError("MEL rank set is empty");
  }

  std::size_t next() {
    return ranks_[std::uniform_int_distribution<std::size_t>(0, ranks_.size() - 1)(rng_)];
  }

  const std::vector<std::size_t>& ranks() const { return ranks_; }

  std::string state() const {
    std::ostringstream os;
    os << rng_;
    return os.str();
  }
  void restore(const std::string& state) {
    std::istringstream is(state);
    is >> rng_;
    if (!is) throw FormatError("corrupt rank-sampler state");
  }

 private:
  std::vector<std::size_t> ranks_;
  std::mt19937_64 rng_;
};

}  // namespace m3d
