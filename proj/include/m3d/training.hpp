#pragma once

// AdamW, the per-step 3D-ML training loop, checkpoints and last-k merging.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "m3d/autograd.hpp"
#include "m3d/data.hpp"
#include "m3d/deploy.hpp"
#include "m3d/error.hpp"
#include "m3d/model.hpp"
#include "m3d/objective.hpp"
#include "m3d/tensor.hpp"

namespace m3d {

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 16;
  std::size_t max_steps = 200;
  std::size_t checkpoint_interval = 500;
  std::size_t merge_window = 5;
  std::uint64_t seed = 0;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
  int stage = 1;

  void validate() const {
    if (!(learning_rate > 0) || !(eps > 0) || !(beta1 > 0 && beta1 < 1) ||
        !(beta2 > 0 && beta2 < 1) || weight_decay < 0)
      throw ConfigError("optimizer hyperparameters out of range");
    if (batch_size == 0 || checkpoint_interval == 0 || merge_window == 0)
      throw ConfigError("batch size, checkpoint interval and merge window must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"batch_size", c.batch_size},
                     {"max_steps", c.max_steps},
                     {"checkpoint_interval", c.checkpoint_interval},
                     {"merge_window", c.merge_window},
                     {"seed", c.seed},
                     {"grad_clip", c.grad_clip},
                     {"stage", c.stage}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.checkpoint_interval = j.value("checkpoint_interval", d.checkpoint_interval);
  c.merge_window = j.value("merge_window", d.merge_window);
  c.seed = j.value("seed", d.seed);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.stage = j.value("stage", d.stage);
}

template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  std::uint64_t step = 0;

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

template <typename T>
OptimizerState<T> make_optimizer_state(const std::vector<Tensor<T>*>& params) {
  OptimizerState<T> s;
  for (const auto* p : params) {
    s.first_moment.emplace_back(p->shape());
    s.second_moment.emplace_back(p->shape());
  }
  return s;
}

/// One AdamW update with bias correction and decoupled weight decay:
///   p ← p − lr·(m̂ / (√v̂ + eps) + λ·p)
template <typename T>
void adamw_step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads,
                OptimizerState<T>& state, const TrainConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size())
    throw DimensionError("adamw_step: parameter, gradient and state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i]->shape() ||
        state.first_moment[i].shape() != params[i]->shape())
      throw DimensionError("adamw_step: shape mismatch for parameter " + std::to_string(i));
    if (!grads[i].all_finite())
      throw NumericalError("non-finite gradient for parameter " + std::to_string(i));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta1, t)));
  const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
  const T lr = static_cast<T>(cfg.learning_rate), wd = static_cast<T>(cfg.weight_decay);
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto m = state.first_moment[i].data();
    auto v = state.second_moment[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      const T update = (m[k] * c1) / (std::sqrt(v[k] * c2) + eps);
      p[k] -= lr * (update + wd * p[k]);
    }
  }
}

/// Scales gradients so their global L2 norm is at most max_norm. Returns the
/// norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<Tensor<T>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads)
    for (T v : g.data()) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& g : grads)
      for (auto& v : g.storage()) v *= f;
  }
  return norm;
}

struct StepRecord {
  std::size_t step = 0;
  int stage = 1;
  std::size_t rank = 0;
  double loss = 0;
};

template <typename T>
struct TrainResult {
  ModelWeights<T> weights;
  OptimizerState<T> optimizer;
  std::vector<StepRecord> history;
  std::vector<std::filesystem::path> checkpoints;
  std::string sampler_state;
};

/// Everything needed to continue a run.
template <typename T>
struct TrainingState {
  ModelWeights<T> weights;
  OptimizerState<T> optimizer;
  std::string sampler_state;
};

/// LossConfig whose layer/dim sets mirror the model config.
inline LossConfig loss_config_for(const ModelConfig& c, LossConfig base = {}) {
  base.mll_layers = c.mll_layers;
  base.mrl_dims = c.mrl_dims;
  base.d_model = c.d_model;
  return base;
}

/// Loss of one batch on the tape; the model is bound as trainable leaves.
template <typename T>
struct BatchLoss {
  Var<T> loss;
  ModelVars<T> vars;
};

template <typename T>
BatchLoss<T> compute_batch_loss(GradTape<T>& tape, const ModelWeights<T>& w,
                                const AssembledBatch& batch, std::size_t rank,
                                const LossConfig& loss_cfg, bool trainable = true) {
  const auto& c = w.config;
  std::vector<TokenSequence> tokens;
  for (const auto& q : batch.queries) tokens.push_back(encode(q, c.vocab(), c.max_seq_len));
  for (const auto& d : batch.documents) tokens.push_back(encode(d, c.vocab(), c.max_seq_len));
  BatchLoss<T> out;
  out.vars = bind(tape, w, trainable);
  TapVars<T> taps = forward_taps(tape, c, out.vars, tokens, rank, loss_cfg.mll_layers);
  const std::size_t nq = batch.queries.size(), nd = batch.documents.size();
  TapVars<T> q_taps, d_taps;
  for (auto& [l, v] : taps) {
    q_taps[l] = slice_rows(tape, v, 0, nq);
    d_taps[l] = slice_rows(tape, v, nq, nq + nd);
  }
  out.loss = total_3dml_loss(tape, q_taps, d_taps, batch.candidates, loss_cfg);
  return out;
}

inline AssembledBatch assemble_for_training(const std::vector<Sample>& batch,
                                            const LossConfig& loss_cfg) {
  const Format f = batch.front().format;
  const std::size_t n = f == Format::kClassification ? 1 : loss_cfg.n_hard_negatives;
  return assemble_negatives(batch, loss_cfg.in_batch_negatives && f == Format::kRetrieval, n);
}

struct TrainHooks {
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  std::function<void(const StepRecord&)> on_step;
  std::ostream* loss_log = nullptr;  // "step stage rank loss" lines
};

template <typename T>
void save_training_state(const std::filesystem::path& dir, const TrainingState<T>& st,
                         const nlohmann::json& metadata = nlohmann::json::object());

/// Runs cfg.max_steps optimization steps, cycling through `batches` in order.
/// Per step: draw one MEL rank, forward all queries and documents, sum the
/// layer×dim contrastive losses, backprop, clip, AdamW.
template <typename T>
TrainResult<T> train(ModelWeights<T> weights, const std::vector<std::vector<Sample>>& batches,
                     const TrainConfig& cfg, const LossConfig& loss_cfg_in,
                     std::optional<TrainingState<std::type_identity_t<T>>> resume = std::nullopt,
                     const TrainHooks& hooks = {}) {
  cfg.validate();
  const LossConfig loss_cfg = loss_cfg_in;
  loss_cfg.validate();
  for (auto l : loss_cfg.mll_layers)
    if (!weights.config.has_tap(l)) throw ConfigError("loss layer is not a model tap layer");
  if (cfg.max_steps > 0 && batches.empty()) throw DataError("no training batches");
  for (const auto& b : batches)
    if (cfg.stage == 1)
      for (const auto& s : b)
        if (s.format != Format::kRetrieval)
          throw ConfigError("stage 1 trains on retrieval data only");

  TrainResult<T> result;
  std::vector<std::size_t> rank_set = weights.config.factorized
                                          ? weights.config.mel_rank_set
                                          : std::vector<std::size_t>{weights.config.d_model};
  RankSampler sampler(rank_set, cfg.seed);
  OptimizerState<T> opt;
  if (resume) {
    weights = std::move(resume->weights);
    opt = std::move(resume->optimizer);
    if (!resume->sampler_state.empty()) sampler.restore(resume->sampler_state);
  }
  std::vector<Tensor<T>*> params;
  for (auto& [name, t] : weights.named_tensors()) params.push_back(t);
  if (!resume) opt = make_optimizer_state(params);
  if (opt.first_moment.size() != params.size())
    throw UsageError("resumed optimizer state does not match the model");

  const std::size_t first_step = static_cast<std::size_t>(opt.step);
  for (std::size_t s = 0; s < cfg.max_steps; ++s) {
    const std::size_t step = first_step + s + 1;
    const auto& batch = batches[(first_step + s) % batches.size()];
    const std::size_t rank = sampler.next();
    StepRecord rec{step, cfg.stage, rank, 0.0};
    try {
      AssembledBatch assembled = assemble_for_training(batch, loss_cfg);
      GradTape<T> tape;
      BatchLoss<T> bl = compute_batch_loss(tape, weights, assembled, rank, loss_cfg);
      rec.loss = static_cast<double>(bl.loss.value().item());
      GradientMap<T> gmap = tape.backward(bl.loss);
      std::vector<Tensor<T>> grads;
      for (const auto& leaf : bl.vars.leaves()) grads.push_back(gmap.at(leaf));
      clip_grad_norm(grads, cfg.grad_clip);
      adamw_step(params, grads, opt, cfg);
    } catch (const NumericalError& e) {
      throw NumericalError("step " + std::to_string(step) + ": " + e.what());
    }
    result.history.push_back(rec);
    if (hooks.loss_log)
      *hooks.loss_log << rec.step << ' ' << rec.stage << ' ' << rec.rank << ' ' << rec.loss
                      << '\n';
    if (hooks.on_step) hooks.on_step(rec);
    if (!hooks.checkpoint_dir.empty() && step % cfg.checkpoint_interval == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "step-%06zu", step);
      const auto dir = hooks.checkpoint_dir / name;
      save_training_state(dir, TrainingState<T>{weights, opt, sampler.state()},
                          {{"step", step}, {"stage", cfg.stage}});
      result.checkpoints.push_back(dir);
    }
  }
  result.weights = std::move(weights);
  result.optimizer = std::move(opt);
  result.sampler_state = sampler.state();
  return result;
}

/// Mean loss over batches without updating weights (full rank).
template <typename T>
double evaluate_loss(const ModelWeights<T>& w, const std::vector<std::vector<Sample>>& batches,
                     const LossConfig& loss_cfg) {
  double total = 0;
  for (const auto& b : batches) {
    GradTape<T> tape(false);
    AssembledBatch a = assemble_for_training(b, loss_cfg);
    total += static_cast<double>(
        compute_batch_loss(tape, w, a, w.config.full_rank(), loss_cfg, false).loss.value().item());
  }
  return batches.empty() ? 0.0 : total / static_cast<double>(batches.size());
}

// ---------------------------------------------------------------------------
// Checkpoints

/// A checkpoint directory holds model.m3d (weights, factorized mode when the
/// model is factorized) and optimizer.m3d (moments, step, sampler state).
template <typename T>
void save_training_state(const std::filesystem::path& dir, const TrainingState<T>& st,
                         const nlohmann::json& metadata) {
  std::filesystem::create_directories(dir);
  SaveOptions so;
  so.mode = st.weights.factors ? EmbeddingMode::kFactorized : EmbeddingMode::kDense;
  so.metadata = metadata;
  save_model(dir / "model.m3d", st.weights, so);

  std::vector<std::string> names;
  st.weights.for_each([&](const std::string& n, const Tensor<T>&) { names.push_back(n); });
  std::vector<NamedTensor<T>> tensors;
  for (std::size_t i = 0; i < names.size(); ++i) {
    tensors.push_back({"m." + names[i], &st.optimizer.first_moment[i]});
    tensors.push_back({"v." + names[i], &st.optimizer.second_moment[i]});
  }
  nlohmann::json header{{"kind", "adamw-state"},
                        {"step", st.optimizer.step},
                        {"sampler_state", st.sampler_state},
                        {"metadata", metadata}};
  write_container(dir / "optimizer.m3d", header, tensors);
}

template <typename T>
TrainingState<T> load_training_state(const std::filesystem::path& dir) {
  TrainingState<T> st;
  st.weights = load_model<T>(dir / "model.m3d");
  const auto path = dir / "optimizer.m3d";
  Manifest m = read_manifest(path);
  if (m.header.value("kind", "") != "adamw-state")
    throw FormatError(path.string() + ": not an optimizer state container");
  auto tensors = read_tensors<T>(path, m, [](const std::string&) { return true; });
  st.weights.for_each([&](const std::string& n, const Tensor<T>&) {
    auto mi = tensors.find("m." + n), vi = tensors.find("v." + n);
    if (mi == tensors.end() || vi == tensors.end())
      throw FormatError(path.string() + ": missing moments for " + n);
    st.optimizer.first_moment.push_back(std::move(mi->second));
    st.optimizer.second_moment.push_back(std::move(vi->second));
  });
  st.optimizer.step = m.header.value("step", std::uint64_t{0});
  st.sampler_state = m.header.value("sampler_state", std::string());
  return st;
}

/// Elementwise arithmetic mean of every weight tensor. Uses a running mean,
/// so k identical inputs return that input bit for bit.
template <typename T>
ModelWeights<T> merge_weights(const std::vector<ModelWeights<T>>& models) {
  if (models.empty()) throw UsageError("nothing to merge");
  ModelWeights<T> out = models.front();
  for (std::size_t k = 1; k < models.size(); ++k) {
    if (!(models[k].config == out.config))
      throw UsageError("checkpoint " + std::to_string(k) + " has a different config");
    std::vector<const Tensor<T>*> src;
    models[k].for_each([&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
    std::size_t i = 0;
    const T count = static_cast<T>(k + 1);
    out.for_each([&](const std::string&, Tensor<T>& t) {
      const auto& s = *src[i++];
      if (s.shape() != t.shape()) throw UsageError("tensor shape differs between checkpoints");
      for (std::size_t j = 0; j < t.size(); ++j) t[j] += (s[j] - t[j]) / count;
    });
  }
  return out;
}

/// Loads model files (or checkpoint directories) and merges them.
template <typename T>
ModelWeights<T> merge_checkpoints(const std::vector<std::filesystem::path>& paths) {
  std::vector<ModelWeights<T>> models;
  for (const auto& p : paths)
    models.push_back(load_model<T>(std::filesystem::is_directory(p) ? p / "model.m3d" : p));
  return merge_weights(models);
}

}  // namespace m3d
