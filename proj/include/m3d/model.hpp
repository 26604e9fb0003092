#pragma once

// Compact causal transformer embedder with a factorized (E_A·E_B) token
// embedding, per-layer taps normalized by the final RMS norm, and EOS pooling.
//
// Block layout (pre-norm, no biases):
//   a = rms(h; attn_norm); h += Wo·attn(rope(a·Wq), rope(a·Wk), a·Wv)
//   f = rms(h; ffn_norm);  h += silu(f·W1)·W2
// The tap for layer l is rms(h_l; final_norm) read at each sequence's last
// (EOS) position.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "m3d/autograd.hpp"
#include "m3d/error.hpp"
#include "m3d/svd.hpp"
#include "m3d/tensor.hpp"
#include "m3d/tokenizer.hpp"

namespace m3d {

struct ModelConfig {
  std::size_t vocab_size = 4096;
  std::size_t d_model = 64;
  std::size_t n_layers = 8;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_seq_len = 64;
  // false selects a dense v×d_model embedding table (the non-MEL baseline).
  bool factorized = true;
  std::size_t mel_rank = 32;
  std::vector<std::size_t> mel_rank_set{4, 8, 16, 32};
  std::vector<std::size_t> mll_layers{1, 2, 4, 8};
  std::vector<std::size_t> mrl_dims{8, 16, 32, 64};
  double norm_eps = 1e-6;
  double rope_base = 10000.0;
  double init_scale = 0.02;

  VocabSpec vocab() const { return VocabSpec{vocab_size}; }

  /// Rank used when none is requested: r for factorized, d_model for dense.
  std::size_t full_rank() const { return factorized ? mel_rank : d_model; }

  bool has_tap(std::size_t layer) const {
    return std::find(mll_layers.begin(), mll_layers.end(), layer) != mll_layers.end();
  }

  void validate() const {
    auto ascending_unique = [](const std::vector<std::size_t>& v) {
      return !v.empty() && std::adjacent_find(v.begin(), v.end(), [](auto a, auto b) {
                             return a >= b;
                           }) == v.end();
    };
    VocabSpec{vocab_size}.validate();
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw ConfigError("d_model must be a positive multiple of n_heads");
    if (n_layers == 0 || d_ff == 0) throw ConfigError("n_layers and d_ff must be positive");
    if (max_seq_len < 2) throw ConfigError("max_seq_len must be at least 2");
    if (factorized) {
      if (mel_rank < 1 || mel_rank > std::min(vocab_size, d_model))
        throw ConfigError("mel_rank must lie in [1, min(vocab_size, d_model)]");
      if (!ascending_unique(mel_rank_set) || mel_rank_set.front() < 1 ||
          mel_rank_set.back() != mel_rank)
        throw ConfigError("mel_rank_set must be ascending with maximum mel_rank");
    }
    if (!ascending_unique(mll_layers) || mll_layers.front() < 1 || mll_layers.back() != n_layers)
      throw ConfigError("mll_layers must be ascending within [1, n_layers] and end at n_layers");
    if (!ascending_unique(mrl_dims) || mrl_dims.front() < 1 || mrl_dims.back() != d_model)
      throw ConfigError("mrl_dims must be ascending within [1, d_model] and end at d_model");
    if (!(norm_eps > 0)) throw ConfigError("norm_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size},   {"d_model", c.d_model},
                     {"num_hidden_layers", c.n_layers}, {"n_heads", c.n_heads},
                     {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len},
                     {"factorized", c.factorized},   {"mel_rank", c.mel_rank},
                     {"mel_rank_set", c.mel_rank_set}, {"mll_layers", c.mll_layers},
                     {"mrl_dims", c.mrl_dims},       {"norm_eps", c.norm_eps},
                     {"rope_base", c.rope_base},     {"init_scale", c.init_scale}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.n_layers = j.value("num_hidden_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.factorized = j.value("factorized", d.factorized);
  c.mel_rank = j.value("mel_rank", d.mel_rank);
  c.mel_rank_set = j.value("mel_rank_set", d.mel_rank_set);
  c.mll_layers = j.value("mll_layers", d.mll_layers);
  c.mrl_dims = j.value("mrl_dims", d.mrl_dims);
  c.norm_eps = j.value("norm_eps", d.norm_eps);
  c.rope_base = j.value("rope_base", d.rope_base);
  c.init_scale = j.value("init_scale", d.init_scale);
}

template <typename T>
struct FactorizedEmbedding {
  Tensor<T> E_A;  // v×r, columns ordered by importance
  Tensor<T> E_B;  // r×d_model

  std::size_t rank() const { return E_A.cols(); }
};

/// E_A[:, :r'] · E_B[:r', :]
template <typename T>
Tensor<T> effective_embedding(const FactorizedEmbedding<T>& emb, std::size_t rank) {
  if (rank < 1 || rank > emb.rank())
    throw ParameterError("rank " + std::to_string(rank) + " outside [1, " +
                         std::to_string(emb.rank()) + "]");
  return matmul(slice(emb.E_A, 0, emb.E_A.rows(), 0, rank),
                slice(emb.E_B, 0, rank, 0, emb.E_B.cols()));
}

/// Rank-r factorization of a dense matrix: E_A = U_r·S_r, E_B = V_rᵀ.
template <typename T>
FactorizedEmbedding<T> factorize(const Tensor<T>& dense, std::size_t rank) {
  SvdResult<T> svd = truncated_svd(dense, rank);
  FactorizedEmbedding<T> f{std::move(svd.U), std::move(svd.Vt)};
  for (std::size_t i = 0; i < f.E_A.rows(); ++i)
    for (std::size_t j = 0; j < rank; ++j) f.E_A.at(i, j) *= svd.S[j];
  return f;
}

template <typename T>
struct LayerWeights {
  Tensor<T> attn_norm;  // d
  Tensor<T> wq, wk, wv, wo;  // d×d
  Tensor<T> ffn_norm;  // d
  Tensor<T> w1;  // d×d_ff
  Tensor<T> w2;  // d_ff×d
};

template <typename T>
struct ModelWeights {
  ModelConfig config;
  std::optional<FactorizedEmbedding<T>> factors;  // set iff config.factorized
  Tensor<T> dense_embedding;                      // v×d when !config.factorized
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm;

  /// Every tensor in canonical (checkpoint) order.
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    if (self.factors) {
      fn("embed.E_A", self.factors->E_A);
      fn("embed.E_B", self.factors->E_B);
    } else {
      fn("embed.E", self.dense_embedding);
    }
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      auto& L = self.layers[i];
      fn(p + "attn_norm", L.attn_norm);
      fn(p + "wq", L.wq);
      fn(p + "wk", L.wk);
      fn(p + "wv", L.wv);
      fn(p + "wo", L.wo);
      fn(p + "ffn_norm", L.ffn_norm);
      fn(p + "w1", L.w1);
      fn(p + "w2", L.w2);
    }
    fn("final_norm", self.final_norm);
  }
  template <typename Fn>
  void for_each(Fn&& fn) { visit(*this, fn); }
  template <typename Fn>
  void for_each(Fn&& fn) const { visit(*this, fn); }

  std::vector<std::pair<std::string, Tensor<T>*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for_each([&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, &t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](const std::string&, const Tensor<T>& t) { ok = ok && t.all_finite(); });
    return ok;
  }

  template <typename U>
  ModelWeights<U> cast() const {
    ModelWeights<U> out;
    out.config = config;
    if (factors) out.factors = FactorizedEmbedding<U>{factors->E_A.template cast<U>(),
                                                      factors->E_B.template cast<U>()};
    else out.dense_embedding = dense_embedding.template cast<U>();
    for (const auto& L : layers)
      out.layers.push_back({L.attn_norm.template cast<U>(), L.wq.template cast<U>(),
                            L.wk.template cast<U>(), L.wv.template cast<U>(),
                            L.wo.template cast<U>(), L.ffn_norm.template cast<U>(),
                            L.w1.template cast<U>(), L.w2.template cast<U>()});
    out.final_norm = final_norm.template cast<U>();
    return out;
  }

  friend bool operator==(const ModelWeights& a, const ModelWeights& b) {
    if (!(a.config == b.config) || a.layers.size() != b.layers.size()) return false;
    bool same = true;
    std::vector<const Tensor<T>*> bt;
    b.for_each([&](const std::string&, const Tensor<T>& t) { bt.push_back(&t); });
    std::size_t i = 0;
    a.for_each([&](const std::string&, const Tensor<T>& t) {
      same = same && i < bt.size() && t == *bt[i];
      ++i;
    });
    return same && i == bt.size();
  }
};

/// The dense v×d_model table the model looks tokens up in at rank r'.
template <typename T>
Tensor<T> embedding_table(const ModelWeights<T>& w, std::optional<std::size_t> rank = {}) {
  if (w.factors) return effective_embedding(*w.factors, rank.value_or(w.factors->rank()));
  return w.dense_embedding;
}

/// Seeded initialization. Layer weights are N(0, init_scale²); norm gains
/// are ones. The embedding starts from `base_embedding` if given, otherwise
/// from a seeded N(0, init_scale²) table, and a factorized model takes its
/// rank-r truncated SVD so E_A columns are ordered by singular value.
template <typename T>
ModelWeights<T> init_model(const ModelConfig& config, std::uint64_t seed,
                           const std::optional<Tensor<T>>& base_embedding = std::nullopt) {
  config.validate();
  const std::size_t v = config.vocab_size, d = config.d_model;
  if (base_embedding && base_embedding->shape() != Shape{v, d})
    throw ParameterError("base embedding must be " + shape_str({v, d}) + ", got " +
                         shape_str(base_embedding->shape()));
  std::mt19937_64 rng(seed);
  const T s = static_cast<T>(config.init_scale);
  Tensor<T> base = base_embedding ? *base_embedding : random_normal<T>({v, d}, s, rng);

  ModelWeights<T> w;
  w.config = config;
  if (config.factorized)
    w.factors = factorize(base, config.mel_rank);
  else
    w.dense_embedding = std::move(base);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    LayerWeights<T> L;
    L.attn_norm = Tensor<T>({d}, T(1));
    L.wq = random_normal<T>({d, d}, s, rng);
    L.wk = random_normal<T>({d, d}, s, rng);
    L.wv = random_normal<T>({d, d}, s, rng);
    L.wo = random_normal<T>({d, d}, s, rng);
    L.ffn_norm = Tensor<T>({d}, T(1));
    L.w1 = random_normal<T>({d, config.d_ff}, s, rng);
    L.w2 = random_normal<T>({config.d_ff, d}, s, rng);
    w.layers.push_back(std::move(L));
  }
  w.final_norm = Tensor<T>({d}, T(1));
  return w;
}

/// Weights bound to a tape as leaves.
template <typename T>
struct ModelVars {
  std::optional<Var<T>> E_A, E_B, E;
  struct Layer {
    Var<T> attn_norm, wq, wk, wv, wo, ffn_norm, w1, w2;
  };
  std::vector<Layer> layers;
  Var<T> final_norm;

  /// Leaves in ModelWeights::for_each order.
  std::vector<Var<T>> leaves() const {
    std::vector<Var<T>> out;
    if (E_A) {
      out.push_back(*E_A);
      out.push_back(*E_B);
    } else {
      out.push_back(*E);
    }
    for (const auto& L : layers)
      for (const Var<T>* v : {&L.attn_norm, &L.wq, &L.wk, &L.wv, &L.wo, &L.ffn_norm, &L.w1, &L.w2})
        out.push_back(*v);
    out.push_back(final_norm);
    return out;
  }
};

template <typename T>
ModelVars<T> bind(GradTape<T>& tape, const ModelWeights<T>& w, bool requires_grad) {
  auto leaf = [&](const Tensor<T>& t) {
    Tensor<T> copy = t;
    copy.set_requires_grad(requires_grad);
    return tape.leaf(std::move(copy));
  };
  ModelVars<T> mv;
  if (w.factors) {
    mv.E_A = leaf(w.factors->E_A);
    mv.E_B = leaf(w.factors->E_B);
  } else {
    mv.E = leaf(w.dense_embedding);
  }
  for (const auto& L : w.layers)
    mv.layers.push_back({leaf(L.attn_norm), leaf(L.wq), leaf(L.wk), leaf(L.wv), leaf(L.wo),
                         leaf(L.ffn_norm), leaf(L.w1), leaf(L.w2)});
  mv.final_norm = leaf(w.final_norm);
  return mv;
}

/// Map from layer index to the [batch×d_model] final-normalized EOS state.
template <typename T>
using TapVars = std::map<std::size_t, Var<T>>;

template <typename T>
using TapOutput = std::map<std::size_t, Tensor<T>>;

namespace detail {

template <typename T>
void check_tokens(const ModelConfig& config, const std::vector<TokenSequence>& tokens) {
  if (tokens.empty()) throw DataError("empty token batch");
  for (std::size_t s = 0; s < tokens.size(); ++s) {
    if (tokens[s].empty()) throw DataError("sequence " + std::to_string(s) + " is empty");
    if (tokens[s].size() > config.max_seq_len)
      throw DataError("sequence " + std::to_string(s) + " has length " +
                      std::to_string(tokens[s].size()) + " > max_seq_len " +
                      std::to_string(config.max_seq_len));
    for (TokenId id : tokens[s])
      if (id >= config.vocab_size)
        throw DataError("token id " + std::to_string(id) + " out of vocabulary range " +
                        std::to_string(config.vocab_size));
  }
}

}  // namespace detail

/// Runs the transformer over a packed batch and returns the taps at `layers`
/// (each must be in [1, n_layers]). Only as many blocks as the deepest
/// requested tap are evaluated. `dense_table`, when given, replaces the
/// factorized lookup with a plain row gather from that table.
template <typename T>
TapVars<T> forward_taps(GradTape<T>& tape, const ModelConfig& config, const ModelVars<T>& mv,
                        const std::vector<TokenSequence>& tokens, std::size_t rank,
                        const std::vector<std::size_t>& layers,
                        const std::optional<Var<T>>& dense_table = std::nullopt) {
  detail::check_tokens<T>(config, tokens);
  if (layers.empty()) throw UsageError("no tap layers requested");
  const std::size_t deepest = *std::max_element(layers.begin(), layers.end());
  if (deepest > mv.layers.size() || *std::min_element(layers.begin(), layers.end()) < 1)
    throw UsageError("tap layer outside [1, " + std::to_string(mv.layers.size()) + "]");

  std::vector<std::size_t> ids, positions, lengths, eos_rows;
  for (const auto& seq : tokens) {
    for (std::size_t p = 0; p < seq.size(); ++p) {
      ids.push_back(seq[p]);
      positions.push_back(p);
    }
    lengths.push_back(seq.size());
    eos_rows.push_back(ids.size() - 1);
  }

  Var<T> h;
  if (dense_table) {
    h = gather_rows(tape, *dense_table, ids);
  } else if (mv.E_A) {
    const std::size_t r = mv.E_A->cols();
    if (rank < 1 || rank > r)
      throw ParameterError("rank " + std::to_string(rank) + " outside [1, " + std::to_string(r) +
                           "]");
    Var<T> rows = gather_rows(tape, *mv.E_A, ids);
    if (rank < r) rows = slice_cols(tape, rows, 0, rank);
    Var<T> eb = rank < r ? slice_rows(tape, *mv.E_B, 0, rank) : *mv.E_B;
    h = matmul(tape, rows, eb);
  } else {
    h = gather_rows(tape, *mv.E, ids);
  }

  const T eps = static_cast<T>(config.norm_eps);
  const T rope_base = static_cast<T>(config.rope_base);
  TapVars<T> taps;
  for (std::size_t i = 0; i < deepest; ++i) {
    const auto& L = mv.layers[i];
    Var<T> a = rms_norm(tape, h, L.attn_norm, eps);
    Var<T> q = rope(tape, matmul(tape, a, L.wq), positions, config.n_heads, rope_base);
    Var<T> k = rope(tape, matmul(tape, a, L.wk), positions, config.n_heads, rope_base);
    Var<T> v = matmul(tape, a, L.wv);
    Var<T> att = causal_attention(tape, q, k, v, lengths, config.n_heads);
    h = add(tape, h, matmul(tape, att, L.wo));
    Var<T> f = rms_norm(tape, h, L.ffn_norm, eps);
    h = add(tape, h, matmul(tape, silu(tape, matmul(tape, f, L.w1)), L.w2));
    const std::size_t depth = i + 1;
    if (std::find(layers.begin(), layers.end(), depth) != layers.end())
      taps[depth] = rms_norm(tape, gather_rows(tape, h, eos_rows), mv.final_norm, eps);
  }
  return taps;
}

/// Inference-only taps for every layer in config.mll_layers (or `layers`).
template <typename T>
TapOutput<T> forward_taps(const ModelWeights<T>& w, const std::vector<TokenSequence>& tokens,
                          std::optional<std::size_t> rank = std::nullopt,
                          std::optional<std::vector<std::size_t>> layers = std::nullopt) {
  GradTape<T> tape(false);
  ModelVars<T> mv = bind(tape, w, false);
  auto taps = forward_taps(tape, w.config, mv, tokens, rank.value_or(w.config.full_rank()),
                           layers.value_or(w.config.mll_layers));
  TapOutput<T> out;
  for (auto& [l, v] : taps) out[l] = v.value();
  return out;
}

/// Same as forward_taps but looks tokens up in an explicit dense table
/// (compatibility-mode path).
template <typename T>
TapOutput<T> forward_taps_dense(const ModelWeights<T>& w, const Tensor<T>& table,
                                const std::vector<TokenSequence>& tokens,
                                std::optional<std::vector<std::size_t>> layers = std::nullopt) {
  if (table.shape() != Shape{w.config.vocab_size, w.config.d_model})
    throw DimensionError("dense table must be v×d_model");
  GradTape<T> tape(false);
  ModelVars<T> mv = bind(tape, w, false);
  std::optional<Var<T>> t = tape.constant(table);
  auto taps = forward_taps(tape, w.config, mv, tokens, w.config.full_rank(),
                           layers.value_or(w.config.mll_layers), t);
  TapOutput<T> out;
  for (auto& [l, v] : taps) out[l] = v.value();
  return out;
}

struct EmbedOptions {
  std::size_t depth = 0;                 // 0 → n_layers
  std::size_t dim = 0;                   // 0 → d_model
  std::optional<std::size_t> rank;       // unset → full rank
  std::size_t batch_size = 64;
};

/// Unit-norm [texts×dim] embeddings: tokenize, tap at `depth`, keep the
/// first `dim` coordinates, L2-normalize.
template <typename T>
Tensor<T> embed(const ModelWeights<T>& w, const std::vector<std::string>& texts,
                EmbedOptions opt = {}) {
  const auto& c = w.config;
  const std::size_t depth = opt.depth ? opt.depth : c.n_layers;
  const std::size_t dim = opt.dim ? opt.dim : c.d_model;
  if (!c.has_tap(depth))
    throw UsageError("depth " + std::to_string(depth) + " is not a tap layer of this model");
  if (dim > c.d_model) throw ParameterError("dim exceeds d_model");
  if (texts.empty()) return Tensor<T>({0, dim});
  Tensor<T> out({texts.size(), dim});
  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  for (std::size_t start = 0; start < texts.size(); start += bs) {
    const std::size_t end = std::min(texts.size(), start + bs);
    std::vector<TokenSequence> tokens;
    for (std::size_t i = start; i < end; ++i)
      tokens.push_back(encode(texts[i], c.vocab(), c.max_seq_len));
    TapOutput<T> taps = forward_taps(w, tokens, opt.rank, std::vector<std::size_t>{depth});
    Tensor<T> block = l2_normalize_rows(slice(taps.at(depth), 0, end - start, 0, dim));
    std::copy(block.data().begin(), block.data().end(), out.row(start).data());
  }
  return out;
}

}  // namespace m3d
