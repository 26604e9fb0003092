#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "m3d/model.hpp"

namespace m3d::testing {

/// v=64, d=16, L=2, 2 heads, taps {1,2}, dims {4,16}, ranks {4,8}.
inline ModelConfig toy_config() {
  ModelConfig c;
  c.vocab_size = 64;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = 16;
  c.mel_rank = 8;
  c.mel_rank_set = {4, 8};
  c.mll_layers = {1, 2};
  c.mrl_dims = {4, 16};
  return c;
}

/// Four layers with taps at every depth; used where pruning needs room.
inline ModelConfig small_config() {
  ModelConfig c = toy_config();
  c.vocab_size = 128;
  c.n_layers = 4;
  c.mll_layers = {1, 2, 3, 4};
  c.mrl_dims = {4, 8, 16};
  return c;
}

inline std::vector<std::string> random_texts(std::size_t n, std::uint64_t seed,
                                             std::size_t max_words = 10) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> len(0, static_cast<int>(max_words));
  std::uniform_int_distribution<int> word(0, 200);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string t;
    for (int k = len(rng); k > 0; --k) t += "w" + std::to_string(word(rng)) + " ";
    out.push_back(t);
  }
  return out;
}

/// Fresh per-test scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("m3d-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace m3d::testing
