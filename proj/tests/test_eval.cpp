#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "common.hpp"
#include "m3d/bench.hpp"
#include "m3d/eval.hpp"

using namespace m3d;
using m3d::testing::random_texts;
using m3d::testing::scratch_dir;
using m3d::testing::small_config;
using m3d::testing::toy_config;
using Td = Tensor<double>;

// ---------------------------------------------------------------------------
// NDCG

TEST(Ndcg, PerfectAndSecondPlace) {
  EXPECT_DOUBLE_EQ(ndcg_at_k({3, 1, 2}, {{3, 1.0}}, 10).value, 1.0);
  EXPECT_NEAR(ndcg_at_k({1, 3, 2}, {{3, 1.0}}, 10).value, 1 / std::log2(3.0), 1e-15);
  EXPECT_NEAR(1 / std::log2(3.0), 0.6309, 1e-4);
}

TEST(Ndcg, NoRelevantFlagged) {
  auto r = ndcg_at_k({0, 1}, {}, 10);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE(r.no_relevant);
  EXPECT_THROW(ndcg_at_k({0}, {{0, 1.0}}, 0), ParameterError);
}

TEST(Ndcg, CutoffExcludesDeepHits) {
  std::vector<std::size_t> ranked(20);
  std::iota(ranked.begin(), ranked.end(), 0);
  EXPECT_EQ(ndcg_at_k(ranked, {{15, 1.0}}, 10).value, 0.0);
}

namespace {

// DCG of one full ordering, straight from the definition.
double dcg(const std::vector<std::size_t>& order, const std::map<std::size_t, double>& rel,
           std::size_t k) {
  double s = 0;
  for (std::size_t i = 0; i < std::min(k, order.size()); ++i) {
    auto it = rel.find(order[i]);
    if (it != rel.end()) s += it->second / std::log2(i + 2.0);
  }
  return s;
}

}  // namespace

// Ideal DCG as the maximum over every permutation; NDCG = DCG / that.
TEST(Ndcg, MatchesPermutationOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + trial % 8;
    std::map<std::size_t, double> rel;
    std::uniform_int_distribution<int> grade(0, 3);
    for (std::size_t d = 0; d < n; ++d)
      if (int g = grade(rng)) rel[d] = g;
    if (rel.empty()) rel[0] = 1;
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double ideal = 0;
    do {
      ideal = std::max(ideal, dcg(perm, rel, 10));
    } while (std::next_permutation(perm.begin(), perm.end()));
    std::vector<std::size_t> ranked(n);
    std::iota(ranked.begin(), ranked.end(), 0);
    std::shuffle(ranked.begin(), ranked.end(), rng);
    EXPECT_EQ(ndcg_at_k(ranked, rel, 10).value, dcg(ranked, rel, 10) / ideal);
  }
}

TEST(Ndcg, RankByScoreTiesAscending) {
  EXPECT_EQ(rank_by_score({0.5, 0.9, 0.5, 0.1}), (std::vector<std::size_t>{1, 0, 2, 3}));
}

// ---------------------------------------------------------------------------
// Spearman

namespace {

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Rank of x[i] = 1 + #{x < x[i]} + (#{x == x[i]} - 1)/2.
std::vector<double> oracle_ranks(const std::vector<double>& x) {
  std::vector<double> r;
  for (double v : x) {
    double less = 0, equal = 0;
    for (double w : x) {
      less += w < v;
      equal += w == v;
    }
    r.push_back(1 + less + (equal - 1) / 2);
  }
  return r;
}

}  // namespace

TEST(Spearman, IdentityAndReverse) {
  std::vector<double> x{1, 5, 2, 8};
  EXPECT_DOUBLE_EQ(spearman(x, x), 1.0);
  std::vector<double> y{-1, -5, -2, -8};
  EXPECT_DOUBLE_EQ(spearman(x, y), -1.0);
}

TEST(Spearman, MatchesOracleWithTies) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> small(0, 4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + trial % 9;
    std::vector<double> x, y;
    for (std::size_t i = 0; i < n; ++i) {
      x.push_back(small(rng));
      y.push_back(small(rng));
    }
    if (std::adjacent_find(x.begin(), x.end(), std::not_equal_to<>()) == x.end() ||
        std::adjacent_find(y.begin(), y.end(), std::not_equal_to<>()) == y.end()) {
      EXPECT_THROW(spearman(x, y), NumericalError);
      continue;
    }
    EXPECT_NEAR(spearman(x, y), pearson(oracle_ranks(x), oracle_ranks(y)), 1e-12);
  }
}

TEST(Spearman, Errors) {
  EXPECT_THROW(spearman({1}, {1}), ParameterError);
  EXPECT_THROW(spearman({1, 2}, {1, 2, 3}), ParameterError);
  EXPECT_THROW(spearman({1, 1, 1}, {1, 2, 3}), NumericalError);
}

// ---------------------------------------------------------------------------
// Classification

TEST(Classify, SelfMatchWins) {
  auto w = init_model<double>(toy_config(), 1);
  EXPECT_EQ(classify_by_label_similarity(w, "the cat sat", {"dogs run", "the cat sat", "x"}), 1u);
}

TEST(Classify, ConstructedVectorsFollowDotSign) {
  Td labels = Td::from_rows({{1, 0}, {-1, 0}});
  std::vector<double> a{0.3, 5}, b{-0.3, 5};
  EXPECT_EQ(argmax_similarity<double>(a, labels), 0u);
  EXPECT_EQ(argmax_similarity<double>(b, labels), 1u);
  Td tied = Td::from_rows({{0, 1}, {0, 1}});
  EXPECT_EQ(argmax_similarity<double>(a, tied), 0u);
}

TEST(Classify, Deterministic) {
  auto w = init_model<double>(toy_config(), 2);
  const std::vector<std::string> labels{"alpha", "beta", "gamma"};
  EXPECT_EQ(classify_by_label_similarity(w, "beta alpha", labels),
            classify_by_label_similarity(w, "beta alpha", labels));
  EXPECT_THROW(classify_by_label_similarity(w, "x", {"one"}), ParameterError);
}

// ---------------------------------------------------------------------------
// Synthetic task

TEST(Synth, PureFunctionOfSpec) {
  SynthTaskSpec spec;
  spec.n_clusters = 4;
  spec.docs_per_cluster = 5;
  spec.n_queries = 30;
  spec.seed = 11;
  auto a = generate_synth_task(spec), b = generate_synth_task(spec);
  EXPECT_EQ(a.queries, b.queries);
  EXPECT_EQ(a.corpus, b.corpus);
  EXPECT_EQ(a.corpus.size(), 20u);
  for (const auto& rel : a.relevance) {
    ASSERT_EQ(rel.size(), 1u);
    EXPECT_LT(rel.begin()->first, a.corpus.size());
  }
}

TEST(Synth, PerfectScorerReachesOne) {
  SynthTaskSpec spec;
  spec.seed = 3;
  auto task = generate_synth_task(spec);
  double total = 0;
  for (std::size_t q = 0; q < task.queries.size(); ++q) {
    std::vector<double> scores(task.corpus.size(), 0.0);
    scores[task.relevance[q].begin()->first] = 1.0;  // gold lookup
    total += ndcg_at_k(rank_by_score(scores), task.relevance[q], 10).value;
  }
  EXPECT_DOUBLE_EQ(total / task.queries.size(), 1.0);
}

TEST(Synth, NoiselessQueriesAreSubsetsOfGold) {
  SynthTaskSpec spec;
  spec.query_noise = 0;
  spec.n_queries = 20;
  auto task = generate_synth_task(spec);
  for (std::size_t q = 0; q < task.queries.size(); ++q) {
    const auto gold = split_words(task.corpus[task.relevance[q].begin()->first]);
    std::set<std::string_view> words(gold.begin(), gold.end());
    for (const auto& w : split_words(task.queries[q])) EXPECT_TRUE(words.count(w)) << w;
  }
}

TEST(Synth, TrainingNegativesShareCluster) {
  SynthTaskSpec spec;
  auto samples = generate_synth_training(spec, 10, 7);
  for (const auto& s : samples) {
    ASSERT_EQ(s.hard_negatives.size(), 7u);
    const std::string prefix = s.positive.substr(0, s.positive.find('w'));
    for (const auto& n : s.hard_negatives) {
      EXPECT_NE(n, s.positive);
      EXPECT_EQ(n.substr(0, n.find('w')), prefix);
    }
  }
  spec.docs_per_cluster = 4;
  EXPECT_THROW(generate_synth_training(spec, 1, 7), ConfigError);
}

// ---------------------------------------------------------------------------
// Sweep

namespace {

RetrievalTask small_task(std::uint64_t seed) {
  SynthTaskSpec spec;
  spec.n_clusters = 4;
  spec.docs_per_cluster = 4;
  spec.words_per_cluster = 12;
  spec.doc_len = 5;
  spec.query_len = 3;
  spec.n_queries = 12;
  spec.seed = seed;
  return generate_synth_task(spec);
}

}  // namespace

TEST(Sweep, SinglePointAndPlainPathAgree) {
  auto w = init_model<double>(small_config(), 3);
  auto task = small_task(3);
  auto rep = run_sweep(w, {task}, {{4}, {16}, {0}});
  ASSERT_EQ(rep.results.size(), 1u);
  EXPECT_EQ(rep.at(4, 16, 0, task.name), evaluate_retrieval(w, task));
  EXPECT_EQ(rep.corpus_sizes.at(task.name), task.corpus.size());
}

TEST(Sweep, CartesianKeysAndBounds) {
  auto w = init_model<double>(small_config(), 4);
  auto task = small_task(4);
  ClassificationTask cls{"cls", {"a b", "c d", "e f"}, {0, 1, 0}, {"a", "d"}};
  StsTask sts{"sts", {{"a b", "a b"}, {"a", "z q"}, {"c d", "c e"}}, {5, 0, 3}};
  SweepAxes axes{{1, 2, 4}, {4, 16}, {0, 4, 8}};
  auto rep = run_sweep(w, {task, cls, sts}, axes);
  EXPECT_EQ(rep.results.size(), 3u * 2 * 3);
  for (auto d : axes.depths)
    for (auto m : axes.dims)
      for (auto r : axes.ranks) {
        ASSERT_TRUE(rep.results.count({d, m, r}));
        const auto& v = rep.results.at({d, m, r});
        EXPECT_GE(v.at(task.name), 0.0);
        EXPECT_LE(v.at(task.name), 1.0);
        EXPECT_GE(v.at("cls"), 0.0);
        EXPECT_LE(v.at("cls"), 1.0);
        EXPECT_GE(v.at("sts"), -1.0);
        EXPECT_LE(v.at("sts"), 1.0);
      }
  EXPECT_EQ(rep.metric_names.at("sts"), "spearman");
}

TEST(Sweep, AxesValidated) {
  auto w = init_model<double>(toy_config(), 5);
  auto task = small_task(5);
  EXPECT_THROW(run_sweep(w, {task}, {{3}, {16}, {0}}), UsageError);
  EXPECT_THROW(run_sweep(w, {task}, {{2}, {32}, {0}}), UsageError);
  EXPECT_THROW(run_sweep(w, {task}, {{2}, {16}, {}}), UsageError);
}

TEST(Sweep, ColumnPrefixModeMatchesRankForward) {
  auto w = init_model<double>(toy_config(), 6);
  auto task = small_task(6);
  auto rep = run_sweep(w, {task}, {{2}, {16}, {4}}, RankMode::kColumnPrefix);
  EmbedOptions opt;
  opt.rank = 4;
  EXPECT_EQ(rep.at(2, 16, 4, task.name), evaluate_retrieval(w, task, opt));
}

TEST(Sweep, ReportSerialization) {
  auto dir = scratch_dir("eval-report");
  auto w = init_model<double>(toy_config(), 7);
  auto rep = run_sweep(w, {small_task(7)}, {{1, 2}, {4, 16}, {0}});
  const std::string table = report_table(rep);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 1 + 4);
  write_report_file(dir / "r.txt", report_json(rep));
  auto back = read_report_file(dir / "r.txt");
  EXPECT_EQ(back["entries"].size(), 4u);
  EXPECT_EQ(back["kind"], "eval-report");
}

// ---------------------------------------------------------------------------
// Bench

TEST(Bench, AnalyticCounts) {
  ModelConfig c;
  EXPECT_EQ(analytic_parameter_count(c, 8, std::nullopt) - analytic_parameter_count(c, 8, 8),
            262144u - 33280u);
  auto w = init_model<float>(small_config(), 1);
  EXPECT_EQ(analytic_parameter_count(w.config, 4, 8), w.parameter_count());
  auto dense = to_compatibility(w);
  EXPECT_EQ(analytic_parameter_count(w.config, 4, std::nullopt), dense.parameter_count());
}

TEST(Bench, MeasureFields) {
  auto w = init_model<float>(small_config(), 2);
  BenchWorkload wl;
  wl.batch_size = 2;
  wl.seq_len = 8;
  wl.iterations = 1;
  auto a = measure(w, 2, std::optional<std::size_t>(4), wl);
  auto b = measure(w, 2, std::optional<std::size_t>(4), wl);
  EXPECT_EQ(a.trial_tokens_per_second.size(), 5u);
  EXPECT_GT(a.tokens_per_second, 0.0);
  EXPECT_EQ(a.parameters, b.parameters);
  EXPECT_EQ(a.rank_mode, "rank-4");
  EXPECT_EQ(a.embedding_parameters, 128u * 4 + 4 * 16);
  wl.trials = 4;
  EXPECT_THROW(measure(w, 2, std::nullopt, wl), ConfigError);
  EXPECT_NE(bench_table({a, b}).find("throughput"), std::string::npos);
}

TEST(Bench, MedianOfTrials) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
}
