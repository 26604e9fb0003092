// m3d: command-line entry point for training, evaluation, deployment
// transforms, benchmarking and data utilities.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "m3d/m3d.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace m3d;

namespace {

// Every artifact gets "<artifact>.config.json" describing how it was made.
void write_sidecar(const fs::path& artifact, const std::string& command, const json& arguments,
                   const std::optional<RunConfig>& run = std::nullopt) {
  json j{{"command", command}, {"arguments", arguments}};
  if (run) j["run_config"] = *run;
  write_json_file(artifact.string() + ".config.json", j);
}

std::string abs_str(const fs::path& p) { return fs::absolute(p).lexically_normal().string(); }

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

DType stored_dtype(const fs::path& model) {
  const Manifest m = read_manifest(model);
  return m.tensors.empty() ? DType::kF32 : m.tensors.front().dtype;
}

// Transforms run in double and are written back in the input's precision.
void save_like(const fs::path& out, const ModelWeights<double>& w, const fs::path& like,
               std::optional<EmbeddingMode> mode = std::nullopt) {
  SaveOptions so;
  so.dtype = stored_dtype(like);
  so.mode = mode;
  save_model(out, w, so);
}

void print_vectors(std::ostream& os, const Tensor<float>& v) {
  os << std::setprecision(std::numeric_limits<float>::max_digits10);
  for (std::size_t i = 0; i < v.rows(); ++i) {
    for (std::size_t j = 0; j < v.cols(); ++j) os << (j ? "\t" : "") << v.at(i, j);
    os << '\n';
  }
}

std::vector<DataSource> load_sources(const MixtureSpec& spec) {
  if (spec.sources.empty()) throw ConfigError("data.sources is empty");
  std::vector<DataSource> out;
  for (const auto& s : spec.sources) out.push_back({s.name, load_jsonl(s.path)});
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

struct TrainArgs {
  std::string config, out, resume;
  std::optional<int> stage;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  RunConfig rc = config_or_default(a.config);
  if (a.stage) rc.train.stage = *a.stage;
  if (a.steps) rc.train.max_steps = *a.steps;
  if (a.seed) rc.train.seed = *a.seed;
  rc.model.validate();
  rc.train.validate();
  for (auto& s : rc.data.sources) s.path = abs_str(s.path);

  MixtureSpec mix = rc.data;
  mix.stage = rc.train.stage;
  MixtureIterator it(mix, load_sources(mix));
  const auto batches = make_batches(it.samples(), rc.train.batch_size);

  std::optional<TrainingState<float>> resume;
  ModelWeights<float> init;
  if (!a.resume.empty()) {
    resume = load_training_state<float>(a.resume);
    if (!(resume->weights.config == rc.model))
      throw ConfigError("resumed checkpoint's model config differs from the run config");
    init = resume->weights;
  } else {
    init = init_model<float>(rc.model, rc.train.seed);
  }

  const fs::path out(a.out);
  fs::create_directories(out);
  std::ofstream log(out / "loss.log");
  TrainHooks hooks;
  hooks.checkpoint_dir = out / "checkpoints";
  hooks.loss_log = &log;
  hooks.on_step = [](const StepRecord& r) {
    std::cerr << "\rstep " << r.step << " loss " << r.loss << std::flush;
  };
  auto result = train(init, batches, rc.train, rc.resolved_loss(), resume, hooks);
  std::cerr << '\n';
  save_model(out / "model.m3d", result.weights);

  json args{{"config", a.config.empty() ? "" : abs_str(a.config)},
            {"resume", a.resume.empty() ? "" : abs_str(a.resume)},
            {"batches", batches.size()}};
  write_json_file(out / "run.config.json",
                  json{{"command", "train"}, {"arguments", args}, {"run_config", rc}});
  write_sidecar(out / "model.m3d", "train", args, rc);
  std::cout << "steps\t" << result.history.size() << '\n'
            << "final_loss\t" << (result.history.empty() ? 0.0 : result.history.back().loss)
            << '\n'
            << "checkpoints\t" << result.checkpoints.size() << '\n';
  return 0;
}

struct EvalArgs {
  std::string model, config, out;
  std::vector<std::string> tasks;
  std::vector<std::size_t> depths, dims, ranks;
  std::string rank_mode;
};

int cmd_eval(const EvalArgs& a) {
  RunConfig rc = config_or_default(a.config);
  if (!a.tasks.empty()) rc.eval.tasks = a.tasks;
  if (!a.depths.empty()) rc.eval.depths = a.depths;
  if (!a.dims.empty()) rc.eval.dims = a.dims;
  if (!a.ranks.empty()) rc.eval.ranks = a.ranks;
  if (!a.rank_mode.empty()) rc.eval.rank_mode = json{{"rank_mode", a.rank_mode}}.get<EvalSection>().rank_mode;
  if (rc.eval.tasks.empty()) throw UsageError("no evaluation tasks given");
  for (auto& t : rc.eval.tasks) t = abs_str(t);

  auto w = load_model<float>(a.model);
  std::vector<EvalTask> tasks;
  for (const auto& t : rc.eval.tasks) tasks.push_back(read_task_file(t));
  const SweepAxes axes = resolve_axes(rc.eval, w.config);
  rc.eval.depths = axes.depths;
  rc.eval.dims = axes.dims;
  rc.eval.ranks = axes.ranks;
  EvalReport rep = run_sweep(w, tasks, axes, rc.eval.rank_mode);
  std::cout << report_table(rep);
  if (!a.out.empty()) {
    json body = report_json(rep);
    body["model"] = abs_str(a.model);
    write_report_file(a.out, body);
    write_sidecar(a.out, "eval", {{"model", abs_str(a.model)}}, rc);
  }
  return 0;
}

struct EmbedArgs {
  std::string model, input, out;
  std::size_t depth = 0, dim = 0, rank = 0;
};

int cmd_embed(const EmbedArgs& a) {
  auto w = load_model<float>(a.model);
  EmbedOptions opt;
  opt.depth = a.depth;
  opt.dim = a.dim;
  if (a.rank) opt.rank = a.rank;
  Tensor<float> v = embed(w, read_lines(a.input), opt);
  json args{{"model", abs_str(a.model)}, {"input", abs_str(a.input)},
            {"depth", a.depth},          {"dim", a.dim},
            {"rank", a.rank}};
  if (a.out.empty()) {
    print_vectors(std::cout, v);
  } else {
    std::ofstream out(a.out);
    if (!out) throw FormatError("cannot write " + a.out);
    print_vectors(out, v);
    write_sidecar(a.out, "embed", args);
  }
  return 0;
}

int cmd_prune(const std::string& in, const std::string& out, std::size_t layers) {
  save_like(out, prune_layers(load_model<double>(in), layers), in);
  write_sidecar(out, "prune-layers", {{"input", abs_str(in)}, {"layers", layers}});
  return 0;
}

int cmd_compress(const std::string& in, const std::string& out, std::optional<std::size_t> rank,
                 bool compat) {
  if (compat == rank.has_value()) throw UsageError("give exactly one of --rank or --compat");
  auto w = load_model<double>(in);
  if (compat)
    save_like(out, to_compatibility(w), in, EmbeddingMode::kDense);
  else
    save_like(out, to_efficiency(w, *rank), in, EmbeddingMode::kFactorized);
  json args{{"input", abs_str(in)}};
  if (rank) args["rank"] = *rank;
  args["compat"] = compat;
  write_sidecar(out, "compress-embedding", args);
  return 0;
}

int cmd_merge(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<fs::path> paths(inputs.begin(), inputs.end());
  const fs::path first = fs::is_directory(paths.front()) ? paths.front() / "model.m3d" : paths.front();
  save_like(out, merge_checkpoints<double>(paths), first);
  json list = json::array();
  for (const auto& p : inputs) list.push_back(abs_str(p));
  write_sidecar(out, "merge-checkpoints", {{"inputs", list}});
  return 0;
}

// Queries come as JSONL samples whose positive must appear verbatim in the
// corpus file (one document per line); output replaces their hard negatives.
int cmd_mine(const std::string& model, const std::string& corpus_path,
             const std::string& queries_path, std::size_t k, const std::string& out) {
  auto w = load_model<float>(model);
  const auto corpus = read_lines(corpus_path);
  auto samples = load_jsonl(queries_path);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < corpus.size(); ++i) index.emplace(corpus[i], i);
  std::vector<std::string> queries;
  std::vector<std::size_t> gold;
  for (const auto& s : samples) {
    auto it = index.find(s.positive);
    if (it == index.end())
      throw DataError(queries_path + " line " + std::to_string(s.line) +
                      ": positive is not in the corpus");
    queries.push_back(s.query);
    gold.push_back(it->second);
  }
  MiningResult r = mine_hard_negatives(w, corpus, queries, gold, k);
  for (std::size_t q = 0; q < samples.size(); ++q) {
    samples[q].hard_negatives.clear();
    for (auto d : r.negatives[q]) samples[q].hard_negatives.push_back(corpus[d]);
  }
  write_jsonl(out, samples);
  write_sidecar(out, "mine-negatives",
                {{"model", abs_str(model)},
                 {"corpus", abs_str(corpus_path)},
                 {"queries", abs_str(queries_path)},
                 {"k", k}});
  if (r.k_shrunk) std::cerr << "note: some queries had fewer than k candidates\n";
  return 0;
}

struct BenchArgs {
  std::string model, config, out;
  std::vector<std::size_t> depths, ranks;
  bool dense = false;
  std::optional<std::size_t> batch, seq_len, trials;
};

int cmd_bench(const BenchArgs& a) {
  RunConfig rc = config_or_default(a.config);
  if (a.batch) rc.bench.batch_size = *a.batch;
  if (a.seq_len) rc.bench.seq_len = *a.seq_len;
  if (a.trials) rc.bench.trials = *a.trials;
  auto w = load_model<float>(a.model);
  std::vector<std::size_t> depths = a.depths.empty() ? w.config.mll_layers : a.depths;
  std::vector<std::optional<std::size_t>> modes;
  if (a.dense) modes.push_back(std::nullopt);
  for (auto r : a.ranks) modes.push_back(r);
  if (modes.empty()) modes.push_back(w.config.factorized ? std::optional(w.config.mel_rank)
                                                         : std::nullopt);
  std::vector<BenchResult> rows;
  for (auto l = depths.rbegin(); l != depths.rend(); ++l)
    for (const auto& m : modes) rows.push_back(measure(w, *l, m, rc.bench));
  std::cout << bench_table(rows);
  if (!a.out.empty()) {
    json body = bench_json(rows);
    body["model"] = abs_str(a.model);
    write_report_file(a.out, body);
    write_sidecar(a.out, "bench", {{"model", abs_str(a.model)}, {"depths", depths}}, rc);
  }
  return 0;
}

struct SynthArgs {
  std::string out_dir;
  SynthTaskSpec spec;
  std::size_t samples = 4000, negatives = 7;
};

int cmd_gen_synth(const SynthArgs& a) {
  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  write_jsonl(dir / "train.jsonl", generate_synth_training(a.spec, a.samples, a.negatives));
  write_json_file(dir / "task.json", task_to_json(generate_synth_task(a.spec)));
  json args{{"spec", a.spec}, {"samples", a.samples}, {"negatives", a.negatives}};
  write_sidecar(dir / "train.jsonl", "gen-synth", args);
  write_sidecar(dir / "task.json", "gen-synth", args);
  return 0;
}

// Flattens eval or bench report files into one TSV series table:
// label, x, task, value; x is the chosen axis of the sweep.
int cmd_plot_data(const std::vector<std::string>& reports, const std::vector<std::string>& labels,
                  const std::string& axis, const std::string& out) {
  if (!labels.empty() && labels.size() != reports.size())
    throw UsageError("give one --label per report");
  std::ostringstream os;
  os << "label\t" << axis << "\ttask\tvalue\n";
  json series = json::array();
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const json r = read_report_file(reports[i]);
    const std::string label = labels.empty() ? fs::path(reports[i]).stem().string() : labels[i];
    const std::string kind = r.value("kind", "");
    if (kind == "eval-report") {
      if (axis != "depth" && axis != "dim" && axis != "rank")
        throw UsageError("eval reports plot against depth, dim or rank");
      for (const auto& e : r.at("entries")) {
        os << label << '\t' << e.at(axis) << '\t' << e.at("task").get<std::string>() << '\t'
           << e.at("value") << '\n';
        series.push_back({{"label", label},
                          {"x", e.at(axis)},
                          {"task", e.at("task")},
                          {"value", e.at("value")}});
      }
    } else if (kind == "bench-report") {
      for (const auto& e : r.at("results")) {
        os << label << '\t' << e.at("layers") << "\tthroughput\t" << e.at("tokens_per_second")
           << '\n';
        series.push_back({{"label", label},
                          {"x", e.at("layers")},
                          {"task", "throughput"},
                          {"value", e.at("tokens_per_second")}});
      }
    } else {
      throw FormatError(reports[i] + ": unknown report kind \"" + kind + "\"");
    }
  }
  std::cout << os.str();
  if (!out.empty()) {
    write_json_file(out, json{{"axis", axis}, {"series", series}});
    json list = json::array();
    for (const auto& p : reports) list.push_back(abs_str(p));
    write_sidecar(out, "plot-data", {{"reports", list}, {"axis", axis}});
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Matryoshka embedding toolkit: train, evaluate, deploy, benchmark"};
  app.require_subcommand(1);
  std::function<int()> run;

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a run config");
  train_cmd->add_option("--config", ta.config, "Run config JSON")->required();
  train_cmd->add_option("--out", ta.out, "Output directory")->required();
  train_cmd->add_option("--stage", ta.stage, "Training stage (1 or 2)");
  train_cmd->add_option("--resume", ta.resume, "Checkpoint directory to continue from");
  train_cmd->add_option("--steps", ta.steps, "Override train.max_steps");
  train_cmd->add_option("--seed", ta.seed, "Override train.seed");
  train_cmd->callback([&] { run = [&] { return cmd_train(ta); }; });

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Sweep a model over depth, dim and rank");
  eval_cmd->add_option("model", ea.model, "Model file")->required();
  eval_cmd->add_option("--task", ea.tasks, "Task file (repeatable)");
  eval_cmd->add_option("--config", ea.config, "Run config JSON (eval section)");
  eval_cmd->add_option("--depths", ea.depths)->delimiter(',');
  eval_cmd->add_option("--dims", ea.dims)->delimiter(',');
  eval_cmd->add_option("--ranks", ea.ranks, "0 = embedding as stored")->delimiter(',');
  eval_cmd->add_option("--rank-mode", ea.rank_mode)->check(CLI::IsMember({"svd", "column_prefix"}));
  eval_cmd->add_option("--out", ea.out, "Report file");
  eval_cmd->callback([&] { run = [&] { return cmd_eval(ea); }; });

  EmbedArgs ma;
  auto* embed_cmd = app.add_subcommand("embed", "Embed one text per input line");
  embed_cmd->add_option("model", ma.model)->required();
  embed_cmd->add_option("input", ma.input)->required();
  embed_cmd->add_option("--out", ma.out, "TSV output (default stdout)");
  embed_cmd->add_option("--depth", ma.depth, "Tap layer (default: last)");
  embed_cmd->add_option("--dim", ma.dim, "Prefix dimension (default: d_model)");
  embed_cmd->add_option("--rank", ma.rank, "Embedding rank (default: stored)");
  embed_cmd->callback([&] { run = [&] { return cmd_embed(ma); }; });

  std::string prune_in, prune_out;
  std::size_t prune_layers_n = 0;
  auto* prune_cmd = app.add_subcommand("prune-layers", "Keep the first l layers");
  prune_cmd->add_option("input", prune_in)->required();
  prune_cmd->add_option("output", prune_out)->required();
  prune_cmd->add_option("--layers", prune_layers_n)->required();
  prune_cmd->callback(
      [&] { run = [&] { return cmd_prune(prune_in, prune_out, prune_layers_n); }; });

  std::string comp_in, comp_out;
  std::optional<std::size_t> comp_rank;
  bool comp_compat = false;
  auto* comp_cmd = app.add_subcommand("compress-embedding", "Change the embedding mode or rank");
  comp_cmd->add_option("input", comp_in)->required();
  comp_cmd->add_option("output", comp_out)->required();
  comp_cmd->add_option("--rank", comp_rank, "Factorize at this rank");
  comp_cmd->add_flag("--compat", comp_compat, "Store the dense product");
  comp_cmd->callback(
      [&] { run = [&] { return cmd_compress(comp_in, comp_out, comp_rank, comp_compat); }; });

  std::vector<std::string> merge_in;
  std::string merge_out;
  auto* merge_cmd = app.add_subcommand("merge-checkpoints", "Average checkpoint weights");
  merge_cmd->add_option("inputs", merge_in, "Model files or checkpoint directories")->required();
  merge_cmd->add_option("--out", merge_out)->required();
  merge_cmd->callback([&] { run = [&] { return cmd_merge(merge_in, merge_out); }; });

  std::string mine_model, mine_corpus, mine_queries, mine_out;
  std::size_t mine_k = 7;
  auto* mine_cmd = app.add_subcommand("mine-negatives", "Fill hard negatives by cosine rank");
  mine_cmd->add_option("model", mine_model)->required();
  mine_cmd->add_option("corpus", mine_corpus, "One document per line")->required();
  mine_cmd->add_option("queries", mine_queries, "JSONL samples")->required();
  mine_cmd->add_option("--k", mine_k);
  mine_cmd->add_option("--out", mine_out)->required();
  mine_cmd->callback([&] {
    run = [&] { return cmd_mine(mine_model, mine_corpus, mine_queries, mine_k, mine_out); };
  });

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand("bench", "Throughput and memory per depth");
  bench_cmd->add_option("model", ba.model)->required();
  bench_cmd->add_option("--config", ba.config, "Run config JSON (bench section)");
  bench_cmd->add_option("--depths", ba.depths)->delimiter(',');
  bench_cmd->add_option("--ranks", ba.ranks)->delimiter(',');
  bench_cmd->add_flag("--dense", ba.dense, "Also measure the dense embedding");
  bench_cmd->add_option("--batch", ba.batch);
  bench_cmd->add_option("--seq-len", ba.seq_len);
  bench_cmd->add_option("--trials", ba.trials);
  bench_cmd->add_option("--out", ba.out, "Report file");
  bench_cmd->callback([&] { run = [&] { return cmd_bench(ba); }; });

  std::string dump_path;
  auto* dump_cmd = app.add_subcommand("dump-manifest", "Print a checkpoint manifest");
  dump_cmd->add_option("path", dump_path)->required();
  dump_cmd->callback([&] {
    run = [&] {
      std::cout << dump_manifest(dump_path);
      return 0;
    };
  });

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("gen-synth", "Write a synthetic training set and task");
  synth_cmd->add_option("out_dir", sa.out_dir)->required();
  synth_cmd->add_option("--seed", sa.spec.seed);
  synth_cmd->add_option("--clusters", sa.spec.n_clusters);
  synth_cmd->add_option("--docs-per-cluster", sa.spec.docs_per_cluster);
  synth_cmd->add_option("--words-per-cluster", sa.spec.words_per_cluster);
  synth_cmd->add_option("--doc-len", sa.spec.doc_len);
  synth_cmd->add_option("--query-len", sa.spec.query_len);
  synth_cmd->add_option("--noise", sa.spec.query_noise);
  synth_cmd->add_option("--queries", sa.spec.n_queries, "Evaluation queries");
  synth_cmd->add_option("--samples", sa.samples, "Training samples");
  synth_cmd->add_option("--negatives", sa.negatives, "Hard negatives per sample");
  synth_cmd->callback([&] { run = [&] { return cmd_gen_synth(sa); }; });

  std::vector<std::string> plot_reports, plot_labels;
  std::string plot_axis = "depth", plot_out;
  auto* plot_cmd = app.add_subcommand("plot-data", "Flatten reports into plot series");
  plot_cmd->add_option("reports", plot_reports)->required();
  plot_cmd->add_option("--label", plot_labels, "Series label per report");
  plot_cmd->add_option("--axis", plot_axis)->check(CLI::IsMember({"depth", "dim", "rank"}));
  plot_cmd->add_option("--out", plot_out, "JSON series file");
  plot_cmd->callback([&] {
    run = [&] { return cmd_plot_data(plot_reports, plot_labels, plot_axis, plot_out); };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorCategory::kUsage);
  }
  try {
    return run();
  } catch (const Error& e) {
    std::cerr << "m3d: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "m3d: " << e.what() << '\n';
    return static_cast<int>(ErrorCategory::kFormat);
  }
}
