#include "dmtd/cli.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "dmtd/bench.hpp"
#include "dmtd/checkpoint.hpp"
#include "dmtd/config.hpp"
#include "dmtd/corpus.hpp"
#include "dmtd/errors.hpp"
#include "dmtd/infer.hpp"
#include "dmtd/runlog.hpp"
#include "dmtd/train.hpp"

namespace dmtd {

namespace {

namespace fs = std::filesystem;

struct TrainArgs {
  std::string config;
  std::string resume;
};

struct GenerateArgs {
  std::string checkpoint;
  std::string prompt;
  int tau = 0;
  int max_new = 64;
  std::uint64_t seed = 0;
  bool seed_set = false;
  double temperature = 0.0;
  std::string transcript;
  bool unmasked_prefill = false;
};

struct EvalArgs {
  std::string checkpoint;
  std::vector<std::string> corpus;
  std::vector<int> taus;
};

struct BenchArgs {
  std::string checkpoint;
  std::vector<int> taus{1, 2, 3, 4};
  std::vector<int> batches{1};
  int context = 32;
  int gen = 48;
  std::string report_dir;
};

std::string without_paths(RunConfig c) {
  c.paths = {};
  return to_ini(c);
}

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + file.string());
  out << text;
}

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  const RunConfig config = load_run_config(args.config);
  if (config.paths.checkpoint.empty()) throw ConfigError("paths.checkpoint is required for training");
  if (config.paths.log.empty()) throw ConfigError("paths.log is required for training");
  auto split = load_corpus(config.paths.corpus, config.train.seq_len, config.train.eval_fraction, config.train.seed);

  Model<float> model(config.model);
  std::optional<LoadedCheckpoint> resumed;
  if (!args.resume.empty()) {
    resumed.emplace(load_checkpoint(args.resume));
    if (without_paths(resumed->config) != without_paths(config)) {
      throw ConfigError("--resume: checkpoint was written under a different configuration");
    }
    auto dst = model.named_parameters();
    auto src = resumed->model.named_parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), dst[i].tensor.mutable_data().begin());
    }
  }

  Trainer trainer(model, config.train, config.cycle, std::move(split.train), std::move(split.eval));
  if (resumed) restore_optimizer(*resumed, trainer.optimizer());

  if (config.paths.log.has_parent_path()) fs::create_directories(config.paths.log.parent_path());
  std::ofstream log(config.paths.log, resumed ? std::ios::app : std::ios::trunc);
  if (!log) throw DataError("cannot write training log " + config.paths.log.string());

  TrainRecord last;
  trainer.run(
      [&](const TrainRecord& r) {
        if (!std::isfinite(r.train_loss)) throw NumericError("training loss became non-finite at step " + std::to_string(r.step));
        log << train_record_json(r, config.cycle.tau_train) << '\n';
        log.flush();
        out << "step " << r.step << " train_loss " << std::fixed << std::setprecision(4) << r.train_loss
            << " eval_loss " << r.eval_loss << std::defaultfloat << '\n';
        last = r;
      },
      [&](std::int64_t step) {
        if (step < config.train.steps) {
          auto periodic = config.paths.checkpoint;
          periodic += ".step" + std::to_string(step);
          save_checkpoint(periodic, config, model, &trainer.optimizer(), step);
        }
        save_checkpoint(config.paths.checkpoint, config, model, &trainer.optimizer(), step);
      });
  log.close();

  const auto points = scaling_points(read_training_log(config.paths.log));
  std::set<double> distinct;
  for (const auto& p : points) distinct.insert(p.first);
  if (distinct.size() >= 2) {
    const auto fit = fit_scaling_law(points);
    out << "scaling_fit slope " << fit.slope << " r_squared " << fit.r_squared << '\n';
  }
  out << "checkpoint " << config.paths.checkpoint.string() << '\n';
  (void)err;
  return kExitOk;
}

int cmd_generate(const GenerateArgs& args, std::ostream& out, std::ostream& err) {
  const auto ck = load_checkpoint(args.checkpoint);
  CyclePlan plan = ck.config.cycle;
  if (args.tau != 0) plan.tau_infer = args.tau;
  plan.validate(&ck.config.model);
  SamplerConfig sampler = ck.config.sampler;
  if (args.seed_set) sampler.seed = args.seed;
  if (args.temperature > 0.0) {
    sampler.mode = SamplerMode::Temperature;
    sampler.temperature = args.temperature;
  }
  sampler.validate();
  if (args.max_new < 1) throw ConfigError("--max-new must be at least 1");

  std::vector<int> context = tokenize(args.prompt);
  if (context.empty()) context.push_back(kSeparatorId);
  if (static_cast<int>(context.size()) > ck.config.model.max_seq_len) {
    throw ConfigError("prompt has " + std::to_string(context.size()) + " tokens, max_seq_len is " +
                      std::to_string(ck.config.model.max_seq_len));
  }
  if (plan.tau_infer != plan.tau_train) {
    err << "note: tau_infer " << plan.tau_infer << " differs from training tau " << plan.tau_train << '\n';
  }

  GenerateOptions options;
  options.prefill.masked_context = ck.config.masked_prefill && !args.unmasked_prefill;
  const auto report = generate(ck.model, context, args.max_new, plan, sampler, options);
  out << detokenize(report.tokens);
  out.flush();
  if (!args.transcript.empty()) write_text(args.transcript, transcript_json(report, ck.model.partition()) + "\n");
  if (report.truncated) {
    err << "error: generation truncated at max_seq_len " << ck.config.model.max_seq_len << " after "
        << report.tokens.size() << " tokens\n";
  }
  return kExitOk;
}

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream&) {
  const auto ck = load_checkpoint(args.checkpoint);
  const RunConfig& config = ck.config;
  std::vector<fs::path> files;
  for (const auto& c : args.corpus) files.emplace_back(c);
  if (files.empty()) files = config.paths.corpus;
  auto split = load_corpus(files, config.train.seq_len, config.train.eval_fraction, config.train.seed);
  auto windows = std::move(split.eval);
  if (windows.size() > static_cast<std::size_t>(config.train.eval_max_windows)) {
    windows.resize(static_cast<std::size_t>(config.train.eval_max_windows));
  }
  std::vector<int> taus = args.taus;
  if (taus.empty()) taus.push_back(config.cycle.tau_train);

  out << "tau\tloss\tperplexity\twindows\n";
  for (int tau : taus) {
    CyclePlan plan = config.cycle;
    plan.tau_train = tau;
    plan.tau_infer = tau;
    if (tau >= 1) plan.mask_anchor = config.cycle.mask_anchor % tau;
    plan.validate(&config.model);
    const double loss = evaluate(ck.model, windows, plan, config.train.batch_size);
    if (!std::isfinite(loss)) throw NumericError("evaluation loss is non-finite at tau " + std::to_string(tau));
    out << tau << '\t' << std::setprecision(9) << loss << '\t' << std::exp(loss) << '\t' << windows.size()
        << std::defaultfloat << '\n';
  }
  return kExitOk;
}

int cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream&) {
  const auto ck = load_checkpoint(args.checkpoint);
  fs::path report_dir = ck.config.paths.report_dir;
  if (const char* env = std::getenv("DMTD_REPORT_DIR"); env && *env) report_dir = env;
  if (!args.report_dir.empty()) report_dir = args.report_dir;

  ThroughputOptions options;
  options.taus = args.taus;
  options.batch_sizes = args.batches;
  options.context_length = args.context;
  options.gen_length = args.gen;
  options.seed = ck.config.sampler.seed;
  options.variant = ck.config.cycle.variant;
  const auto rows = throughput_bench(ck.model, options);
  const auto tsv = throughput_table_tsv(rows);
  out << tsv;
  if (!report_dir.empty()) {
    write_text(report_dir / "bench.tsv", tsv);
    write_text(report_dir / "bench.json", throughput_summary_json(rows, ck.model.config()) + "\n");
  }
  return kExitOk;
}

int cmd_inspect(const std::string& checkpoint, std::ostream& out) {
  const auto ck = load_checkpoint(checkpoint);
  const auto part = ck.model.partition();
  out << "step " << ck.step << '\n';
  out << "parameters " << ck.model.parameter_count() << '\n';
  out << "optimizer_state " << (ck.has_optimizer_state() ? "yes" : "no") << '\n';
  for (RangeId id : {RangeId::Encoding, RangeId::Thinking, RangeId::Decoding}) {
    const auto r = part.get(id);
    out << range_name(id) << " layers [" << r.begin << ", " << r.end << ")\n";
  }
  out << '\n' << to_ini(ck.config);
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Direct multi-token decoding engine", "dmtd"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("--config", train.config, "Run configuration (INI)")->required();
  train_cmd->add_option("--resume", train.resume, "Checkpoint to resume from");

  GenerateArgs gen;
  auto* gen_cmd = app.add_subcommand("generate", "Generate text with cycle-based decoding");
  gen_cmd->add_option("--checkpoint", gen.checkpoint)->required();
  gen_cmd->add_option("--prompt", gen.prompt, "Prompt text");
  gen_cmd->add_option("--tau", gen.tau, "Inference cycle length (default: from checkpoint)")
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--max-new", gen.max_new, "Tokens to generate");
  auto* seed_opt = gen_cmd->add_option("--seed", gen.seed, "Sampler seed");
  gen_cmd->add_option("--temperature", gen.temperature, "Sampling temperature; 0 means greedy")
      ->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--transcript", gen.transcript, "Write the generation transcript (JSON) here");
  gen_cmd->add_flag("--unmasked-prefill", gen.unmasked_prefill, "Run the context with the full-path input everywhere");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Held-out loss per cycle length");
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
  eval_cmd->add_option("--corpus", ev.corpus, "Corpus files (default: from checkpoint)");
  eval_cmd->add_option("--tau", ev.taus, "Cycle lengths to evaluate")->delimiter(',');

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "Layer-invocation and throughput report");
  bench_cmd->add_option("--checkpoint", bench.checkpoint)->required();
  bench_cmd->add_option("--taus", bench.taus)->delimiter(',');
  bench_cmd->add_option("--batches", bench.batches)->delimiter(',');
  bench_cmd->add_option("--context", bench.context);
  bench_cmd->add_option("--gen", bench.gen);
  bench_cmd->add_option("--report-dir", bench.report_dir, "Report directory (env DMTD_REPORT_DIR)");

  std::string inspect_path;
  auto* inspect_cmd = app.add_subcommand("inspect", "Print a checkpoint's config and partition");
  inspect_cmd->add_option("--checkpoint", inspect_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  gen.seed_set = seed_opt->count() > 0;

  try {
    if (train_cmd->parsed()) return cmd_train(train, out, err);
    if (gen_cmd->parsed()) return cmd_generate(gen, out, err);
    if (eval_cmd->parsed()) return cmd_eval(ev, out, err);
    if (bench_cmd->parsed()) return cmd_bench(bench, out, err);
    if (inspect_cmd->parsed()) return cmd_inspect(inspect_path, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace dmtd
