#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cosa/checkpoint.hpp"
#include "cosa/corpus_io.hpp"
#include "cosa/errors.hpp"
#include "cosa/harness.hpp"
#include "cosa/trainer.hpp"

extern char** environ;

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cosa;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config;
  bool force = false;
  int parallel = 1;
  std::optional<std::string> mode;
  bool quiet = false;
};

TrainConfig load_config(const Globals& g) {
  TrainConfig cfg;
  if (!g.config.empty()) {
    std::ifstream in(g.config);
    if (!in) throw ConfigError("config file not found: " + g.config);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config " + g.config + ": " + e.what());
    }
    cfg = TrainConfig::from_json(j);
  }
  // flags win over the file
  if (g.seed) cfg.seed = *g.seed;
  if (g.mode) cfg.mode = parse_mode(*g.mode);
  return cfg;
}

fs::path require_out(const Globals& g, const char* what) {
  if (g.out.empty()) throw ConfigError(std::string(what) + " needs --out");
  return g.out;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

int cmd_gen_corpus(const Globals& g, long long n) {
  if (n <= 0) throw ConfigError("--n must be >= 1");
  const fs::path out = require_out(g, "gen-corpus");
  if (fs::exists(out) && !fs::is_empty(out) && !g.force) {
    throw ConfigError("output directory " + out.string() + " is not empty (use --force to overwrite)");
  }
  const std::uint64_t seed = g.seed.value_or(7);
  const GrammarConfig grammar = GrammarConfig::default_grammar();
  const Corpus corpus = build_corpus(static_cast<std::size_t>(n), seed, grammar);
  write_corpus(out, corpus);
  std::cout << "corpus " << out.string() << ": n=" << corpus.samples.size() << " vocab=" << corpus.vocab.size()
            << " scene_space=" << grammar.scene_space() << " duplicates=" << corpus.duplicates << "\n";
  return 0;
}

int cmd_train(const Globals& g, const std::optional<std::string>& resume, std::optional<int> steps) {
  TrainConfig cfg = load_config(g);
  if (steps) cfg.steps = *steps;
  RunOptions o;
  o.run_dir = require_out(g, "train");
  o.force = g.force;
  if (resume) o.resume = fs::path(*resume);
  o.progress = g.quiet ? nullptr : &std::cerr;
  const RunResult r = run(cfg, o);
  std::cout << json(r.final_metrics).dump(2) << "\n";
  return 0;
}

int cmd_eval(const Globals& g, const std::string& target) {
  fs::path ckpt_path = target;
  if (fs::is_directory(ckpt_path)) ckpt_path /= "final.ckpt";
  if (!fs::exists(ckpt_path)) throw DataError("checkpoint not found: " + ckpt_path.string());
  const Checkpoint ckpt = read_checkpoint(ckpt_path);
  if (!ckpt.header.contains("train_config")) throw DataError(ckpt_path.string() + ": no training config in header");
  TrainConfig cfg = TrainConfig::from_json(ckpt.header.at("train_config"));
  const TrainData data = load_train_data(cfg.corpus);
  const TrainConfig bound = bind_config(cfg, data.corpus);
  const Model<float> model = load_model<float>(ckpt, &bound.model);
  const EvalSuite suite = build_eval_suite(data.heldout, data.corpus.vocab, bound.eval, bound.model.max_position_len);
  const json out = evaluate(model, suite);
  if (!g.out.empty()) write_text(g.out, out.dump(2) + "\n");
  std::cout << out.dump(2) << "\n";
  return 0;
}

// Runs `argv` as a child process and returns its pid.
pid_t spawn(const std::vector<std::string>& args) {
  std::vector<char*> argv;
  for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  pid_t pid = 0;
  if (posix_spawn(&pid, argv[0], nullptr, nullptr, argv.data(), environ) != 0) {
    throw DataError("cannot start " + args[0]);
  }
  return pid;
}

int exit_status(int status) { return WIFEXITED(status) ? WEXITSTATUS(status) : 1; }

int cmd_ablate(const Globals& g, const std::string& name, std::optional<int> steps) {
  TrainConfig base = load_config(g);
  if (steps) base.steps = *steps;
  const ExperimentSuite suite = make_suite(name, base);
  for (const auto& r : suite.runs) r.config.validate();
  const fs::path dir = require_out(g, "ablate");
  if (g.parallel < 1) throw ConfigError("--parallel must be >= 1");

  if (g.parallel == 1) {
    run_suite(suite, dir, g.force, [&](const SuiteRun& r, const fs::path& run_dir) {
      RunOptions o;
      o.run_dir = run_dir;
      o.force = true;
      o.progress = g.quiet ? nullptr : &std::cerr;
      o.progress_every = 500;
      run(r.config, o);
    });
  } else {
    if (fs::exists(dir / "suite.json") && !g.force) {
      throw ConfigError("suite directory " + dir.string() + " already holds a suite (use --force to replace it)");
    }
    write_suite_manifest(suite, dir);
    const std::string self = fs::read_symlink("/proc/self/exe").string();
    std::deque<const SuiteRun*> pending;
    for (const auto& r : suite.runs) pending.push_back(&r);
    int running = 0, failure = 0;
    while (!pending.empty() || running > 0) {
      while (!pending.empty() && running < g.parallel) {
        const SuiteRun& r = *pending.front();
        pending.pop_front();
        fs::create_directories(dir / r.name);
        const fs::path request = dir / r.name / "request.json";
        write_text(request, r.config.to_json().dump(2) + "\n");
        spawn({self, "train", "--config", request.string(), "--out", (dir / r.name).string(), "--force", "--quiet"});
        ++running;
      }
      int status = 0;
      if (wait(&status) < 0) break;
      --running;
      if (exit_status(status) != 0 && failure == 0) failure = exit_status(status);
    }
    if (failure != 0) return failure;
  }
  const Report rep = build_report({dir});
  write_report(rep, dir);
  std::cout << rep.render_table();
  return 0;
}

int cmd_report(const Globals& g, const std::vector<std::string>& dirs) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  const Report rep = build_report(paths);
  if (!g.out.empty()) write_report(rep, g.out);
  std::cout << rep.render_table();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"COSA concatenated-sample pretraining lab"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed (overrides the config file)");
  app.add_option("--out", g.out, "Output directory or file");
  app.add_option("--config", g.config, "JSON training config");
  app.add_flag("--force", g.force, "Replace existing outputs");
  app.add_option("--parallel", g.parallel, "Concurrent runs for ablate (process level)");
  app.add_option("--mode", g.mode, "sst, cosa, cosa_copy or cosa_shuffle (overrides the config file)");
  app.add_flag("--quiet", g.quiet, "No progress output");
  app.fallthrough();

  long long n = 2000;
  auto* gen = app.add_subcommand("gen-corpus", "Write a synthetic corpus directory");
  gen->add_option("--n", n, "Number of samples");

  std::optional<std::string> resume;
  std::optional<int> steps;
  auto* train = app.add_subcommand("train", "Train one run");
  train->add_option("--resume", resume, "Checkpoint to continue from");
  train->add_option("--steps", steps, "Override the step count");

  std::string target;
  auto* ev = app.add_subcommand("eval", "Evaluate a run directory or checkpoint");
  ev->add_option("target", target, "Run directory or checkpoint file")->required();

  std::string suite;
  auto* abl = app.add_subcommand("ablate", "Run an ablation suite");
  abl->add_option("suite", suite, "variants, concat_number, sampling, iterations, objectives")->required();
  abl->add_option("--steps", steps, "Override the step count");

  std::vector<std::string> dirs;
  auto* rep = app.add_subcommand("report", "Aggregate suite or run directories");
  rep->add_option("dirs", dirs, "Suite or run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_corpus(g, n);
    if (*train) return cmd_train(g, resume, steps);
    if (*ev) return cmd_eval(g, target);
    if (*abl) return cmd_ablate(g, suite, steps);
    if (*rep) return cmd_report(g, dirs);
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
