// fedgin: dataset generation, training, evaluation and reporting.
#include "fedgin/experiment.hpp"
#include "fedgin/log.hpp"
#include "fedgin/report.hpp"
#include "fedgin/serialize.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace fedgin;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenDataArgs {
  std::string out_dir;
  int size = 64;
  int slices = 16;
  std::uint64_t seed = 0;
  int train = 20, val = 5, test = 10;
};

struct TrainArgs {
  std::string config, manifest, scenario, gin, transport, out_dir;
  std::vector<std::string> methods;
  std::optional<int> rounds, local_epochs, validate_every;
  std::vector<std::uint64_t> seeds;
  bool parallel_seeds = false, no_checkpoints = false, single_client = false, no_scheduler = false;
  std::vector<std::string> fail_at_round;
};

struct EvalArgs {
  std::string config, manifest, params, split = "test", out, label = "model";
};

struct ReportArgs {
  std::string metrics, out_dir;
};

struct ClientArgs {
  std::string spec, host = "127.0.0.1";
  std::uint16_t port = 0;
};

ExperimentConfig build_config(const TrainArgs& a) {
  try {
    ExperimentConfig c = a.config.empty() ? ExperimentConfig{} : load_experiment_config(a.config);
    if (!a.manifest.empty()) c.manifest = a.manifest;
    if (!a.scenario.empty()) c.scenario = parse_scenario(a.scenario);
    if (!a.methods.empty()) {
      c.methods.clear();
      for (const auto& m : a.methods) c.methods.push_back(Method::parse(m));
    }
    if (!a.gin.empty()) c.gin_override = a.gin == "on";
    if (a.rounds) c.rounds = *a.rounds;
    if (a.local_epochs) c.local_epochs = *a.local_epochs;
    if (a.validate_every) c.validate_every = *a.validate_every;
    if (!a.seeds.empty()) c.seeds = a.seeds;
    if (!a.transport.empty()) c.transport = parse_transport(a.transport);
    if (!a.out_dir.empty()) c.out_dir = a.out_dir;
    if (a.parallel_seeds) c.parallel_seeds = true;
    if (a.no_checkpoints) c.save_checkpoints = false;
    if (a.single_client) c.single_client = true;
    if (a.no_scheduler) c.scheduler.enabled = false;
    for (const auto& f : a.fail_at_round) {
      const auto eq = f.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--fail-at-round expects CLIENT=ROUND, got '" + f + "'");
      c.fail_at_round[f.substr(0, eq)] = std::stoi(f.substr(eq + 1));
    }
    c.validate();
    return c;
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  } catch (const std::out_of_range& e) {
    throw UsageError(e.what());
  }
}

int cmd_gen_data(const GenDataArgs& a) {
  DatasetConfig c;
  c.height = c.width = a.size;
  c.slices = a.slices;
  c.seed = a.seed;
  for (Modality m : {Modality::A, Modality::B}) {
    c.splits.push_back({m, Split::Train, a.train, std::nullopt});
    c.splits.push_back({m, Split::Val, a.val, std::nullopt});
    c.splits.push_back({m, Split::Test, a.test, std::nullopt});
  }
  const DatasetManifest m = build_dataset(c, a.out_dir);
  std::cout << "wrote " << m.volumes.size() << " volumes (" << a.size << "x" << a.size << "x" << a.slices << ") to "
            << a.out_dir << "\n";
  return 0;
}

int cmd_train(const TrainArgs& a) {
  ExperimentConfig c = build_config(a);
  c.client_executable = fs::read_symlink("/proc/self/exe");
  const ScenarioResult r = run_scenario(c);
  std::cout << "method\ttrain_a\ttrain_b\tmodality\tmean\tstd\n";
  for (const auto& e : r.summary) {
    std::printf("%s\t%d\t%d\t%s\t%.4f\t%.4f\n", e.method.c_str(), e.train_a, e.train_b, e.modality.c_str(), e.mean,
                e.std);
  }
  int failed = 0;
  for (const auto& run : r.runs) {
    if (run.status == "failed") {
      ++failed;
      std::cerr << "run " << run.method << " seed " << run.seed << " failed: " << run.message << "\n";
    }
  }
  std::cout << "metrics: " << (c.out_dir / "metrics.csv").string() << "\n";
  return failed ? kRuntimeError : 0;
}

int cmd_evaluate(const EvalArgs& a) {
  ExperimentConfig c;
  Split split;
  try {
    if (!a.config.empty()) c = load_experiment_config(a.config);
    if (!a.manifest.empty()) c.manifest = a.manifest;
    split = parse_split(a.split);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const ModelParams params = load_params(a.params);
  const auto records = evaluate_model(params, c, split, a.label);
  const fs::path out = a.out.empty() ? fs::path("evaluation.csv") : fs::path(a.out);
  write_metrics_csv(records, out);
  for (const auto& e : summarize(records)) std::printf("%s\t%.4f\t%.4f\n", e.modality.c_str(), e.mean, e.std);
  return 0;
}

int cmd_report(const ReportArgs& a) {
  const fs::path out = a.out_dir.empty() ? fs::path(a.metrics).parent_path() / "report" : fs::path(a.out_dir);
  const ReportFiles files = write_report(a.metrics, out);
  std::cout << files.markdown;
  return 0;
}

int cmd_client(const ClientArgs& a) {
  std::ifstream f(a.spec);
  if (!f) throw UsageError("cannot open client spec " + a.spec);
  run_client_process(client_spec_from_json(nlohmann::json::parse(f)), a.host, a.port);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated segmentation with intensity augmentation on synthetic two-modality data"};
  app.require_subcommand(1);
  app.fallthrough();
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");
  app.add_flag("-q,--quiet", quiet, "Warnings and errors only");

  GenDataArgs g;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--out-dir", g.out_dir, "Dataset directory")->required();
  gen->add_option("--size", g.size, "Slice height and width")->check(CLI::Range(8, 1024));
  gen->add_option("--slices", g.slices, "Slices per volume")->check(CLI::Range(1, 1024));
  gen->add_option("--seed", g.seed, "Master seed");
  gen->add_option("--train", g.train, "Train volumes per modality")->check(CLI::NonNegativeNumber);
  gen->add_option("--val", g.val, "Validation volumes per modality")->check(CLI::NonNegativeNumber);
  gen->add_option("--test", g.test, "Test volumes per modality")->check(CLI::NonNegativeNumber);

  TrainArgs t;
  auto* train = app.add_subcommand("train", "Run a scenario over methods and seeds");
  train->add_option("--config", t.config, "Experiment config (JSON)");
  train->add_option("--manifest", t.manifest, "Dataset directory or manifest.json");
  train->add_option("--method", t.methods, "local_A, local_B, central, central_gin, fed, fed_gin (repeatable)");
  train->add_option("--scenario", t.scenario, "complete or limited")->check(CLI::IsMember({"complete", "limited"}));
  train->add_option("--gin", t.gin, "Force augmentation on or off")->check(CLI::IsMember({"on", "off"}));
  train->add_option("--rounds", t.rounds, "Communication rounds");
  train->add_option("--local-epochs", t.local_epochs, "Local epochs per round");
  train->add_option("--validate-every", t.validate_every, "Validation cadence in rounds (0 disables)");
  train->add_option("--seed,--seeds", t.seeds, "Seeds")->delimiter(',');
  train->add_option("--transport", t.transport, "inprocess or socket")->check(CLI::IsMember({"inprocess", "socket"}));
  train->add_option("--out-dir", t.out_dir, "Output directory");
  train->add_flag("--parallel-seeds", t.parallel_seeds, "Run seeds concurrently");
  train->add_flag("--no-checkpoints", t.no_checkpoints, "Skip per-round checkpoints");
  train->add_flag("--single-client", t.single_client, "Federated methods use one client holding all data");
  train->add_flag("--no-scheduler", t.no_scheduler, "Disable the plateau scheduler");
  train->add_option("--fail-at-round", t.fail_at_round, "Test hook: CLIENT=ROUND kills a socket client process");

  EvalArgs e;
  auto* eval = app.add_subcommand("evaluate", "Score a parameter file on a dataset split");
  eval->add_option("--params", e.params, "FGWT parameter file")->required();
  eval->add_option("--config", e.config, "Experiment config supplying the model shape");
  eval->add_option("--manifest", e.manifest, "Dataset directory or manifest.json");
  eval->add_option("--split", e.split, "train, val or test");
  eval->add_option("--out", e.out, "Metrics CSV to write");
  eval->add_option("--label", e.label, "Method label written to the CSV");

  ReportArgs r;
  auto* rep = app.add_subcommand("report", "Summary tables and charts from a metrics CSV");
  rep->add_option("metrics", r.metrics, "metrics.csv")->required();
  rep->add_option("--out-dir", r.out_dir, "Output directory (default: <csv dir>/report)");

  ClientArgs c;
  auto* client = app.add_subcommand("client", "Socket client process (started by train)");
  client->group("");
  client->add_option("--spec", c.spec)->required();
  client->add_option("--port", c.port)->required();
  client->add_option("--host", c.host);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kUsageError;
  }
  log::set_level(verbose ? log::Level::Debug : quiet ? log::Level::Warn : log::Level::Info);

  try {
    if (gen->parsed()) return cmd_gen_data(g);
    if (train->parsed()) return cmd_train(t);
    if (eval->parsed()) return cmd_evaluate(e);
    if (rep->parsed()) return cmd_report(r);
    if (client->parsed()) return cmd_client(c);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsageError;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}
