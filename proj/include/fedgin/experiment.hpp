#pragma once

#include "fedgin/federated.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fedgin {

enum class Scenario { Complete, Limited };
std::string to_string(Scenario s);
Scenario parse_scenario(const std::string& s);

/// Training regime without the augmentation switch.
enum class MethodKind { LocalA, LocalB, Central, Fed };

struct Method {
  MethodKind kind = MethodKind::Fed;
  bool gin = false;

  /// local_A, local_B, central, central_gin, fed, fed_gin (local_*_gin too).
  [[nodiscard]] std::string name() const;
  static Method parse(const std::string& s);
  friend bool operator==(const Method&, const Method&) = default;
};

inline constexpr int kMetricsSchemaVersion = 1;

struct MetricsRecord {
  std::string scenario;
  std::string method;
  bool gin = false;
  std::uint64_t seed = 0;
  int train_a = 0;  // training volumes of each modality used by the run
  int train_b = 0;
  int round = 0;    // rounds completed when the model was evaluated
  std::string split;
  std::string modality;
  std::string volume_id;
  double dice3d = 0.0;
};

struct ExperimentConfig {
  Scenario scenario = Scenario::Complete;
  std::vector<Method> methods;  // empty: every method that fits the scenario
  std::filesystem::path manifest;
  std::filesystem::path out_dir = "runs";
  int rounds = 30;
  int local_epochs = 1;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int validate_every = 1;
  TransportKind transport = TransportKind::InProcess;
  bool parallel_seeds = false;
  bool save_checkpoints = true;

  UNetConfig model;
  LossConfig loss;
  GinConfig gin;  // `enabled` is ignored; each method decides
  /// Forces augmentation on or off for every method when set.
  std::optional<bool> gin_override;
  AdamWConfig optimizer;
  PlateauConfig scheduler;
  int batch_size = 8;

  /// Limited scenario: modality-A volumes added to a fixed modality-B set.
  std::vector<int> ladder{0, 4, 8, 20};
  int limited_b_volumes = 8;
  /// Complete scenario caps; unset uses every train volume in the manifest.
  std::optional<int> train_volumes;
  std::optional<int> val_volumes;
  std::optional<int> test_volumes;
  /// Federated methods use one client holding all training data.
  bool single_client = false;

  /// Socket transport with separate client processes: path of the fedgin
  /// executable. Unset runs socket clients on threads.
  std::optional<std::filesystem::path> client_executable;
  /// Client processes kill themselves on receiving this round (test hook).
  std::map<std::string, int> fail_at_round;

  void validate() const;
  [[nodiscard]] std::vector<Method> effective_methods() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
/// Unknown keys are rejected; missing keys keep their defaults.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig base = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct RunOutcome {
  std::string method;
  std::uint64_t seed = 0;
  int train_a = 0;
  int train_b = 0;
  std::string status;  // ok, failed, skipped
  std::string message;
  int rounds_completed = 0;
  std::filesystem::path run_dir;
};

struct SummaryEntry {
  std::string scenario;
  std::string method;
  int train_a = 0;
  int train_b = 0;
  std::string modality;
  std::size_t count = 0;
  double mean = 0.0;
  double std = 0.0;  // population
  std::map<std::uint64_t, double> per_seed_mean;
};

/// Groups by (scenario, method, train_a, train_b, modality), in first-seen order.
std::vector<SummaryEntry> summarize(const std::vector<MetricsRecord>& records);

struct ScenarioResult {
  std::vector<MetricsRecord> records;
  std::vector<RunOutcome> runs;
  std::vector<SummaryEntry> summary;
};

/// Runs every (method, ladder step, seed) job, evaluating final models on the
/// test split of both modalities. Writes metrics.csv, summary.json and
/// config.json under out_dir plus one directory per run.
ScenarioResult run_scenario(const ExperimentConfig& config);

void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::filesystem::path& path);
std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path);
/// CSV text without the leading timestamp comment.
std::string metrics_csv_body(const std::vector<MetricsRecord>& records);

nlohmann::json summary_to_json(const ScenarioResult& result);

/// Scores `params` on one split of a manifest; records carry method `label`.
std::vector<MetricsRecord> evaluate_model(const ModelParams& params, const ExperimentConfig& config,
                                          Split split, const std::string& label);

// --- multi-process socket clients -------------------------------------------------

/// What a client process needs to rebuild its trainer.
struct ClientProcessSpec {
  std::string client_id;
  std::optional<std::string> rng_key;
  std::filesystem::path manifest;
  /// First `count` train volumes of each listed modality, in order.
  std::vector<std::pair<Modality, int>> shares;
  nlohmann::json trainer;
  std::uint64_t seed = 0;
  std::optional<int> fail_at_round;
};

nlohmann::json to_json(const ClientProcessSpec& spec);
ClientProcessSpec client_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainerConfig& config);
TrainerConfig trainer_config_from_json(const nlohmann::json& j);

/// Body of `fedgin client`: connect, serve, exit.
void run_client_process(const ClientProcessSpec& spec, const std::string& host, std::uint16_t port);

}  // namespace fedgin
