#pragma once

#include "fedgin/data.hpp"
#include "fedgin/gin.hpp"
#include "fedgin/losses.hpp"
#include "fedgin/optim.hpp"
#include "fedgin/transport.hpp"
#include "fedgin/unet.hpp"

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace fedgin {

struct TrainerConfig {
  UNetConfig model;
  LossConfig loss;
  GinConfig gin = GinConfig::disabled();
  AdamWConfig optimizer;
  int batch_size = 8;
};

struct LocalTrainResult {
  ModelParams params;
  std::uint64_t num_samples = 0;
  std::map<std::string, double> metrics;
};

/// A client's private training state: its slices, optimizer moments (kept
/// across rounds) and three RNG streams (shuffle, gin, dropout) derived from
/// (master_seed, rng_key).
class LocalTrainer {
 public:
  LocalTrainer(std::string client_id, TrainerConfig config, std::vector<SliceSample> data,
               std::uint64_t master_seed, std::optional<std::string> rng_key = std::nullopt);

  /// Loads `global`, runs `epochs` passes over shuffled batches at
  /// learning rate `lr` and returns the resulting parameters. Each batch is
  /// GIN-augmented first when enabled. epochs == 0 returns `global` as is.
  LocalTrainResult train(const ModelParams& global, int epochs, double lr);

  [[nodiscard]] const std::string& id() const { return id_; }
  [[nodiscard]] std::uint64_t num_samples() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }
  [[nodiscard]] const OptimizerState& optimizer_state() const { return optimizer_; }

 private:
  std::string id_;
  TrainerConfig config_;
  std::vector<SliceSample> data_;
  OptimizerState optimizer_;
  RngStream shuffle_rng_, gin_rng_, dropout_rng_;
  std::optional<ModelParams> local_;
};

struct ClientUpdate {
  std::string client_id;
  ModelParams params;
  std::uint64_t num_samples = 0;
};

class AggregationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sample-weighted elementwise mean, accumulated in double over updates
/// sorted by client_id. Running statistics are averaged like weights.
ModelParams fedavg_aggregate(std::vector<ClientUpdate> updates);

// --- evaluation -------------------------------------------------------------

struct VolumeScore {
  std::string volume_id;
  Modality modality = Modality::A;
  double dice3d = 0.0;
};

VolumePrediction predict_volume(const ModelParams& params, const UNetConfig& model, const Volume& volume,
                                float threshold);
std::vector<VolumeScore> evaluate_volumes(const ModelParams& params, const UNetConfig& model,
                                          const std::vector<Volume>& volumes, float threshold);
/// Mean 3D Dice per modality present in `volumes`.
std::map<Modality, double> validation_dice(const ModelParams& params, const UNetConfig& model,
                                           const std::vector<Volume>& volumes, float threshold);

// --- federated run ----------------------------------------------------------

struct ServerConfig {
  int rounds = 30;
  int local_epochs = 1;
  PlateauConfig scheduler;
  int validate_every = 1;
  /// Checkpoints and history go here when non-empty.
  std::filesystem::path out_dir;
  bool save_checkpoints = true;
  std::chrono::milliseconds receive_timeout{std::chrono::minutes(30)};
  int max_consecutive_failures = 2;
};

struct RoundRecord {
  int round = 0;
  double learning_rate = 0.0;
  int attempts = 1;
  std::vector<std::string> participants;
  std::vector<std::string> declined;
  std::map<std::string, double> client_loss;
  std::map<std::string, std::uint64_t> client_samples;
  std::map<std::string, double> val_dice;  // by modality
  std::optional<double> mean_val_dice;
};

struct TrainingHistory {
  std::vector<RoundRecord> rounds;
  bool completed = false;
  std::string termination_reason;
  std::vector<std::string> audit_log;
};

struct FederatedResult {
  TrainingHistory history;
  ModelParams final_params;
};

void save_history(const TrainingHistory& history, const std::filesystem::path& path);
TrainingHistory load_history(const std::filesystem::path& path);
std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, int round);

/// Synchronous FedAvg coordinator over already-established links.
class Server {
 public:
  Server(ServerConfig config, TrainerConfig trainer, ModelParams initial, std::vector<Volume> validation);

  /// Register* -> (Broadcast -> Collect -> Aggregate)^R -> Shutdown. A round
  /// in which any client drops is aborted and retried with the survivors;
  /// `max_consecutive_failures` failed attempts end the run early with the
  /// history gathered so far.
  FederatedResult run(std::vector<std::unique_ptr<Connection>> links);

 private:
  ServerConfig config_;
  TrainerConfig trainer_;
  ModelParams global_;
  std::vector<Volume> validation_;
};

/// Decline reasons with this prefix mean local training broke (e.g. produced
/// non-finite values); the server stops the run instead of carrying on.
inline constexpr std::string_view kFailedPrefix = "failed: ";

struct ClientHooks {
  /// Called when a GlobalModel arrives, before training.
  std::function<void(std::uint32_t round)> on_global_model;
};

/// Client side of the protocol: Register, then answer each GlobalModel with a
/// LocalUpdate (or Decline when the local dataset is empty) until Shutdown.
void serve_client(Connection& connection, LocalTrainer& trainer, const ClientHooks& hooks = {});

struct ClientSpec {
  std::string id;
  std::vector<SliceSample> train;
  std::optional<std::string> rng_key;
};

enum class TransportKind { InProcess, Socket };
std::string to_string(TransportKind t);
TransportKind parse_transport(const std::string& s);

struct FederatedConfig {
  ServerConfig server;
  TrainerConfig trainer;
  std::uint64_t seed = 0;
};

ModelParams initial_model(const UNetConfig& model, std::uint64_t seed);

/// Runs server and clients in this process, clients on their own threads,
/// talking over in-memory channels or loopback TCP.
FederatedResult run_federated(const FederatedConfig& config, const ModelParams& initial,
                              std::vector<ClientSpec> clients, std::vector<Volume> validation,
                              TransportKind transport, std::shared_ptr<WireTap> tap = nullptr);

/// A single trainer over pooled data for rounds * local_epochs epochs, with the
/// same per-round validation and scheduling as the federated server.
FederatedResult run_centralized(const FederatedConfig& config, const ModelParams& initial, ClientSpec pooled,
                                std::vector<Volume> validation);

}  // namespace fedgin
