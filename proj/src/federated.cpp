#include "fedgin/federated.hpp"

#include "fedgin/log.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace fedgin {

namespace fs = std::filesystem;
using json = nlohmann::json;

// --- local training -----------------------------------------------------------

LocalTrainer::LocalTrainer(std::string client_id, TrainerConfig config, std::vector<SliceSample> data,
                           std::uint64_t master_seed, std::optional<std::string> rng_key)
    : id_(std::move(client_id)), config_(std::move(config)), data_(std::move(data)) {
  optimizer_.config = config_.optimizer;
  const RngStream base = RngStream(master_seed).child("client").child(rng_key.value_or(id_));
  shuffle_rng_ = base.child("shuffle");
  gin_rng_ = base.child("gin");
  dropout_rng_ = base.child("dropout");
  if (config_.batch_size < 1) throw std::invalid_argument("trainer: batch_size must be >= 1");
  for (const auto& s : data_) {
    if (s.image.shape() != data_.front().image.shape() || s.mask.shape() != s.image.shape()) {
      throw ShapeError("trainer '" + id_ + "': slices must share one [1,H,W] shape");
    }
  }
}

LocalTrainResult LocalTrainer::train(const ModelParams& global, int epochs, double lr) {
  LocalTrainResult result;
  result.num_samples = data_.size();
  if (epochs <= 0) {
    result.params = global.clone();
    return result;
  }
  if (data_.empty()) throw std::runtime_error("trainer '" + id_ + "' has no training data");
  if (!local_) {
    local_ = global.clone();
  } else {
    local_->assign_values(global);
  }
  optimizer_.config.learning_rate = lr;

  const auto& shape = data_.front().image.shape();
  const std::int64_t plane = shape_numel(shape);
  const std::size_t n = data_.size();
  const auto bs = static_cast<std::size_t>(config_.batch_size);
  double loss_sum = 0.0;
  std::int64_t batches = 0;
  std::vector<std::size_t> order(n);
  for (int e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng_.uniform_index(i)]);
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t count = std::min(bs, n - start);
      std::vector<float> xs(count * static_cast<std::size_t>(plane)), ys(xs.size());
      for (std::size_t k = 0; k < count; ++k) {
        const auto& s = data_[order[start + k]];
        std::copy(s.image.data().begin(), s.image.data().end(), xs.begin() + static_cast<std::ptrdiff_t>(k * plane));
        std::copy(s.mask.data().begin(), s.mask.data().end(), ys.begin() + static_cast<std::ptrdiff_t>(k * plane));
      }
      const Shape batch_shape{static_cast<std::int64_t>(count), shape[0], shape[1], shape[2]};
      Tensor x = Tensor::from_data(batch_shape, std::move(xs));
      const Tensor y = Tensor::from_data(batch_shape, std::move(ys));
      if (config_.gin.enabled) x = gin_augment(x, config_.gin, gin_rng_);

      local_->zero_grad();
      Tensor pred = unet_forward(*local_, config_.model, x, Mode::Train, dropout_rng_);
      Tensor loss = combined_loss(pred, y, config_.loss);
      loss.backward();
      adamw_step(*local_, optimizer_);
      loss_sum += loss.item();
      ++batches;
    }
  }
  local_->zero_grad();
  result.params = local_->clone();
  result.metrics["train_loss"] = loss_sum / static_cast<double>(std::max<std::int64_t>(batches, 1));
  result.metrics["batches"] = static_cast<double>(batches);
  result.metrics["epochs"] = epochs;
  return result;
}

// --- aggregation --------------------------------------------------------------

ModelParams fedavg_aggregate(std::vector<ClientUpdate> updates) {
  if (updates.empty()) throw AggregationError("fedavg_aggregate: no updates to aggregate");
  std::stable_sort(updates.begin(), updates.end(),
                   [](const ClientUpdate& a, const ClientUpdate& b) { return a.client_id < b.client_id; });
  std::uint64_t total = 0;
  for (const auto& u : updates) total += u.num_samples;
  if (total == 0) throw AggregationError("fedavg_aggregate: total sample count is zero");
  const ModelParams& ref = updates.front().params;
  for (const auto& u : updates) {
    if (!u.params.congruent_with(ref)) {
      std::ostringstream os;
      os << "fedavg_aggregate: update from '" << u.client_id << "' is not shape-congruent with '"
         << updates.front().client_id << "'";
      for (std::size_t i = 0; i < std::min(u.params.size(), ref.size()); ++i) {
        const auto& a = u.params.entries()[i];
        const auto& b = ref.entries()[i];
        if (a.name != b.name || a.tensor.shape() != b.tensor.shape()) {
          os << " (first difference: " << a.name << shape_str(a.tensor.shape()) << " vs " << b.name
             << shape_str(b.tensor.shape()) << ")";
          break;
        }
      }
      if (u.params.size() != ref.size()) os << " (tensor counts " << u.params.size() << " vs " << ref.size() << ")";
      throw AggregationError(os.str());
    }
  }
  std::vector<double> weights;
  for (const auto& u : updates) weights.push_back(static_cast<double>(u.num_samples) / static_cast<double>(total));

  ModelParams out = ref.clone();
  for (std::size_t t = 0; t < out.size(); ++t) {
    auto dst = out.entries()[t].tensor.mutable_data();
    std::vector<double> acc(dst.size(), 0.0);
    for (std::size_t k = 0; k < updates.size(); ++k) {
      auto src = updates[k].params.entries()[t].tensor.data();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weights[k] * src[i];
    }
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<float>(acc[i]);
  }
  return out;
}

// --- evaluation ---------------------------------------------------------------

VolumePrediction predict_volume(const ModelParams& params, const UNetConfig& model, const Volume& volume,
                                float threshold) {
  NoGradGuard no_grad;
  VolumePrediction vp;
  vp.volume_id = volume.volume_id;
  if (volume.slices.empty()) return vp;
  const auto& shape = volume.slices.front().image.shape();
  const std::int64_t plane = shape_numel(shape);
  std::vector<float> xs;
  xs.reserve(volume.slices.size() * static_cast<std::size_t>(plane));
  for (const auto& s : volume.slices) xs.insert(xs.end(), s.image.data().begin(), s.image.data().end());
  Tensor x = Tensor::from_data({static_cast<std::int64_t>(volume.slices.size()), shape[0], shape[1], shape[2]},
                               std::move(xs));
  RngStream unused(0);
  Tensor pred = unet_forward(params, model, x, Mode::Eval, unused);
  auto p = pred.data();
  for (std::size_t k = 0; k < volume.slices.size(); ++k) {
    const auto& s = volume.slices[k];
    VolumePrediction::Slice sl;
    sl.index = s.slice_index;
    sl.height = shape[1];
    sl.width = shape[2];
    sl.predicted = threshold_mask(p.subspan(k * static_cast<std::size_t>(plane), static_cast<std::size_t>(plane)), threshold);
    sl.truth.resize(static_cast<std::size_t>(plane));
    auto m = s.mask.data();
    for (std::size_t i = 0; i < sl.truth.size(); ++i) sl.truth[i] = m[i] != 0.0f ? 1 : 0;
    vp.slices.push_back(std::move(sl));
  }
  return vp;
}

std::vector<VolumeScore> evaluate_volumes(const ModelParams& params, const UNetConfig& model,
                                          const std::vector<Volume>& volumes, float threshold) {
  std::vector<VolumeScore> out;
  for (const auto& v : volumes) {
    out.push_back({v.volume_id, v.modality, dice_score_3d(predict_volume(params, model, v, threshold))});
  }
  return out;
}

std::map<Modality, double> validation_dice(const ModelParams& params, const UNetConfig& model,
                                           const std::vector<Volume>& volumes, float threshold) {
  std::map<Modality, std::pair<double, int>> acc;
  for (const auto& s : evaluate_volumes(params, model, volumes, threshold)) {
    acc[s.modality].first += s.dice3d;
    acc[s.modality].second += 1;
  }
  std::map<Modality, double> out;
  for (const auto& [m, v] : acc) out[m] = v.first / v.second;
  return out;
}

// --- history -------------------------------------------------------------------

namespace {

json history_to_json(const TrainingHistory& h) {
  json rounds = json::array();
  for (const auto& r : h.rounds) {
    json j{{"round", r.round},
           {"learning_rate", r.learning_rate},
           {"attempts", r.attempts},
           {"participants", r.participants},
           {"declined", r.declined},
           {"client_loss", r.client_loss},
           {"client_samples", r.client_samples},
           {"val_dice", r.val_dice}};
    j["mean_val_dice"] = r.mean_val_dice ? json(*r.mean_val_dice) : json(nullptr);
    rounds.push_back(j);
  }
  return {{"format", "fedgin-history"},   {"version", 1},
          {"completed", h.completed},     {"termination_reason", h.termination_reason},
          {"rounds", rounds},             {"audit_log", h.audit_log}};
}

void record_round(RoundRecord& rec, const std::map<Modality, double>& dice) {
  double s = 0.0;
  for (const auto& [m, d] : dice) {
    rec.val_dice[to_string(m)] = d;
    s += d;
  }
  if (!dice.empty()) rec.mean_val_dice = s / static_cast<double>(dice.size());
}

bool validate_now(const ServerConfig& c, int round) {
  return c.validate_every > 0 && ((round + 1) % c.validate_every == 0 || round + 1 == c.rounds);
}

}  // namespace

void save_history(const TrainingHistory& history, const fs::path& path) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f << history_to_json(history).dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

TrainingHistory load_history(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  const json j = json::parse(f);
  TrainingHistory h;
  h.completed = j.at("completed");
  h.termination_reason = j.at("termination_reason");
  h.audit_log = j.at("audit_log").get<std::vector<std::string>>();
  for (const auto& r : j.at("rounds")) {
    RoundRecord rec;
    rec.round = r.at("round");
    rec.learning_rate = r.at("learning_rate");
    rec.attempts = r.at("attempts");
    rec.participants = r.at("participants").get<std::vector<std::string>>();
    rec.declined = r.at("declined").get<std::vector<std::string>>();
    rec.client_loss = r.at("client_loss").get<std::map<std::string, double>>();
    rec.client_samples = r.at("client_samples").get<std::map<std::string, std::uint64_t>>();
    rec.val_dice = r.at("val_dice").get<std::map<std::string, double>>();
    if (!r.at("mean_val_dice").is_null()) rec.mean_val_dice = r.at("mean_val_dice").get<double>();
    h.rounds.push_back(std::move(rec));
  }
  return h;
}

fs::path checkpoint_path(const fs::path& out_dir, int round) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "round_%04d.fgwt", round);
  return out_dir / "checkpoints" / buf;
}

// --- server ----------------------------------------------------------------------

Server::Server(ServerConfig config, TrainerConfig trainer, ModelParams initial, std::vector<Volume> validation)
    : config_(std::move(config)), trainer_(std::move(trainer)), global_(std::move(initial)),
      validation_(std::move(validation)) {}

FederatedResult Server::run(std::vector<std::unique_ptr<Connection>> links) {
  struct Peer {
    std::string id;
    std::unique_ptr<Connection> link;
    bool alive = true;
  };
  TrainingHistory history;
  auto audit = [&](std::string line) {
    log::debug(line);
    history.audit_log.push_back(std::move(line));
  };
  const bool persist = !config_.out_dir.empty();
  const bool checkpoints = persist && config_.save_checkpoints;
  if (checkpoints) fs::create_directories(config_.out_dir / "checkpoints");

  std::vector<Peer> peers;
  std::set<std::string> ids;
  for (auto& link : links) {
    try {
      RoundMessage m = link->receive();
      if (m.type != MessageType::Register) throw std::runtime_error("expected Register, got " + to_string(m.type));
      if (!ids.insert(m.client_id).second) throw std::runtime_error("duplicate client id '" + m.client_id + "'");
      audit("register " + m.client_id + " samples=" + std::to_string(m.num_samples));
      peers.push_back({m.client_id, std::move(link), true});
    } catch (const std::exception& e) {
      audit(std::string("registration failed: ") + e.what());
    }
  }
  std::sort(peers.begin(), peers.end(), [](const Peer& a, const Peer& b) { return a.id < b.id; });

  PlateauScheduler scheduler(config_.scheduler, trainer_.optimizer.learning_rate);
  auto finish = [&](bool completed, std::string reason) {
    history.completed = completed;
    history.termination_reason = std::move(reason);
    for (auto& p : peers) {
      if (!p.alive) continue;
      try {
        p.link->send(make_shutdown(static_cast<std::uint32_t>(history.rounds.size())));
      } catch (const std::exception&) {
      }
      p.link->close();
    }
    audit("shutdown completed=" + std::string(completed ? "true" : "false"));
    if (persist) save_history(history, config_.out_dir / "history.json");
    return FederatedResult{std::move(history), global_.clone()};
  };

  for (int round = 0; round < config_.rounds; ++round) {
    const auto r32 = static_cast<std::uint32_t>(round);
    int failures = 0;
    int attempts = 0;
    std::vector<RoundMessage> replies;
    for (;;) {
      ++attempts;
      replies.clear();
      std::vector<Peer*> live;
      for (auto& p : peers)
        if (p.alive) live.push_back(&p);
      bool failed = live.empty();
      std::string names;
      for (auto* p : live) names += (names.empty() ? "" : ",") + p->id;
      if (!live.empty()) {
        audit("broadcast round=" + std::to_string(round) + " attempt=" + std::to_string(attempts) + " to=[" + names + "]");
        const Bytes blob = serialize_params(global_);
        for (auto* p : live) {
          try {
            p->link->send(make_global_model(r32, scheduler.learning_rate(),
                                            static_cast<std::uint32_t>(config_.local_epochs), blob));
          } catch (const std::exception& e) {
            audit("client " + p->id + " lost during broadcast: " + e.what());
            p->alive = false;
            failed = true;
          }
        }
        for (auto* p : live) {
          if (!p->alive) continue;
          try {
            RoundMessage m = p->link->receive();
            if (m.round != r32) throw FormatError("reply for round " + std::to_string(m.round));
            if (m.client_id != p->id) throw FormatError("reply carries client id '" + m.client_id + "'");
            if (m.type != MessageType::LocalUpdate && m.type != MessageType::Decline) {
              throw FormatError("unexpected " + to_string(m.type));
            }
            audit("collect round=" + std::to_string(round) + " from=" + p->id + " type=" + to_string(m.type));
            replies.push_back(std::move(m));
          } catch (const std::exception& e) {
            audit("client " + p->id + " lost during collect: " + e.what());
            p->alive = false;
            p->link->close();
            failed = true;
          }
        }
      }
      if (!failed) break;
      ++failures;
      audit("round=" + std::to_string(round) + " attempt=" + std::to_string(attempts) + " aborted");
      log::warn("round ", round, " attempt ", attempts, " aborted after a client disconnect");
      if (failures >= config_.max_consecutive_failures) {
        return finish(false, "round " + std::to_string(round) + " failed " + std::to_string(failures) +
                                 " consecutive attempts");
      }
    }

    RoundRecord rec;
    rec.round = round;
    rec.learning_rate = scheduler.learning_rate();
    rec.attempts = attempts;
    std::vector<ClientUpdate> updates;
    std::string agg_names;
    for (auto& m : replies) {
      if (m.type == MessageType::Decline && m.reason.starts_with(kFailedPrefix)) {
        audit("client " + m.client_id + " reported: " + m.reason);
        return finish(false, "round " + std::to_string(round) + ": client " + m.client_id + " " + m.reason);
      }
      if (m.type == MessageType::Decline) {
        rec.declined.push_back(m.client_id);
        continue;
      }
      rec.participants.push_back(m.client_id);
      rec.client_samples[m.client_id] = m.num_samples;
      if (auto it = m.metrics.find("train_loss"); it != m.metrics.end()) rec.client_loss[m.client_id] = it->second;
      agg_names += (agg_names.empty() ? "" : ",") + m.client_id;
      updates.push_back({m.client_id, deserialize_params(m.params), m.num_samples});
    }
    if (updates.empty()) {
      return finish(false, "round " + std::to_string(round) + ": every client declined");
    }
    global_ = fedavg_aggregate(std::move(updates));
    audit("aggregate round=" + std::to_string(round) + " updates=[" + agg_names + "]");

    if (validate_now(config_, round) && !validation_.empty()) {
      record_round(rec, validation_dice(global_, trainer_.model, validation_, trainer_.loss.threshold));
      if (rec.mean_val_dice) scheduler.step(*rec.mean_val_dice);
    }
    if (checkpoints) save_params(global_, checkpoint_path(config_.out_dir, round));
    history.rounds.push_back(std::move(rec));
    if (persist) save_history(history, config_.out_dir / "history.json");
  }
  return finish(true, "completed");
}

// --- client ------------------------------------------------------------------------

void serve_client(Connection& connection, LocalTrainer& trainer, const ClientHooks& hooks) {
  connection.send(make_register(trainer.id(), trainer.num_samples()));
  for (;;) {
    RoundMessage m = connection.receive();
    if (m.type == MessageType::Shutdown) return;
    if (m.type != MessageType::GlobalModel) {
      throw FormatError("client '" + trainer.id() + "' got unexpected " + to_string(m.type));
    }
    if (hooks.on_global_model) hooks.on_global_model(m.round);
    if (trainer.empty()) {
      connection.send(make_decline(m.round, trainer.id(), "no local training data"));
      continue;
    }
    const ModelParams global = deserialize_params(m.params);
    LocalTrainResult r;
    try {
      r = trainer.train(global, static_cast<int>(m.local_epochs), m.learning_rate);
    } catch (const NonFiniteError& e) {
      connection.send(make_decline(m.round, trainer.id(), std::string(kFailedPrefix) + e.what()));
      continue;
    } catch (const NonFiniteGradientError& e) {
      connection.send(make_decline(m.round, trainer.id(), std::string(kFailedPrefix) + e.what()));
      continue;
    }
    connection.send(make_local_update(m.round, trainer.id(), r.num_samples, std::move(r.metrics),
                                      serialize_params(r.params)));
  }
}

std::string to_string(TransportKind t) { return t == TransportKind::InProcess ? "inprocess" : "socket"; }

TransportKind parse_transport(const std::string& s) {
  if (s == "inprocess") return TransportKind::InProcess;
  if (s == "socket") return TransportKind::Socket;
  throw std::invalid_argument("unknown transport '" + s + "' (expected inprocess or socket)");
}

ModelParams initial_model(const UNetConfig& model, std::uint64_t seed) {
  RngStream rng = RngStream(seed).child("model-init");
  return build_model(model, rng);
}

FederatedResult run_federated(const FederatedConfig& config, const ModelParams& initial,
                              std::vector<ClientSpec> clients, std::vector<Volume> validation,
                              TransportKind transport, std::shared_ptr<WireTap> tap) {
  if (clients.empty()) throw std::invalid_argument("run_federated: need at least one client");
  std::vector<std::unique_ptr<LocalTrainer>> trainers;
  for (auto& c : clients) {
    trainers.push_back(std::make_unique<LocalTrainer>(c.id, config.trainer, std::move(c.train), config.seed, c.rng_key));
  }

  std::vector<std::unique_ptr<Connection>> server_side;
  std::vector<std::thread> workers;
  std::vector<std::string> worker_errors(trainers.size());
  std::unique_ptr<SocketListener> listener;
  if (transport == TransportKind::Socket) listener = std::make_unique<SocketListener>("127.0.0.1", 0);

  for (std::size_t i = 0; i < trainers.size(); ++i) {
    if (transport == TransportKind::InProcess) {
      auto [server_end, client_end] = make_inprocess_pair();
      if (tap) {
        server_end->attach_tap(tap);
        client_end->attach_tap(tap);
      }
      server_side.push_back(std::move(server_end));
      workers.emplace_back([&, i, conn = std::shared_ptr<Connection>(std::move(client_end))] {
        try {
          serve_client(*conn, *trainers[i]);
        } catch (const std::exception& e) {
          worker_errors[i] = e.what();
          conn->close();
        }
      });
    } else {
      const std::uint16_t port = listener->port();
      workers.emplace_back([&, i, port] {
        try {
          auto conn = connect_socket("127.0.0.1", port);
          if (tap) conn->attach_tap(tap);
          serve_client(*conn, *trainers[i]);
        } catch (const std::exception& e) {
          worker_errors[i] = e.what();
        }
      });
      auto conn = listener->accept(std::chrono::seconds(30));
      conn->set_receive_timeout(config.server.receive_timeout);
      if (tap) conn->attach_tap(tap);
      server_side.push_back(std::move(conn));
    }
  }

  Server server(config.server, config.trainer, initial.clone(), std::move(validation));
  FederatedResult result;
  try {
    result = server.run(std::move(server_side));
  } catch (...) {
    for (auto& w : workers) w.join();
    throw;
  }
  for (auto& w : workers) w.join();
  for (std::size_t i = 0; i < worker_errors.size(); ++i) {
    if (!worker_errors[i].empty()) log::warn("client ", trainers[i]->id(), " stopped: ", worker_errors[i]);
  }
  return result;
}

FederatedResult run_centralized(const FederatedConfig& config, const ModelParams& initial, ClientSpec pooled,
                                std::vector<Volume> validation) {
  LocalTrainer trainer(pooled.id, config.trainer, std::move(pooled.train), config.seed, pooled.rng_key);
  if (trainer.empty()) throw std::invalid_argument("run_centralized: no training data");
  const ServerConfig& sc = config.server;
  const bool persist = !sc.out_dir.empty();
  const bool checkpoints = persist && sc.save_checkpoints;
  if (checkpoints) fs::create_directories(sc.out_dir / "checkpoints");
  PlateauScheduler scheduler(sc.scheduler, config.trainer.optimizer.learning_rate);
  FederatedResult result;
  ModelParams params = initial.clone();
  for (int round = 0; round < sc.rounds; ++round) {
    RoundRecord rec;
    rec.round = round;
    rec.learning_rate = scheduler.learning_rate();
    LocalTrainResult r = trainer.train(params, sc.local_epochs, scheduler.learning_rate());
    params = std::move(r.params);
    rec.participants.push_back(trainer.id());
    rec.client_samples[trainer.id()] = r.num_samples;
    if (auto it = r.metrics.find("train_loss"); it != r.metrics.end()) rec.client_loss[trainer.id()] = it->second;
    if (validate_now(sc, round) && !validation.empty()) {
      record_round(rec, validation_dice(params, config.trainer.model, validation, config.trainer.loss.threshold));
      if (rec.mean_val_dice) scheduler.step(*rec.mean_val_dice);
    }
    if (checkpoints) save_params(params, checkpoint_path(sc.out_dir, round));
    result.history.rounds.push_back(std::move(rec));
    if (persist) save_history(result.history, sc.out_dir / "history.json");
  }
  result.history.completed = true;
  result.history.termination_reason = "completed";
  if (persist) save_history(result.history, sc.out_dir / "history.json");
  result.final_params = std::move(params);
  return result;
}

}  // namespace fedgin
