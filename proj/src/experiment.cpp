#include "fedgin/experiment.hpp"

#include "fedgin/log.hpp"
#include "fedgin/serialize.hpp"

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <sys/wait.h>
#include <unistd.h>

namespace fedgin {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(Scenario s) { return s == Scenario::Complete ? "complete" : "limited"; }

Scenario parse_scenario(const std::string& s) {
  if (s == "complete") return Scenario::Complete;
  if (s == "limited") return Scenario::Limited;
  throw std::invalid_argument("unknown scenario '" + s + "' (expected complete or limited)");
}

std::string Method::name() const {
  std::string base;
  switch (kind) {
    case MethodKind::LocalA: base = "local_A"; break;
    case MethodKind::LocalB: base = "local_B"; break;
    case MethodKind::Central: base = "central"; break;
    case MethodKind::Fed: base = "fed"; break;
  }
  return gin ? base + "_gin" : base;
}

Method Method::parse(const std::string& s) {
  std::string base = s;
  bool gin = false;
  if (base.size() > 4 && base.ends_with("_gin")) {
    base.resize(base.size() - 4);
    gin = true;
  }
  if (base == "local_A") return {MethodKind::LocalA, gin};
  if (base == "local_B") return {MethodKind::LocalB, gin};
  if (base == "central") return {MethodKind::Central, gin};
  if (base == "fed") return {MethodKind::Fed, gin};
  throw std::invalid_argument("unknown method '" + s +
                              "' (expected local_A, local_B, central, central_gin, fed or fed_gin)");
}

void ExperimentConfig::validate() const {
  if (rounds < 0) throw std::invalid_argument("config: rounds must be >= 0");
  if (local_epochs < 0) throw std::invalid_argument("config: local_epochs must be >= 0");
  if (seeds.empty()) throw std::invalid_argument("config: at least one seed is required");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (validate_every < 0) throw std::invalid_argument("config: validate_every must be >= 0");
  if (limited_b_volumes < 1) throw std::invalid_argument("config: limited.b_volumes must be >= 1");
  for (int k : ladder)
    if (k < 0) throw std::invalid_argument("config: ladder entries must be >= 0");
  if (scenario == Scenario::Limited && ladder.empty()) throw std::invalid_argument("config: empty ladder");
  for (const auto* cap : {&train_volumes, &val_volumes, &test_volumes})
    if (*cap && **cap < 0) throw std::invalid_argument("config: volume caps must be >= 0");
  model.validate();
  loss.validate();
  gin.validate();
}

std::vector<Method> ExperimentConfig::effective_methods() const {
  std::vector<Method> base = methods;
  if (base.empty() && scenario == Scenario::Limited) base = {{MethodKind::Fed, false}, {MethodKind::Fed, true}};
  if (base.empty()) {
    base = {{MethodKind::LocalA, false}, {MethodKind::LocalB, false}, {MethodKind::Central, false},
            {MethodKind::Central, true},  {MethodKind::Fed, false},    {MethodKind::Fed, true}};
  }
  if (!gin_override) return base;
  // forcing the switch can fold e.g. fed and fed_gin into one entry
  std::vector<Method> out;
  for (auto m : base) {
    m.gin = *gin_override;
    if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
  }
  return out;
}

// --- config json ------------------------------------------------------------------

namespace {

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
      throw std::invalid_argument("config: unknown key '" + k + "' in " + where);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw std::invalid_argument(std::string("config: bad value for '") + key + "': " + it->dump());
    }
  }
}

template <typename T>
void read_opt(const json& j, const char* key, std::optional<T>& out) {
  if (auto it = j.find(key); it != j.end()) {
    if (it->is_null()) {
      out.reset();
    } else {
      T v{};
      read(j, key, v);
      out = v;
    }
  }
}

template <typename T>
json opt_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

json model_json(const UNetConfig& m) {
  return {{"in_channels", m.in_channels}, {"out_channels", m.out_channels}, {"base_channels", m.base_channels},
          {"depth", m.depth},             {"dropout", m.dropout_p},        {"bottleneck_dropout", m.bottleneck_dropout_p},
          {"leaky_slope", m.leaky_slope}, {"bn_momentum", m.bn_momentum},  {"bn_epsilon", m.bn_epsilon},
          {"standardize_input", m.standardize_input}};
}

void model_from(const json& j, UNetConfig& m) {
  check_keys(j, {"in_channels", "out_channels", "base_channels", "depth", "dropout", "bottleneck_dropout",
                 "leaky_slope", "bn_momentum", "bn_epsilon", "standardize_input"},
             "model");
  read(j, "in_channels", m.in_channels);
  read(j, "out_channels", m.out_channels);
  read(j, "base_channels", m.base_channels);
  read(j, "depth", m.depth);
  read(j, "dropout", m.dropout_p);
  read(j, "bottleneck_dropout", m.bottleneck_dropout_p);
  read(j, "leaky_slope", m.leaky_slope);
  read(j, "bn_momentum", m.bn_momentum);
  read(j, "bn_epsilon", m.bn_epsilon);
  read(j, "standardize_input", m.standardize_input);
}

json loss_json(const LossConfig& l) {
  return {{"focal_gamma", l.focal_gamma},   {"focal_alpha", l.focal_alpha}, {"dice_smooth", l.dice_smooth},
          {"focal_weight", l.focal_weight}, {"dice_weight", l.dice_weight}, {"threshold", l.threshold}};
}

void loss_from(const json& j, LossConfig& l) {
  check_keys(j, {"focal_gamma", "focal_alpha", "dice_smooth", "focal_weight", "dice_weight", "threshold"}, "loss");
  read(j, "focal_gamma", l.focal_gamma);
  read(j, "focal_alpha", l.focal_alpha);
  read(j, "dice_smooth", l.dice_smooth);
  read(j, "focal_weight", l.focal_weight);
  read(j, "dice_weight", l.dice_weight);
  read(j, "threshold", l.threshold);
}

json gin_json(const GinConfig& g) {
  return {{"layers", g.num_layers},     {"hidden_channels", g.hidden_channels}, {"kernel_size", g.kernel_size},
          {"slope", g.leaky_slope},     {"fixed_alpha", opt_json(g.fixed_alpha)}, {"per_sample", g.per_sample}};
}

void gin_from(const json& j, GinConfig& g, std::optional<bool>& enabled) {
  check_keys(j, {"enabled", "layers", "hidden_channels", "kernel_size", "slope", "fixed_alpha", "per_sample"}, "gin");
  read_opt(j, "enabled", enabled);
  read(j, "layers", g.num_layers);
  read(j, "hidden_channels", g.hidden_channels);
  read(j, "kernel_size", g.kernel_size);
  read(j, "slope", g.leaky_slope);
  read_opt(j, "fixed_alpha", g.fixed_alpha);
  read(j, "per_sample", g.per_sample);
}

json optimizer_json(const AdamWConfig& o) {
  return {{"learning_rate", o.learning_rate}, {"weight_decay", o.weight_decay}, {"beta1", o.beta1},
          {"beta2", o.beta2},               {"epsilon", o.epsilon}};
}

void optimizer_from(const json& j, AdamWConfig& o) {
  check_keys(j, {"learning_rate", "weight_decay", "beta1", "beta2", "epsilon"}, "optimizer");
  read(j, "learning_rate", o.learning_rate);
  read(j, "weight_decay", o.weight_decay);
  read(j, "beta1", o.beta1);
  read(j, "beta2", o.beta2);
  read(j, "epsilon", o.epsilon);
}

json scheduler_json(const PlateauConfig& p) {
  return {{"enabled", p.enabled},     {"factor", p.factor}, {"patience", p.patience},
          {"min_delta", p.min_delta}, {"min_lr", p.min_lr}};
}

void scheduler_from(const json& j, PlateauConfig& p) {
  check_keys(j, {"enabled", "factor", "patience", "min_delta", "min_lr"}, "scheduler");
  read(j, "enabled", p.enabled);
  read(j, "factor", p.factor);
  read(j, "patience", p.patience);
  read(j, "min_delta", p.min_delta);
  read(j, "min_lr", p.min_lr);
}

}  // namespace

json to_json(const TrainerConfig& c) {
  return {{"model", model_json(c.model)},
          {"loss", loss_json(c.loss)},
          {"gin", [&] {
             json g = gin_json(c.gin);
             g["enabled"] = c.gin.enabled;
             return g;
           }()},
          {"optimizer", optimizer_json(c.optimizer)},
          {"batch_size", c.batch_size}};
}

TrainerConfig trainer_config_from_json(const json& j) {
  check_keys(j, {"model", "loss", "gin", "optimizer", "batch_size"}, "trainer");
  TrainerConfig c;
  if (j.contains("model")) model_from(j["model"], c.model);
  if (j.contains("loss")) loss_from(j["loss"], c.loss);
  if (j.contains("gin")) {
    std::optional<bool> enabled;
    gin_from(j["gin"], c.gin, enabled);
    c.gin.enabled = enabled.value_or(false);
  }
  if (j.contains("optimizer")) optimizer_from(j["optimizer"], c.optimizer);
  read(j, "batch_size", c.batch_size);
  return c;
}

json to_json(const ExperimentConfig& c) {
  json methods = json::array();
  for (const auto& m : c.methods) methods.push_back(m.name());
  return {{"scenario", to_string(c.scenario)},
          {"methods", methods},
          {"manifest", c.manifest.string()},
          {"out_dir", c.out_dir.string()},
          {"rounds", c.rounds},
          {"local_epochs", c.local_epochs},
          {"seeds", c.seeds},
          {"validate_every", c.validate_every},
          {"transport", to_string(c.transport)},
          {"parallel_seeds", c.parallel_seeds},
          {"save_checkpoints", c.save_checkpoints},
          {"batch_size", c.batch_size},
          {"model", model_json(c.model)},
          {"loss", loss_json(c.loss)},
          {"gin", [&] {
             json g = gin_json(c.gin);
             g["enabled"] = opt_json(c.gin_override);
             return g;
           }()},
          {"optimizer", optimizer_json(c.optimizer)},
          {"scheduler", scheduler_json(c.scheduler)},
          {"limited", {{"ladder", c.ladder}, {"b_volumes", c.limited_b_volumes}}},
          {"train_volumes", opt_json(c.train_volumes)},
          {"val_volumes", opt_json(c.val_volumes)},
          {"test_volumes", opt_json(c.test_volumes)},
          {"single_client", c.single_client}};
}

ExperimentConfig experiment_config_from_json(const json& j, ExperimentConfig c) {
  check_keys(j,
             {"scenario", "methods", "manifest", "out_dir", "rounds", "local_epochs", "seeds", "validate_every",
              "transport", "parallel_seeds", "save_checkpoints", "batch_size", "model", "loss", "gin", "optimizer",
              "scheduler", "limited", "train_volumes", "val_volumes", "test_volumes", "single_client"},
             "config");
  if (j.contains("scenario")) c.scenario = parse_scenario(j["scenario"].get<std::string>());
  if (j.contains("methods")) {
    c.methods.clear();
    for (const auto& m : j["methods"]) c.methods.push_back(Method::parse(m.get<std::string>()));
  }
  std::string path;
  if (j.contains("manifest")) {
    read(j, "manifest", path);
    c.manifest = path;
  }
  if (j.contains("out_dir")) {
    read(j, "out_dir", path);
    c.out_dir = path;
  }
  read(j, "rounds", c.rounds);
  read(j, "local_epochs", c.local_epochs);
  read(j, "seeds", c.seeds);
  read(j, "validate_every", c.validate_every);
  if (j.contains("transport")) c.transport = parse_transport(j["transport"].get<std::string>());
  read(j, "parallel_seeds", c.parallel_seeds);
  read(j, "save_checkpoints", c.save_checkpoints);
  read(j, "batch_size", c.batch_size);
  if (j.contains("model")) model_from(j["model"], c.model);
  if (j.contains("loss")) loss_from(j["loss"], c.loss);
  if (j.contains("gin")) gin_from(j["gin"], c.gin, c.gin_override);
  if (j.contains("optimizer")) optimizer_from(j["optimizer"], c.optimizer);
  if (j.contains("scheduler")) scheduler_from(j["scheduler"], c.scheduler);
  if (j.contains("limited")) {
    check_keys(j["limited"], {"ladder", "b_volumes"}, "limited");
    read(j["limited"], "ladder", c.ladder);
    read(j["limited"], "b_volumes", c.limited_b_volumes);
  }
  read_opt(j, "train_volumes", c.train_volumes);
  read_opt(j, "val_volumes", c.val_volumes);
  read_opt(j, "test_volumes", c.test_volumes);
  read(j, "single_client", c.single_client);
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

json to_json(const ClientProcessSpec& s) {
  json shares = json::array();
  for (const auto& [m, n] : s.shares) shares.push_back({{"modality", to_string(m)}, {"volumes", n}});
  return {{"client_id", s.client_id}, {"rng_key", opt_json(s.rng_key)}, {"manifest", s.manifest.string()},
          {"shares", shares},         {"trainer", s.trainer},           {"seed", s.seed},
          {"fail_at_round", opt_json(s.fail_at_round)}};
}

ClientProcessSpec client_spec_from_json(const json& j) {
  check_keys(j, {"client_id", "rng_key", "manifest", "shares", "trainer", "seed", "fail_at_round"}, "client spec");
  ClientProcessSpec s;
  s.client_id = j.at("client_id").get<std::string>();
  read_opt(j, "rng_key", s.rng_key);
  s.manifest = j.at("manifest").get<std::string>();
  for (const auto& e : j.at("shares")) {
    s.shares.emplace_back(parse_modality(e.at("modality").get<std::string>()), e.at("volumes").get<int>());
  }
  s.trainer = j.at("trainer");
  s.seed = j.at("seed").get<std::uint64_t>();
  read_opt(j, "fail_at_round", s.fail_at_round);
  return s;
}

// --- csv ------------------------------------------------------------------------------

namespace {

constexpr const char* kCsvHeader = "schema_version,scenario,method,gin,seed,train_a,train_b,round,split,modality,volume_id,dice3d";

void check_field(const std::string& s, const char* what) {
  if (s.empty() || s.find_first_of(",\n\r\"") != std::string::npos) {
    throw std::invalid_argument(std::string("metrics: field '") + what + "' is empty or holds CSV metacharacters: '" +
                                s + "'");
  }
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string metrics_csv_body(const std::vector<MetricsRecord>& records) {
  std::ostringstream os;
  os << kCsvHeader << '\n';
  for (const auto& r : records) {
    check_field(r.scenario, "scenario");
    check_field(r.method, "method");
    check_field(r.split, "split");
    check_field(r.modality, "modality");
    check_field(r.volume_id, "volume_id");
    if (!(r.dice3d >= 0.0 && r.dice3d <= 1.0)) {
      throw std::invalid_argument("metrics: dice3d outside [0,1] for " + r.volume_id);
    }
    os << kMetricsSchemaVersion << ',' << r.scenario << ',' << r.method << ',' << (r.gin ? "true" : "false") << ','
       << r.seed << ',' << r.train_a << ',' << r.train_b << ',' << r.round << ',' << r.split << ',' << r.modality
       << ',' << r.volume_id << ',' << format_double(r.dice3d) << '\n';
  }
  return os.str();
}

void write_metrics_csv(const std::vector<MetricsRecord>& records, const fs::path& path) {
  const std::string body = metrics_csv_body(records);
  const std::time_t now = std::time(nullptr);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f << "# fedgin metrics v" << kMetricsSchemaVersion << " generated " << stamp << '\n' << body;
  }
  fs::rename(tmp, path);
}

std::vector<MetricsRecord> read_metrics_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open metrics file " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  bool header = false;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != kCsvHeader) throw FormatError(path.string() + ": unexpected header '" + line + "'");
      header = true;
      continue;
    }
    const auto c = split_csv(line);
    auto where = [&] { return path.string() + ":" + std::to_string(lineno); };
    if (c.size() != 12) throw FormatError(where() + ": expected 12 fields, got " + std::to_string(c.size()));
    try {
      if (std::stoi(c[0]) != kMetricsSchemaVersion) throw FormatError(where() + ": unsupported schema version " + c[0]);
      MetricsRecord r;
      r.scenario = c[1];
      r.method = c[2];
      if (c[3] != "true" && c[3] != "false") throw FormatError(where() + ": gin must be true or false");
      r.gin = c[3] == "true";
      r.seed = std::stoull(c[4]);
      r.train_a = std::stoi(c[5]);
      r.train_b = std::stoi(c[6]);
      r.round = std::stoi(c[7]);
      r.split = c[8];
      r.modality = c[9];
      r.volume_id = c[10];
      r.dice3d = std::stod(c[11]);
      for (const auto* s : {&r.scenario, &r.method, &r.split, &r.modality, &r.volume_id}) {
        if (s->empty()) throw FormatError(where() + ": empty field");
      }
      if (!(r.dice3d >= 0.0 && r.dice3d <= 1.0)) throw FormatError(where() + ": dice3d outside [0,1]");
      out.push_back(std::move(r));
    } catch (const std::logic_error& e) {
      throw FormatError(where() + ": " + e.what());
    }
  }
  if (!header) throw FormatError(path.string() + ": missing header");
  return out;
}

// --- summary ------------------------------------------------------------------------

std::vector<SummaryEntry> summarize(const std::vector<MetricsRecord>& records) {
  std::vector<SummaryEntry> out;
  std::vector<std::vector<const MetricsRecord*>> members;
  for (const auto& r : records) {
    auto it = std::find_if(out.begin(), out.end(), [&](const SummaryEntry& e) {
      return e.scenario == r.scenario && e.method == r.method && e.train_a == r.train_a && e.train_b == r.train_b &&
             e.modality == r.modality;
    });
    if (it == out.end()) {
      out.push_back({r.scenario, r.method, r.train_a, r.train_b, r.modality, 0, 0.0, 0.0, {}});
      members.emplace_back();
      it = out.end() - 1;
    }
    members[static_cast<std::size_t>(it - out.begin())].push_back(&r);
  }
  for (std::size_t g = 0; g < out.size(); ++g) {
    auto& e = out[g];
    const auto& m = members[g];
    e.count = m.size();
    double sum = 0.0;
    for (const auto* r : m) sum += r->dice3d;
    e.mean = sum / static_cast<double>(m.size());
    double ss = 0.0;
    for (const auto* r : m) ss += (r->dice3d - e.mean) * (r->dice3d - e.mean);
    e.std = std::sqrt(ss / static_cast<double>(m.size()));
    std::map<std::uint64_t, std::pair<double, int>> seeds;
    for (const auto* r : m) {
      seeds[r->seed].first += r->dice3d;
      seeds[r->seed].second += 1;
    }
    for (const auto& [s, v] : seeds) e.per_seed_mean[s] = v.first / v.second;
  }
  return out;
}

json summary_to_json(const ScenarioResult& result) {
  json entries = json::array();
  for (const auto& e : result.summary) {
    json seeds = json::object();
    for (const auto& [s, v] : e.per_seed_mean) seeds[std::to_string(s)] = v;
    entries.push_back({{"scenario", e.scenario},
                       {"method", e.method},
                       {"train_a", e.train_a},
                       {"train_b", e.train_b},
                       {"modality", e.modality},
                       {"count", e.count},
                       {"mean", e.mean},
                       {"std", e.std},
                       {"per_seed_mean", seeds}});
  }
  json runs = json::array();
  for (const auto& r : result.runs) {
    runs.push_back({{"method", r.method},
                    {"seed", r.seed},
                    {"train_a", r.train_a},
                    {"train_b", r.train_b},
                    {"status", r.status},
                    {"message", r.message},
                    {"rounds_completed", r.rounds_completed}});
  }
  return {{"format", "fedgin-summary"}, {"version", 1}, {"entries", entries}, {"runs", runs}};
}

// --- runs -----------------------------------------------------------------------------

namespace {

struct Pools {
  DatasetManifest manifest;
  std::map<std::pair<Modality, Split>, std::vector<Volume>> volumes;

  const std::vector<Volume>& get(Modality m, Split s) const {
    static const std::vector<Volume> none;
    auto it = volumes.find({m, s});
    return it == volumes.end() ? none : it->second;
  }
};

std::vector<SliceSample> flatten(const std::vector<Volume>& vols, int count) {
  if (static_cast<std::size_t>(count) > vols.size()) {
    throw std::invalid_argument("dataset has only " + std::to_string(vols.size()) + " train volumes, " +
                                std::to_string(count) + " requested");
  }
  std::vector<SliceSample> out;
  for (int i = 0; i < count; ++i) out.insert(out.end(), vols[i].slices.begin(), vols[i].slices.end());
  return out;
}

DatasetManifest open_manifest(const ExperimentConfig& config) {
  if (config.manifest.empty()) throw std::invalid_argument("config: no dataset manifest given");
  fs::path p = config.manifest;
  if (fs::is_directory(p)) p /= "manifest.json";
  if (!fs::exists(p)) throw std::runtime_error("dataset manifest not found: " + p.string());
  return load_manifest(p);
}

Pools load_pools(const ExperimentConfig& config) {
  Pools pools;
  pools.manifest = open_manifest(config);
  for (Modality m : {Modality::A, Modality::B}) {
    for (Split s : {Split::Train, Split::Val, Split::Test}) {
      std::optional<int> cap;
      if (s == Split::Val) cap = config.val_volumes;
      if (s == Split::Test) cap = config.test_volumes;
      pools.volumes[{m, s}] = load_volumes(pools.manifest, m, s, cap);
    }
  }
  return pools;
}

struct Job {
  Method method;
  std::uint64_t seed = 0;
  int train_a = 0;
  int train_b = 0;
};

TrainerConfig trainer_for(const ExperimentConfig& c, bool gin) {
  TrainerConfig t;
  t.model = c.model;
  t.loss = c.loss;
  t.gin = c.gin;
  t.gin.enabled = gin;
  t.optimizer = c.optimizer;
  t.batch_size = c.batch_size;
  return t;
}

std::vector<MetricsRecord> score(const ModelParams& params, const ExperimentConfig& config,
                                 const std::vector<Volume>& volumes, Split split, const std::string& label, bool gin,
                                 std::uint64_t seed, int train_a, int train_b, int round) {
  std::vector<MetricsRecord> out;
  for (const auto& s : evaluate_volumes(params, config.model, volumes, config.loss.threshold)) {
    out.push_back({to_string(config.scenario), label, gin, seed, train_a, train_b, round, to_string(split),
                   to_string(s.modality), s.volume_id, s.dice3d});
  }
  return out;
}

FederatedResult run_federated_processes(const ExperimentConfig& config, const FederatedConfig& fc,
                                        const ModelParams& initial, const std::vector<ClientProcessSpec>& specs,
                                        std::vector<Volume> validation, const fs::path& run_dir) {
  const fs::path exe = *config.client_executable;
  SocketListener listener("127.0.0.1", 0);
  const std::string port = std::to_string(listener.port());
  fs::create_directories(run_dir / "clients");
  std::vector<pid_t> children;
  auto reap = [&](bool kill_first) {
    for (pid_t pid : children) {
      if (kill_first) ::kill(pid, SIGKILL);
      int status = 0;
      while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
      }
      if (WIFSIGNALED(status)) log::info("client process ", pid, " ended by signal ", WTERMSIG(status));
    }
    children.clear();
  };
  for (const auto& spec : specs) {
    const fs::path spec_path = run_dir / "clients" / (spec.client_id + ".json");
    {
      std::ofstream f(spec_path, std::ios::trunc);
      f << to_json(spec).dump(2) << '\n';
    }
    std::vector<std::string> args{exe.string(), "client", "--spec", spec_path.string(), "--port", port};
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    const pid_t pid = ::fork();
    if (pid < 0) {
      reap(true);
      throw std::runtime_error(std::string("fork failed: ") + std::strerror(errno));
    }
    if (pid == 0) {
      ::execv(argv[0], argv.data());
      std::fprintf(stderr, "exec %s failed: %s\n", argv[0], std::strerror(errno));
      ::_exit(127);
    }
    children.push_back(pid);
  }
  std::vector<std::unique_ptr<Connection>> links;
  try {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      auto conn = listener.accept(std::chrono::seconds(60));
      conn->set_receive_timeout(fc.server.receive_timeout);
      links.push_back(std::move(conn));
    }
  } catch (...) {
    reap(true);
    throw;
  }
  Server server(fc.server, fc.trainer, initial.clone(), std::move(validation));
  FederatedResult result;
  try {
    result = server.run(std::move(links));
  } catch (...) {
    reap(true);
    throw;
  }
  reap(false);
  return result;
}

struct JobResult {
  RunOutcome outcome;
  std::vector<MetricsRecord> records;
};

JobResult run_job(const ExperimentConfig& config, const Pools& pools, const Job& job) {
  JobResult jr;
  RunOutcome& out = jr.outcome;
  out.method = job.method.name();
  out.seed = job.seed;
  out.train_a = job.train_a;
  out.train_b = job.train_b;
  out.run_dir = config.out_dir / "runs" / out.method /
                ("a" + std::to_string(job.train_a) + "_b" + std::to_string(job.train_b)) /
                ("seed_" + std::to_string(job.seed));

  const auto& tr_a = pools.get(Modality::A, Split::Train);
  const auto& tr_b = pools.get(Modality::B, Split::Train);
  const auto& va = pools.get(Modality::A, Split::Val);
  const auto& vb = pools.get(Modality::B, Split::Val);
  std::vector<Volume> both_val = va;
  both_val.insert(both_val.end(), vb.begin(), vb.end());

  FederatedConfig fc;
  fc.seed = job.seed;
  fc.trainer = trainer_for(config, job.method.gin);
  fc.server.rounds = config.rounds;
  fc.server.local_epochs = config.local_epochs;
  fc.server.scheduler = config.scheduler;
  fc.server.validate_every = config.validate_every;
  fc.server.out_dir = out.run_dir;
  fc.server.save_checkpoints = config.save_checkpoints;

  if ((job.method.kind == MethodKind::LocalA && job.train_a == 0) ||
      (job.method.kind == MethodKind::LocalB && job.train_b == 0)) {
    out.status = "skipped";
    out.message = "no training volumes for this method";
    return jr;
  }

  log::info("run ", out.method, " a=", job.train_a, " b=", job.train_b, " seed=", job.seed);
  const auto t0 = std::chrono::steady_clock::now();
  try {
    fs::create_directories(out.run_dir);
    const ModelParams initial = initial_model(config.model, job.seed);
    FederatedResult result;
    switch (job.method.kind) {
      case MethodKind::LocalA:
        result = run_centralized(fc, initial, {"pooled", flatten(tr_a, job.train_a), std::nullopt}, va);
        break;
      case MethodKind::LocalB:
        result = run_centralized(fc, initial, {"pooled", flatten(tr_b, job.train_b), std::nullopt}, vb);
        break;
      case MethodKind::Central: {
        auto data = flatten(tr_a, job.train_a);
        auto more = flatten(tr_b, job.train_b);
        data.insert(data.end(), more.begin(), more.end());
        result = run_centralized(fc, initial, {"pooled", std::move(data), std::nullopt}, both_val);
        break;
      }
      case MethodKind::Fed: {
        std::vector<ClientProcessSpec> specs;
        if (config.single_client) {
          specs.push_back({"pooled", std::nullopt, {}, {{Modality::A, job.train_a}, {Modality::B, job.train_b}}, {}, 0, {}});
        } else {
          specs.push_back({"client_A", std::nullopt, {}, {{Modality::A, job.train_a}}, {}, 0, {}});
          specs.push_back({"client_B", std::nullopt, {}, {{Modality::B, job.train_b}}, {}, 0, {}});
        }
        if (config.transport == TransportKind::Socket && config.client_executable) {
          fs::path manifest = fs::absolute(config.manifest);
          for (auto& s : specs) {
            s.manifest = manifest;
            s.trainer = to_json(fc.trainer);
            s.seed = job.seed;
            if (auto it = config.fail_at_round.find(s.client_id); it != config.fail_at_round.end()) {
              s.fail_at_round = it->second;
            }
          }
          result = run_federated_processes(config, fc, initial, specs, both_val, out.run_dir);
        } else {
          std::vector<ClientSpec> clients;
          for (const auto& s : specs) {
            ClientSpec c{s.client_id, {}, s.rng_key};
            for (const auto& [m, n] : s.shares) {
              auto part = flatten(m == Modality::A ? tr_a : tr_b, n);
              c.train.insert(c.train.end(), part.begin(), part.end());
            }
            clients.push_back(std::move(c));
          }
          result = run_federated(fc, initial, std::move(clients), both_val, config.transport);
        }
        break;
      }
    }
    out.rounds_completed = static_cast<int>(result.history.rounds.size());
    if (!result.history.completed) {
      out.status = "failed";
      out.message = result.history.termination_reason;
      return jr;
    }
    save_params(result.final_params, out.run_dir / "final.fgwt");
    for (Modality m : {Modality::A, Modality::B}) {
      auto recs = score(result.final_params, config, pools.get(m, Split::Test), Split::Test, out.method,
                        job.method.gin, job.seed, job.train_a, job.train_b, out.rounds_completed);
      jr.records.insert(jr.records.end(), recs.begin(), recs.end());
    }
    out.status = "ok";
  } catch (const std::exception& e) {
    out.status = "failed";
    out.message = e.what();
    log::error("run ", out.method, " seed=", job.seed, " failed: ", e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log::info("run ", out.method, " seed=", job.seed, " ", out.status, " in ", secs, " s");
  return jr;
}

}  // namespace

ScenarioResult run_scenario(const ExperimentConfig& config) {
  config.validate();
  const Pools pools = load_pools(config);
  const int avail_a = static_cast<int>(pools.get(Modality::A, Split::Train).size());
  const int avail_b = static_cast<int>(pools.get(Modality::B, Split::Train).size());

  std::vector<std::pair<int, int>> steps;
  if (config.scenario == Scenario::Complete) {
    steps.emplace_back(config.train_volumes ? std::min(*config.train_volumes, avail_a) : avail_a,
                       config.train_volumes ? std::min(*config.train_volumes, avail_b) : avail_b);
  } else {
    for (int k : config.ladder) steps.emplace_back(k, config.limited_b_volumes);
  }
  for (const auto& [a, b] : steps) {
    if (a > avail_a || b > avail_b) {
      throw std::invalid_argument("scenario needs " + std::to_string(a) + " A and " + std::to_string(b) +
                                  " B train volumes; the dataset has " + std::to_string(avail_a) + " and " +
                                  std::to_string(avail_b));
    }
  }

  std::vector<Job> jobs;
  std::set<std::tuple<std::string, int, int, std::uint64_t>> seen;
  for (const auto& [a, b] : steps) {
    for (const auto& m : config.effective_methods()) {
      // local runs only see one modality, so ladder steps collapse
      const int ua = m.kind == MethodKind::LocalB ? 0 : a;
      const int ub = m.kind == MethodKind::LocalA ? 0 : b;
      for (auto seed : config.seeds) {
        if (seen.insert({m.name(), ua, ub, seed}).second) jobs.push_back({m, seed, ua, ub});
      }
    }
  }

  fs::create_directories(config.out_dir);
  {
    std::ofstream f(config.out_dir / "config.json", std::ios::trunc);
    f << to_json(config).dump(2) << '\n';
  }

  std::vector<JobResult> results(jobs.size());
  if (config.parallel_seeds && config.seeds.size() > 1) {
    std::vector<std::thread> workers;
    for (auto seed : config.seeds) {
      workers.emplace_back([&, seed] {
        for (std::size_t i = 0; i < jobs.size(); ++i)
          if (jobs[i].seed == seed) results[i] = run_job(config, pools, jobs[i]);
      });
    }
    for (auto& w : workers) w.join();
  } else {
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      results[i] = run_job(config, pools, jobs[i]);
      // keep what has finished on disk
      ScenarioResult partial;
      for (std::size_t k = 0; k <= i; ++k) {
        partial.records.insert(partial.records.end(), results[k].records.begin(), results[k].records.end());
      }
      write_metrics_csv(partial.records, config.out_dir / "metrics.csv");
    }
  }

  ScenarioResult out;
  for (auto& r : results) {
    out.records.insert(out.records.end(), r.records.begin(), r.records.end());
    out.runs.push_back(std::move(r.outcome));
  }
  out.summary = summarize(out.records);
  write_metrics_csv(out.records, config.out_dir / "metrics.csv");
  {
    std::ofstream f(config.out_dir / "summary.json", std::ios::trunc);
    f << summary_to_json(out).dump(2) << '\n';
  }
  return out;
}

std::vector<MetricsRecord> evaluate_model(const ModelParams& params, const ExperimentConfig& config, Split split,
                                          const std::string& label) {
  const DatasetManifest manifest = open_manifest(config);
  std::optional<int> cap = split == Split::Test ? config.test_volumes
                           : split == Split::Val ? config.val_volumes
                                                 : config.train_volumes;
  std::vector<MetricsRecord> out;
  for (Modality m : {Modality::A, Modality::B}) {
    auto recs = score(params, config, load_volumes(manifest, m, split, cap), split, label, false, 0, 0, 0, 0);
    out.insert(out.end(), recs.begin(), recs.end());
  }
  return out;
}

void run_client_process(const ClientProcessSpec& spec, const std::string& host, std::uint16_t port) {
  const DatasetManifest manifest = load_manifest(fs::is_directory(spec.manifest) ? spec.manifest / "manifest.json"
                                                                                 : spec.manifest);
  std::vector<SliceSample> data;
  for (const auto& [m, n] : spec.shares) {
    if (n == 0) continue;
    auto part = flatten(load_volumes(manifest, m, Split::Train, n), n);
    data.insert(data.end(), part.begin(), part.end());
  }
  LocalTrainer trainer(spec.client_id, trainer_config_from_json(spec.trainer), std::move(data), spec.seed, spec.rng_key);
  auto conn = connect_socket(host, port);
  ClientHooks hooks;
  if (spec.fail_at_round) {
    const auto fail = static_cast<std::uint32_t>(*spec.fail_at_round);
    hooks.on_global_model = [fail, id = spec.client_id](std::uint32_t round) {
      if (round == fail) {
        log::warn("client ", id, " terminating itself at round ", round);
        std::raise(SIGKILL);
      }
    };
  }
  serve_client(*conn, trainer, hooks);
}

}  // namespace fedgin
