#include "hsproj_tools/experiment.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "hsproj/binary_io.hpp"
#include "hsproj/error.hpp"

namespace hsproj::tools {

namespace pt = boost::property_tree;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

template <typename T>
T parse_number(const std::string& raw, const std::string& where) {
  const auto text = trim(raw);
  T value{};
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (text.empty() || ec != std::errc() || ptr != last) {
    throw ConfigError(where + ": cannot parse \"" + raw + "\" as a number");
  }
  return value;
}

bool parse_bool(const std::string& raw, const std::string& where) {
  const auto text = trim(raw);
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(where + ": expected true/false, got \"" + raw + "\"");
}

using Setter = std::function<void(ExperimentConfig&, const std::string& value, const std::string& where)>;

template <typename T, typename Get>
Setter number(Get get) {
  return [get](ExperimentConfig& c, const std::string& v, const std::string& w) { get(c) = parse_number<T>(v, w); };
}

// section -> key -> setter
const std::map<std::string, std::map<std::string, Setter>>& schema() {
  using E = ExperimentConfig;
  static const std::map<std::string, std::map<std::string, Setter>> table = {
      {"experiment",
       {{"name", [](E& c, const std::string& v, const std::string&) { c.name = trim(v); }},
        {"group", [](E& c, const std::string& v, const std::string&) { c.group = trim(v); }},
        {"seed", number<std::uint64_t>([](E& c) -> std::uint64_t& { return c.seed; })}}},
      {"world",
       {{"d_h", number<std::size_t>([](E& c) -> std::size_t& { return c.world.d_h; })},
        {"d", number<std::size_t>([](E& c) -> std::size_t& { return c.world.d; })},
        {"num_conversations", number<std::size_t>([](E& c) -> std::size_t& { return c.world.num_conversations; })},
        {"triggers_min", number<std::size_t>([](E& c) -> std::size_t& { return c.world.triggers_min; })},
        {"triggers_max", number<std::size_t>([](E& c) -> std::size_t& { return c.world.triggers_max; })},
        {"tokens_min", number<std::size_t>([](E& c) -> std::size_t& { return c.world.tokens_min; })},
        {"tokens_max", number<std::size_t>([](E& c) -> std::size_t& { return c.world.tokens_max; })},
        {"max_positions", number<std::size_t>([](E& c) -> std::size_t& { return c.world.max_positions; })},
        {"corpus_size", number<std::size_t>([](E& c) -> std::size_t& { return c.world.corpus_size; })},
        {"relevant_min", number<std::size_t>([](E& c) -> std::size_t& { return c.world.relevant_min; })},
        {"relevant_max", number<std::size_t>([](E& c) -> std::size_t& { return c.world.relevant_max; })},
        {"noise", number<double>([](E& c) -> double& { return c.world.noise; })},
        {"distractor_correlation", number<double>([](E& c) -> double& { return c.world.distractor_correlation; })},
        {"distractor_spread", number<double>([](E& c) -> double& { return c.world.distractor_spread; })},
        {"topic_weight", number<double>([](E& c) -> double& { return c.world.topic_weight; })},
        {"token_noise", number<double>([](E& c) -> double& { return c.world.token_noise; })},
        {"position_scale", number<double>([](E& c) -> double& { return c.world.position_scale; })},
        {"val_fraction", number<double>([](E& c) -> double& { return c.world.val_fraction; })},
        {"test_fraction", number<double>([](E& c) -> double& { return c.world.test_fraction; })},
        {"model_name", [](E& c, const std::string& v, const std::string&) { c.world.model_name = trim(v); }}}},
      {"mapper",
       {{"d_m", number<std::size_t>([](E& c) -> std::size_t& { return c.mapper.d_m; })},
        {"layers", number<std::size_t>([](E& c) -> std::size_t& { return c.mapper.layers; })},
        {"heads", number<std::size_t>([](E& c) -> std::size_t& { return c.mapper.heads; })},
        {"ff_dim", number<std::size_t>([](E& c) -> std::size_t& { return c.mapper.ff_dim; })}}},
      {"train",
       {{"epochs", number<std::size_t>([](E& c) -> std::size_t& { return c.train.epochs; })},
        {"batch_size", number<std::size_t>([](E& c) -> std::size_t& { return c.train.batch_size; })},
        {"lr_start", number<double>([](E& c) -> double& { return c.train.lr_start; })},
        {"lr_end", number<double>([](E& c) -> double& { return c.train.lr_end; })},
        {"weight_decay", number<double>([](E& c) -> double& { return c.train.weight_decay; })},
        {"clip_norm", number<double>([](E& c) -> double& { return c.train.clip_norm; })},
        {"beta1", number<double>([](E& c) -> double& { return c.train.beta1; })},
        {"beta2", number<double>([](E& c) -> double& { return c.train.beta2; })},
        {"adam_eps", number<double>([](E& c) -> double& { return c.train.adam_eps; })},
        {"top_k", number<std::size_t>([](E& c) -> std::size_t& { return c.train.top_k; })},
        {"shuffle", [](E& c, const std::string& v, const std::string& w) { c.train.shuffle = parse_bool(v, w); }},
        {"val_interval", number<std::size_t>([](E& c) -> std::size_t& { return c.train.val_interval; })},
        {"checkpoint_interval",
         number<std::size_t>([](E& c) -> std::size_t& { return c.train.checkpoint_interval; })}}},
      {"loss",
       {{"align", number<double>([](E& c) -> double& { return c.train.weights.align; })},
        {"contra", number<double>([](E& c) -> double& { return c.train.weights.contra; })},
        {"rank", number<double>([](E& c) -> double& { return c.train.weights.rank; })},
        {"tau", number<double>([](E& c) -> double& { return c.train.weights.tau; })},
        {"tau_r", number<double>([](E& c) -> double& { return c.train.weights.tau_r; })}}},
  };
  return table;
}

void set_key(ExperimentConfig& c, const std::string& section, const std::string& key, const std::string& value,
             const std::string& source) {
  const auto& table = schema();
  const auto sec = table.find(section);
  if (sec == table.end()) throw ConfigError(source + ": unknown section [" + section + "]");
  const auto it = sec->second.find(key);
  if (it == sec->second.end()) throw ConfigError(source + ": unknown key \"" + key + "\" in [" + section + "]");
  it->second(c, value, source + ": [" + section + "] " + key);
}

pt::ptree read_ini_text(const std::string& text, const std::string& source) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(source + ": line " + std::to_string(e.line()) + ": " + e.message());
  }
  return tree;
}

std::string read_text(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  const auto bytes = read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

}  // namespace

MapperConfig synthetic_mapper_defaults() {
  MapperConfig m;
  m.d_m = 32;
  m.layers = 2;
  m.heads = 4;
  m.ff_dim = 128;
  return m;
}

ExperimentConfig default_experiment() {
  ExperimentConfig c;
  c.mapper = synthetic_mapper_defaults();
  c.resolve();
  return c;
}

void ExperimentConfig::resolve() {
  world.seed = seed;
  mapper.seed = seed;
  train.seed = seed;
  mapper.d_h = world.d_h;
  mapper.d = world.d;
  mapper.max_positions = world.max_positions;
}

void ExperimentConfig::validate() const {
  if (name.empty()) throw ConfigError("experiment name must not be empty");
  world.validate();
  mapper.validate();
  train.validate();
  if (mapper.d_h != world.d_h || mapper.d != world.d) {
    throw DimensionError("mapper dims (d_h=" + std::to_string(mapper.d_h) + ", d=" + std::to_string(mapper.d) +
                         ") do not match the world (d_h=" + std::to_string(world.d_h) +
                         ", d=" + std::to_string(world.d) + ")");
  }
  if (train.weights.rank > 0.0 && train.top_k > world.corpus_size) {
    throw ConfigError("top_k=" + std::to_string(train.top_k) + " exceeds corpus_size=" +
                      std::to_string(world.corpus_size));
  }
}

ExperimentConfig parse_experiment(const std::string& text, const std::string& source) {
  const auto tree = read_ini_text(text, source);
  ExperimentConfig c = default_experiment();
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError(source + ": key \"" + section + "\" outside any section");
    if (!schema().count(section)) throw ConfigError(source + ": unknown section [" + section + "]");
    for (const auto& [key, value] : body) set_key(c, section, key, value.data(), source);
  }
  c.resolve();
  c.validate();
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  return parse_experiment(read_text(path), path.string());
}

nlohmann::json mapper_config_to_json(const MapperConfig& m) {
  return {{"d_h", m.d_h},       {"d_m", m.d_m},       {"d", m.d},
          {"layers", m.layers}, {"heads", m.heads},   {"ff_dim", m.ff_dim},
          {"max_positions", m.max_positions},         {"seed", m.seed}};
}

MapperConfig mapper_config_from_json(const nlohmann::json& j) {
  MapperConfig m;
  m.d_h = j.at("d_h").get<std::size_t>();
  m.d_m = j.at("d_m").get<std::size_t>();
  m.d = j.at("d").get<std::size_t>();
  m.layers = j.at("layers").get<std::size_t>();
  m.heads = j.at("heads").get<std::size_t>();
  m.ff_dim = j.at("ff_dim").get<std::size_t>();
  m.max_positions = j.at("max_positions").get<std::size_t>();
  m.seed = j.at("seed").get<std::uint64_t>();
  return m;
}

// --- ablation matrix -------------------------------------------------------------

AblationMatrix parse_matrix(const std::string& text, const std::string& source) {
  const auto tree = read_ini_text(text, source);
  AblationMatrix m;
  std::set<std::string> names;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError(source + ": key \"" + section + "\" outside any section");
    if (section == "matrix") {
      for (const auto& [key, value] : body) {
        if (key != "seeds") throw ConfigError(source + ": unknown key \"" + key + "\" in [matrix]");
        m.seeds.clear();
        std::stringstream list(value.data());
        std::string item;
        while (std::getline(list, item, ',')) m.seeds.push_back(parse_number<std::uint64_t>(item, source + ": seeds"));
        if (m.seeds.empty()) throw ConfigError(source + ": [matrix] seeds must list at least one seed");
      }
      continue;
    }
    if (!names.insert(section).second) throw ConfigError(source + ": duplicate run [" + section + "]");
    AblationRun run;
    run.name = section;
    for (const auto& [key, value] : body) {
      if (key == "group") {
        run.group = trim(value.data());
        continue;
      }
      const auto& table = schema();
      bool known = false;
      for (const char* sec : {"train", "loss"}) {
        if (table.at(sec).count(key)) {
          run.overrides[std::string(sec) + "." + key] = value.data();
          known = true;
          break;
        }
      }
      if (!known) throw ConfigError(source + ": unknown key \"" + key + "\" in run [" + section + "]");
    }
    m.runs.push_back(std::move(run));
  }
  if (m.runs.empty()) throw ConfigError(source + ": matrix lists no runs");
  // Validate every override eagerly so a typo fails before hours of training.
  for (const auto& run : m.runs) apply_run(default_experiment(), run, m.seeds.front());
  return m;
}

AblationMatrix load_matrix(const std::filesystem::path& path) { return parse_matrix(read_text(path), path.string()); }

ExperimentConfig apply_run(const ExperimentConfig& base, const AblationRun& run, std::uint64_t seed) {
  ExperimentConfig c = base;
  c.name = run.name;
  c.group = run.group;
  c.seed = seed;
  for (const auto& [path, value] : run.overrides) {
    const auto dot = path.find('.');
    set_key(c, path.substr(0, dot), path.substr(dot + 1), value, "run [" + run.name + "]");
  }
  c.resolve();
  c.validate();
  return c;
}

// --- manifest ----------------------------------------------------------------------

std::string to_string(RunStatus status) { return status == RunStatus::kCollapsed ? "collapsed" : "converged"; }

RunStatus run_status_from_string(const std::string& text) {
  if (text == "converged") return RunStatus::kConverged;
  if (text == "collapsed") return RunStatus::kCollapsed;
  throw DecodeError("unknown run status \"" + text + "\"");
}

nlohmann::json manifest_to_json(const RunManifest& m) {
  nlohmann::json artifacts = nlohmann::json::object();
  for (const auto& [role, path] : m.artifacts) artifacts[role] = path;
  return {{"format", "hsproj-run"},
          {"version", 1},
          {"experiment", m.experiment},
          {"group", m.group},
          {"seed", m.seed},
          {"world", world_config_to_json(m.world)},
          {"mapper", mapper_config_to_json(m.mapper)},
          {"train", train_config_to_json(m.train)},
          {"world_dir", m.world_dir.string()},
          {"out_dir", m.out_dir.string()},
          {"artifacts", artifacts},
          {"wall_clock_seconds", m.wall_clock_seconds},
          {"status", to_string(m.status)},
          {"metrics", m.metrics}};
}

RunManifest manifest_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "hsproj-run") throw DecodeError("not a run manifest");
    if (j.at("version").get<int>() != 1) throw VersionError("unsupported run manifest version");
    RunManifest m;
    m.experiment = j.at("experiment").get<std::string>();
    m.group = j.at("group").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.world = world_config_from_json(j.at("world"));
    m.mapper = mapper_config_from_json(j.at("mapper"));
    m.train = train_config_from_json(j.at("train"));
    m.world_dir = j.at("world_dir").get<std::string>();
    m.out_dir = j.at("out_dir").get<std::string>();
    m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    m.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
    m.status = run_status_from_string(j.at("status").get<std::string>());
    m.metrics = j.at("metrics").get<std::map<std::string, double>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError(std::string("run manifest: ") + e.what());
  }
}

void save_manifest(const RunManifest& manifest, const std::filesystem::path& path) {
  const auto text = manifest_to_json(manifest).dump(2) + "\n";
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

RunManifest load_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return manifest_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::parse_error& e) {
    throw DecodeError(path.string() + ": " + e.what());
  }
}

}  // namespace hsproj::tools
