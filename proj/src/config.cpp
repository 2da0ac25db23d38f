#include "famseg/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace famseg {

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

long long to_int(const std::string& s) {
  long long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("expected an integer, got '" + s + "'");
  return v;
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty()) throw ConfigError("expected a number, got '" + s + "'");
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "on" || s == "true" || s == "1" || s == "yes") return true;
  if (s == "off" || s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("expected on/off, got '" + s + "'");
}

std::vector<int> to_int_list(const std::string& s) {
  std::vector<int> out;
  for (const auto& item : split_list(s)) out.push_back(static_cast<int>(to_int(item)));
  if (out.empty()) throw ConfigError("expected a comma-separated list");
  return out;
}

std::string join(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::vector<Phase> to_phases(const std::string& s) {
  std::vector<Phase> out;
  for (const auto& item : split_list(s)) {
    const auto parts = split_list(item, ':');
    if (parts.size() != 3) throw ConfigError("phase '" + item + "' is not optimizer:epochs:decay");
    out.push_back({parse_optimizer(parts[0]), static_cast<int>(to_int(parts[1])), parse_decay(parts[2])});
  }
  return out;
}

using Setter = std::function<void(const std::string&)>;

void model_setters(std::map<std::string, Setter>& t, ModelConfig& m) {
  auto& e = m.encoder;
  auto& d = m.decoder;
  t["model.in_channels"] = [&](const std::string& v) { m.in_channels = static_cast<int>(to_int(v)); };
  t["encoder.stage_channels"] = [&](const std::string& v) { e.stage_channels = to_int_list(v); };
  t["encoder.stage_depths"] = [&](const std::string& v) { e.stage_depths = to_int_list(v); };
  t["encoder.branch_kernels"] = [&](const std::string& v) { e.branch_kernels = to_int_list(v); };
  t["encoder.strip_stages"] = [&](const std::string& v) { e.strip_stages = static_cast<int>(to_int(v)); };
  t["encoder.fuse_last_n"] = [&](const std::string& v) { e.fuse_last_n = static_cast<int>(to_int(v)); };
  t["encoder.mlp_ratio"] = [&](const std::string& v) { e.mlp_ratio = static_cast<int>(to_int(v)); };
  t["encoder.hamburger"] = [&](const std::string& v) { e.hamburger.enabled = to_bool(v); };
  t["encoder.hamburger_rank"] = [&](const std::string& v) { e.hamburger.rank = static_cast<int>(to_int(v)); };
  t["encoder.hamburger_iters"] = [&](const std::string& v) { e.hamburger.iters = static_cast<int>(to_int(v)); };
  t["encoder.mamba"] = [&](const std::string& v) { e.mamba = to_bool(v); };
  t["encoder.mamba_state"] = [&](const std::string& v) { e.mamba_spec.state_dim = static_cast<int>(to_int(v)); };
  t["encoder.mamba_heads"] = [&](const std::string& v) { e.mamba_spec.heads = static_cast<int>(to_int(v)); };
  t["encoder.scan"] = [&](const std::string& v) {
    e.mamba_spec.scan.directions.clear();
    for (const auto& item : split_list(v)) e.mamba_spec.scan.directions.push_back(parse_scan_direction(item));
  };
  t["decoder.fuse_stages"] = [&](const std::string& v) { d.fuse_stages = to_int_list(v); };
  t["decoder.refine_channels"] = [&](const std::string& v) { d.refine_channels = static_cast<int>(to_int(v)); };
  t["decoder.num_classes"] = [&](const std::string& v) { d.num_classes = static_cast<int>(to_int(v)); };
  t["decoder.fusion"] = [&](const std::string& v) { d.fusion = to_bool(v); };
  t["decoder.k_up"] = [&](const std::string& v) { d.k_up = static_cast<int>(to_int(v)); };
  t["decoder.k_enc"] = [&](const std::string& v) { d.k_enc = static_cast<int>(to_int(v)); };
}

void schedule_setters(std::map<std::string, Setter>& t, Schedule& s) {
  t["schedule.phases"] = [&](const std::string& v) { s.phases = to_phases(v); };
  t["schedule.init_lr"] = [&](const std::string& v) { s.init_lr = to_double(v); };
  t["schedule.min_lr"] = [&](const std::string& v) { s.min_lr = to_double(v); };
  t["schedule.lr_limit_max"] = [&](const std::string& v) { s.lr_limit_max = to_double(v); };
  t["schedule.lr_limit_min"] = [&](const std::string& v) { s.lr_limit_min = to_double(v); };
  t["schedule.batch_size"] = [&](const std::string& v) { s.batch_size = static_cast<int>(to_int(v)); };
  t["schedule.weight_decay"] = [&](const std::string& v) { s.hyper.weight_decay = to_double(v); };
  t["schedule.momentum"] = [&](const std::string& v) { s.hyper.momentum = to_double(v); };
  t["schedule.beta1"] = [&](const std::string& v) { s.hyper.beta1 = to_double(v); };
  t["schedule.beta2"] = [&](const std::string& v) { s.hyper.beta2 = to_double(v); };
  t["schedule.eps"] = [&](const std::string& v) { s.hyper.eps = to_double(v); };
  t["schedule.rho"] = [&](const std::string& v) { s.hyper.rho = to_double(v); };
}

void phantom_setters(std::map<std::string, Setter>& t, PhantomSpec& p) {
  auto num = [&](const char* key, double& field) {
    t[std::string("phantom.") + key] = [&field](const std::string& v) { field = to_double(v); };
  };
  t["phantom.image_size"] = [&](const std::string& v) { p.image_size = static_cast<int>(to_int(v)); };
  t["phantom.max_attempts"] = [&](const std::string& v) { p.max_attempts = static_cast<int>(to_int(v)); };
  num("femur_length_min", p.femur_length_min);
  num("femur_length_max", p.femur_length_max);
  num("femur_thickness_min", p.femur_thickness_min);
  num("femur_thickness_max", p.femur_thickness_max);
  num("cranium_axis_min", p.cranium_axis_min);
  num("cranium_axis_max", p.cranium_axis_max);
  num("cranium_thickness_min", p.cranium_thickness_min);
  num("cranium_thickness_max", p.cranium_thickness_max);
  num("noise_min", p.noise_min);
  num("noise_max", p.noise_max);
  num("background_min", p.background_min);
  num("background_max", p.background_max);
  num("contrast_min", p.contrast_min);
  num("contrast_max", p.contrast_max);
  num("foreground_min", p.foreground_min);
  num("foreground_max", p.foreground_max);
}

void parse_into(const std::string& text, const std::string& origin, std::map<std::string, Setter>& table) {
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  auto fail = [&](const std::string& msg) { throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + msg); };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& [key, _] : table) known = known || key.rfind(section + ".", 0) == 0;
      if (!known) fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    if (section.empty()) fail("key outside of any section");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = table.find(section + "." + key);
    if (it == table.end()) fail("unknown key '" + key + "' in [" + section + "]");
    try {
      it->second(value);
    } catch (const ConfigError& e) {
      fail(key + ": " + e.what());
    }
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
  ExperimentConfig cfg;
  cfg.text = text;
  std::map<std::string, Setter> table;
  model_setters(table, cfg.train.model);
  schedule_setters(table, cfg.train.schedule);
  phantom_setters(table, cfg.phantom);
  table["train.seed"] = [&](const std::string& v) { cfg.train.seed = static_cast<std::uint64_t>(to_int(v)); };
  table["train.loss"] = [&](const std::string& v) { cfg.train.loss = parse_loss(v); };
  table["data.n"] = [&](const std::string& v) { cfg.data.n = static_cast<int>(to_int(v)); };
  table["data.seed"] = [&](const std::string& v) { cfg.data.seed = static_cast<std::uint64_t>(to_int(v)); };
  table["data.split"] = [&](const std::string& v) {
    const auto parts = split_list(v);
    if (parts.size() != 3) throw ConfigError("split needs three ratios");
    for (int i = 0; i < 3; ++i) cfg.data.split[i] = to_double(parts[i]);
  };
  parse_into(text, origin, table);
  try {
    cfg.train.model.validate();
    cfg.train.schedule.validate();
    cfg.phantom.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

std::string model_config_text(const ModelConfig& cfg) {
  const auto& e = cfg.encoder;
  const auto& d = cfg.decoder;
  std::ostringstream os;
  os << "[model]\nin_channels = " << cfg.in_channels << "\n";
  os << "[encoder]\n";
  os << "stage_channels = " << join(e.stage_channels) << "\n";
  os << "stage_depths = " << join(e.stage_depths) << "\n";
  os << "branch_kernels = " << join(e.branch_kernels) << "\n";
  os << "strip_stages = " << e.strip_stages << "\n";
  os << "fuse_last_n = " << e.fuse_last_n << "\n";
  os << "mlp_ratio = " << e.mlp_ratio << "\n";
  os << "hamburger = " << (e.hamburger.enabled ? "on" : "off") << "\n";
  os << "hamburger_rank = " << e.hamburger.rank << "\n";
  os << "hamburger_iters = " << e.hamburger.iters << "\n";
  os << "mamba = " << (e.mamba ? "on" : "off") << "\n";
  os << "mamba_state = " << e.mamba_spec.state_dim << "\n";
  os << "mamba_heads = " << e.mamba_spec.heads << "\n";
  os << "scan = ";
  for (std::size_t i = 0; i < e.mamba_spec.scan.directions.size(); ++i) {
    os << (i ? "," : "") << to_string(e.mamba_spec.scan.directions[i]);
  }
  os << "\n[decoder]\n";
  os << "fuse_stages = " << join(d.fuse_stages) << "\n";
  os << "refine_channels = " << d.refine_channels << "\n";
  os << "num_classes = " << d.num_classes << "\n";
  os << "fusion = " << (d.fusion ? "on" : "off") << "\n";
  os << "k_up = " << d.k_up << "\n";
  os << "k_enc = " << d.k_enc << "\n";
  return os.str();
}

ModelConfig parse_model_config(const std::string& text) {
  ModelConfig m;
  std::map<std::string, Setter> table;
  model_setters(table, m);
  parse_into(text, "<model config>", table);
  m.validate();
  return m;
}

}  // namespace famseg
