#include "anomseg/config.hpp"

#include <fstream>
#include <sstream>

namespace anomseg::train {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected boolean, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
  }
}

long parse_long(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    long l = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return l;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (lr <= 0) throw ConfigError("lr must be positive");
  if (poly_power <= 0) throw ConfigError("poly_power must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (per_domain < 1 || 2 * per_domain != batch_size)
    throw ConfigError("batch_size must equal 2 * per_domain");
  if (lambda_f < 0 || lambda_o < 0 || lambda_c < 0)
    throw ConfigError("loss weights must be >= 0");
  if (tau_base < 0.5 || tau_base > 1.0) throw ConfigError("tau_base must lie in [0.5, 1]");
  budget().validate();
  if (hardness_threshold < 0 || hardness_threshold > 1)
    throw ConfigError("hardness_threshold must lie in [0, 1]");
  if (pcl && cpcl) throw ConfigError("pcl and cpcl are mutually exclusive");
  if (as && !cpcl) throw ConfigError("anomaly-aware sampling (as) requires cpcl");
  if (out_clf_pool < 1) throw ConfigError("out_clf_pool must be >= 1");
  net::norm_mode_from_string(norm_mode);
}

contrast::SamplingBudget TrainConfig::budget() const {
  contrast::SamplingBudget b;
  b.n_anchor = n_anchor;
  b.n_positive = n_positive;
  b.n_neg_hard = n_neg_hard;
  b.n_neg_easy = n_neg_easy;
  b.temperature = temperature;
  return b;
}

void TrainConfig::apply(const std::string& key, const std::string& value) {
  if (key == "epochs") epochs = parse_long(key, value);
  else if (key == "lr") lr = parse_double(key, value);
  else if (key == "poly_power") poly_power = parse_double(key, value);
  else if (key == "batch_size") batch_size = static_cast<int>(parse_long(key, value));
  else if (key == "per_domain") per_domain = static_cast<int>(parse_long(key, value));
  else if (key == "lambda_f") lambda_f = parse_double(key, value);
  else if (key == "lambda_o") lambda_o = parse_double(key, value);
  else if (key == "lambda_c") lambda_c = parse_double(key, value);
  else if (key == "tau_base") tau_base = parse_double(key, value);
  else if (key == "n_anchor") n_anchor = static_cast<int>(parse_long(key, value));
  else if (key == "n_positive") n_positive = static_cast<int>(parse_long(key, value));
  else if (key == "n_neg_hard") n_neg_hard = static_cast<int>(parse_long(key, value));
  else if (key == "n_neg_easy") n_neg_easy = static_cast<int>(parse_long(key, value));
  else if (key == "temperature") temperature = parse_double(key, value);
  else if (key == "hardness_threshold") hardness_threshold = parse_double(key, value);
  else if (key == "log_variant") log_variant = parse_bool(key, value);
  else if (key == "oda") oda = parse_bool(key, value);
  else if (key == "fda") fda = parse_bool(key, value);
  else if (key == "dls") dls = parse_bool(key, value);
  else if (key == "pcl") pcl = parse_bool(key, value);
  else if (key == "cpcl") cpcl = parse_bool(key, value);
  else if (key == "as") as = parse_bool(key, value);
  else if (key == "seed") seed = static_cast<uint64_t>(parse_long(key, value));
  else if (key == "levels") levels = static_cast<int>(parse_long(key, value));
  else if (key == "base_channels") base_channels = static_cast<int>(parse_long(key, value));
  else if (key == "num_classes") num_classes = static_cast<int>(parse_long(key, value));
  else if (key == "norm_mode") norm_mode = value;
  else if (key == "out_clf_pool") out_clf_pool = static_cast<int>(parse_long(key, value));
  else throw ConfigError("unknown config key: " + key);
}

std::string TrainConfig::serialize() const {
  std::ostringstream os;
  os << "epochs = " << epochs << "\n";
  os << "lr = " << fmt_g17(lr) << "\n";
  os << "poly_power = " << fmt_g17(poly_power) << "\n";
  os << "batch_size = " << batch_size << "\n";
  os << "per_domain = " << per_domain << "\n";
  os << "lambda_f = " << fmt_g17(lambda_f) << "\n";
  os << "lambda_o = " << fmt_g17(lambda_o) << "\n";
  os << "lambda_c = " << fmt_g17(lambda_c) << "\n";
  os << "tau_base = " << fmt_g17(tau_base) << "\n";
  os << "n_anchor = " << n_anchor << "\n";
  os << "n_positive = " << n_positive << "\n";
  os << "n_neg_hard = " << n_neg_hard << "\n";
  os << "n_neg_easy = " << n_neg_easy << "\n";
  os << "temperature = " << fmt_g17(temperature) << "\n";
  os << "hardness_threshold = " << fmt_g17(hardness_threshold) << "\n";
  os << "log_variant = " << (log_variant ? 1 : 0) << "\n";
  os << "oda = " << (oda ? 1 : 0) << "\n";
  os << "fda = " << (fda ? 1 : 0) << "\n";
  os << "dls = " << (dls ? 1 : 0) << "\n";
  os << "pcl = " << (pcl ? 1 : 0) << "\n";
  os << "cpcl = " << (cpcl ? 1 : 0) << "\n";
  os << "as = " << (as ? 1 : 0) << "\n";
  os << "seed = " << seed << "\n";
  os << "levels = " << levels << "\n";
  os << "base_channels = " << base_channels << "\n";
  os << "num_classes = " << num_classes << "\n";
  os << "norm_mode = " << norm_mode << "\n";
  os << "out_clf_pool = " << out_clf_pool << "\n";
  return os.str();
}

std::pair<std::string, std::string> split_override(const std::string& kv) {
  size_t eq = kv.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must have the form key=value: " + kv);
  return {trim(kv.substr(0, eq)), trim(kv.substr(eq + 1))};
}

TrainConfig TrainConfig::from_file(const std::filesystem::path& path,
                                   const std::vector<std::string>& overrides) {
  TrainConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path.string());
    std::string line;
    long lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      size_t eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
      cfg.apply(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
  }
  for (const std::string& kv : overrides) {
    auto [k, v] = split_override(kv);
    cfg.apply(k, v);
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::from_overrides(const std::vector<std::string>& overrides) {
  return from_file(std::filesystem::path(), overrides);
}

void TrainConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config: " + path.string());
  out << serialize();
}

}  // namespace anomseg::train
