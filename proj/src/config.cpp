#include "hvm/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace hvm {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  return s;
}

std::uint64_t parse_uint(const std::string& key, const std::string& raw) {
  const auto s = unquote(trim(raw));
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + raw + "'");
  }
  return v;
}

double parse_double(const std::string& key, const std::string& raw) {
  const auto s = unquote(trim(raw));
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty() || !std::isfinite(v)) {
    throw ConfigError(key + ": expected a finite number, got '" + raw + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  const auto s = unquote(trim(raw));
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + raw + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& raw) {
  auto s = unquote(trim(raw));
  if (!s.empty() && s.front() == '[') {
    if (s.back() != ']') throw ConfigError(key + ": unterminated list '" + raw + "'");
    s = s.substr(1, s.size() - 2);
  }
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_uint(key, item));
  if (out.empty()) throw ConfigError(key + ": expected a non-empty list");
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + std::to_string(v[i]);
  return out + "]";
}

std::string fmt_string(const std::string& s) { return "\"" + s + "\""; }

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Member>
Field uint_field(std::string key, Member member) {
  return {key,
          [key, member](RunConfig& c, const std::string& v) { member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(parse_uint(key, v)); },
          [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
}

template <class Member>
Field double_field(std::string key, Member member) {
  return {key, [key, member](RunConfig& c, const std::string& v) { member(c) = parse_double(key, v); },
          [member](const RunConfig& c) { return fmt_double(member(const_cast<RunConfig&>(c))); }};
}

template <class Member>
Field bool_field(std::string key, Member member) {
  return {key, [key, member](RunConfig& c, const std::string& v) { member(c) = parse_bool(key, v); },
          [member](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <class Member>
Field string_field(std::string key, Member member) {
  return {key,
          [key, member](RunConfig& c, const std::string& v) {
            const auto s = unquote(trim(v));
            if (s.find('"') != std::string::npos) throw ConfigError(key + ": strings may not contain '\"'");
            member(c) = s;
          },
          [member](const RunConfig& c) { return fmt_string(member(const_cast<RunConfig&>(c))); }};
}

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    f.push_back(string_field("name", [](RunConfig& c) -> std::string& { return c.name; }));

    f.push_back({"model.channels", [](RunConfig& c, const std::string& v) { c.model.channels = parse_list("model.channels", v); },
                 [](const RunConfig& c) { return fmt_list(c.model.channels); }});
    f.push_back({"model.orders", [](RunConfig& c, const std::string& v) { c.model.orders = parse_list("model.orders", v); },
                 [](const RunConfig& c) { return fmt_list(c.model.orders); }});
    f.push_back(uint_field("model.input_channels", [](RunConfig& c) -> std::size_t& { return c.model.input_channels; }));
    f.push_back({"model.input_size",
                 [](RunConfig& c, const std::string& v) {
                   const auto l = parse_list("model.input_size", v);
                   if (l.size() > 2) throw ConfigError("model.input_size: expected H or [H, W]");
                   c.model.input_height = l[0];
                   c.model.input_width = l.size() == 2 ? l[1] : l[0];
                 },
                 [](const RunConfig& c) { return fmt_list({c.model.input_height, c.model.input_width}); }});
    f.push_back(uint_field("model.mlp_ratio", [](RunConfig& c) -> std::size_t& { return c.model.mlp_ratio; }));
    f.push_back(uint_field("model.state_dim", [](RunConfig& c) -> std::size_t& { return c.model.state_dim; }));
    f.push_back(bool_field("model.conv_first", [](RunConfig& c) -> bool& { return c.model.conv_first; }));

    f.push_back(string_field("data.source", [](RunConfig& c) -> std::string& { return c.data.source; }));
    f.push_back(string_field("data.images_dir", [](RunConfig& c) -> std::string& { return c.data.images_dir; }));
    f.push_back(string_field("data.masks_dir", [](RunConfig& c) -> std::string& { return c.data.masks_dir; }));
    f.push_back(uint_field("data.target_size", [](RunConfig& c) -> std::size_t& { return c.data.target_size; }));
    f.push_back(double_field("data.train_fraction", [](RunConfig& c) -> double& { return c.data.train_fraction; }));
    f.push_back(double_field("data.val_fraction", [](RunConfig& c) -> double& { return c.data.val_fraction; }));
    f.push_back(double_field("data.test_fraction", [](RunConfig& c) -> double& { return c.data.test_fraction; }));
    f.push_back(uint_field("data.split_seed", [](RunConfig& c) -> std::uint64_t& { return c.data.split_seed; }));
    f.push_back(uint_field("data.synthetic_count", [](RunConfig& c) -> std::size_t& { return c.data.synthetic_count; }));
    f.push_back(bool_field("data.augment", [](RunConfig& c) -> bool& { return c.data.augment; }));
    f.push_back(bool_field("data.hflip", [](RunConfig& c) -> bool& { return c.data.hflip; }));
    f.push_back(bool_field("data.vflip", [](RunConfig& c) -> bool& { return c.data.vflip; }));
    f.push_back(double_field("data.rotation_degrees", [](RunConfig& c) -> double& { return c.data.rotation_degrees; }));

    f.push_back(uint_field("train.epochs", [](RunConfig& c) -> std::size_t& { return c.train.epochs; }));
    f.push_back(uint_field("train.batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; }));
    f.push_back(double_field("train.lr_init", [](RunConfig& c) -> double& { return c.train.lr_init; }));
    f.push_back(double_field("train.lr_min", [](RunConfig& c) -> double& { return c.train.lr_min; }));
    f.push_back(double_field("train.weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; }));
    f.push_back(double_field("train.beta1", [](RunConfig& c) -> double& { return c.train.beta1; }));
    f.push_back(double_field("train.beta2", [](RunConfig& c) -> double& { return c.train.beta2; }));
    f.push_back(double_field("train.eps", [](RunConfig& c) -> double& { return c.train.eps; }));
    f.push_back(double_field("train.w_bce", [](RunConfig& c) -> double& { return c.train.w_bce; }));
    f.push_back(double_field("train.w_dice", [](RunConfig& c) -> double& { return c.train.w_dice; }));
    f.push_back(double_field("train.threshold", [](RunConfig& c) -> double& { return c.train.threshold; }));
    f.push_back(uint_field("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; }));
    f.push_back(bool_field("train.eval_on_train", [](RunConfig& c) -> bool& { return c.train.eval_on_train; }));
    return f;
  }();
  return fields;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : schema()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (data.source != "folder" && data.source != "synthetic") {
    throw ConfigError("data.source must be \"folder\" or \"synthetic\", got \"" + data.source + "\"");
  }
  if (data.source == "folder" && (data.images_dir.empty() || data.masks_dir.empty())) {
    throw ConfigError("data.images_dir and data.masks_dir are required when data.source = \"folder\"");
  }
  const double fsum = data.train_fraction + data.val_fraction + data.test_fraction;
  if (data.train_fraction < 0 || data.val_fraction < 0 || data.test_fraction < 0 || std::abs(fsum - 1.0) > 1e-9) {
    throw ConfigError("data fractions must be non-negative and sum to 1, got " + fmt_double(fsum));
  }
  if (data.rotation_degrees < 0 || data.rotation_degrees > 180) {
    throw ConfigError("data.rotation_degrees must be in [0, 180]");
  }
  if (data.target_size != 0 && data.target_size % 32 != 0) {
    throw ConfigError("data.target_size must be 0 or a multiple of 32");
  }
  if (train.epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(train.lr_min < train.lr_init) || train.lr_min < 0) {
    throw ConfigError("train.lr_min must be non-negative and below train.lr_init");
  }
  if (train.weight_decay < 0) throw ConfigError("train.weight_decay must be non-negative");
  if (!(train.beta1 >= 0 && train.beta1 < 1) || !(train.beta2 >= 0 && train.beta2 < 1)) {
    throw ConfigError("train.beta1 and train.beta2 must be in [0, 1)");
  }
  if (!(train.eps > 0)) throw ConfigError("train.eps must be positive");
  if (train.w_bce < 0 || train.w_dice < 0) throw ConfigError("loss weights must be non-negative");
  if (!(train.threshold > 0 && train.threshold < 1)) throw ConfigError("train.threshold must be in (0, 1)");
}

RunConfig parse_config(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::string section;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto where = origin + ":" + std::to_string(lineno) + ": ";
    // Strip comments outside quotes.
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    const auto t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + "malformed section header '" + t + "'");
      section = trim(t.substr(1, t.size() - 2));
      if (section != "model" && section != "data" && section != "train") {
        throw ConfigError(where + "unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + t + "'");
    const auto key = trim(t.substr(0, eq));
    const auto value = trim(t.substr(eq + 1));
    const auto full = section.empty() ? key : section + "." + key;
    try {
      find_field(full).set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  find_field(key).set(cfg, value);
}

void apply_overrides(RunConfig& cfg, const std::vector<std::pair<std::string, std::string>>& overrides) {
  for (const auto& [k, v] : overrides) apply_override(cfg, k, v);
}

std::string snapshot(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : schema()) {
    const auto dot = f.key.find('.');
    const auto sec = dot == std::string::npos ? std::string() : f.key.substr(0, dot);
    const auto key = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
    if (sec != section) {
      out += "\n[" + sec + "]\n";
      section = sec;
    }
    out += key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : schema()) out.push_back(f.key);
  return out;
}

}  // namespace hvm
