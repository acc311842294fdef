#pragma once

// Run configuration: [model], [data] and [train] sections of `key = value`
// lines. Values are numbers, booleans, bare or double-quoted strings, and
// comma lists with optional brackets. '#' starts a comment.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hvm/network.hpp"

namespace hvm {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  std::string source = "folder";  // "folder" or "synthetic"
  std::string images_dir;
  std::string masks_dir;
  std::size_t target_size = 0;  // 0: use the model input size
  double train_fraction = 0.8;
  double val_fraction = 0.2;
  double test_fraction = 0.0;
  std::uint64_t split_seed = 0;
  std::size_t synthetic_count = 8;
  bool augment = true;
  bool hflip = true;
  bool vflip = true;
  double rotation_degrees = 30.0;
};

struct TrainConfig {
  std::size_t epochs = 250;
  std::size_t batch_size = 8;
  double lr_init = 1e-3;
  double lr_min = 1e-5;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double w_bce = 1.0;
  double w_dice = 1.0;
  double threshold = 0.5;
  std::uint64_t seed = 42;
  // Evaluate on the training split instead of the validation split.
  bool eval_on_train = false;
};

struct RunConfig {
  std::string name = "run";
  ModelConfig model;
  DataConfig data;
  TrainConfig train;

  // Cross-field checks; throws ConfigError.
  void validate() const;
};

RunConfig parse_config(const std::string& text, const std::string& origin = "<string>");
RunConfig load_config(const std::filesystem::path& path);

// `key` is a dotted path such as "model.orders" or "train.lr_init".
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
void apply_overrides(RunConfig& cfg, const std::vector<std::pair<std::string, std::string>>& overrides);

// Every key in schema order; parse_config(snapshot(c)) reproduces c and its snapshot byte for byte.
std::string snapshot(const RunConfig& cfg);

std::vector<std::string> config_keys();

}  // namespace hvm
