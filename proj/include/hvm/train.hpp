#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hvm/checkpoint.hpp"
#include "hvm/config.hpp"
#include "hvm/data.hpp"
#include "hvm/network.hpp"

namespace hvm {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kDiceSmooth = 1.0;

// w_bce * BCE(p, t) + w_dice * (1 - (2 sum(p t) + 1) / (sum p + sum t + 1)),
// with p clamped to [1e-7, 1 - 1e-7]; sums run over the whole batch.
template <class T>
Tensor<T> bce_dice_loss(const Tensor<T>& pred, const Tensor<T>& target, double w_bce = 1.0, double w_dice = 1.0);

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
  bool operator==(const ConfusionCounts&) const = default;
};

// A pixel is predicted foreground when prob >= threshold; truth is foreground when > 0.5.
ConfusionCounts count_confusion(std::span<const float> prob, std::span<const float> truth, double threshold);
ConfusionCounts count_confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

struct Metrics {
  double dsc = 0;
  double se = 0;
  double sp = 0;
  double acc = 0;
};

// Zero denominators yield 1.0 (an empty foreground predicted as empty is perfect).
Metrics metrics(const ConfusionCounts& c);

// lr_init at epoch 0, lr_min at epoch epochs-1, cosine in between.
double cosine_lr(std::size_t epoch, const TrainConfig& cfg);

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

// Decoupled weight decay, applied before the moment update.
class AdamW {
 public:
  AdamW(std::vector<Parameter<float>> params, AdamWOptions options);
  void step(double lr);
  void zero_grad();
  std::uint64_t steps() const { return step_; }

  OptimizerRecord state() const;
  void load_state(const OptimizerRecord& record);

 private:
  std::vector<Parameter<float>> params_;
  AdamWOptions opt_;
  std::vector<std::vector<float>> m_, v_;
  std::uint64_t step_ = 0;
};

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& module, const std::string& what)
      : std::runtime_error(what), module_(module) {}
  const std::string& module() const { return module_; }

 private:
  std::string module_;
};

// First top-level module whose output holds a NaN/Inf for this input, or "" if none.
std::string find_first_nonfinite(const HVMUNet<float>& model, const Tensor<float>& images);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  Metrics val;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::vector<double> step_losses;
  double best_val_dsc = -1;
  std::size_t best_epoch = 0;
};

struct TrainOutputs {
  std::filesystem::path log_csv;     // empty: no log
  std::filesystem::path checkpoint;  // empty: no best checkpoint
  std::function<void(const EpochRecord&)> on_epoch;
};

inline constexpr const char* kLogHeader = "epoch,lr,train_loss,val_dsc,val_se,val_sp,val_acc";

TrainResult train(HVMUNet<float>& model, const std::vector<SegmentationSample>& train_set,
                  const std::vector<SegmentationSample>& val_set, const RunConfig& cfg, const TrainOutputs& out);

struct EvalResult {
  ConfusionCounts counts;
  double loss = 0;  // mean batch loss
};

EvalResult evaluate(const HVMUNet<float>& model, const std::vector<SegmentationSample>& samples,
                    std::size_t batch_size, const TrainConfig& cfg);

// No-grad forward returning B x 1 x H x W probabilities.
Tensor<float> predict(const HVMUNet<float>& model, const Tensor<float>& images);

Checkpoint make_checkpoint(const HVMUNet<float>& model, const AdamW* optimizer,
                           const std::map<std::string, std::string>& meta);
// Verifies the config hash first; throws CheckpointError showing both hashes on mismatch.
void load_into(HVMUNet<float>& model, const Checkpoint& ckpt);

std::string format_exact(double v);  // hex float, round-trips bit-exactly
double parse_exact(const std::string& s);

}  // namespace hvm
