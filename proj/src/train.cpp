#include "hvm/train.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

namespace hvm {

template <class T>
Tensor<T> bce_dice_loss(const Tensor<T>& pred, const Tensor<T>& target, double w_bce, double w_dice) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  const auto p = ops::clamp(pred, static_cast<T>(kProbClamp), static_cast<T>(1 - kProbClamp));
  const auto t = target.detach();
  const auto one_minus = [](const Tensor<T>& x) { return ops::add_scalar(ops::neg(x), T(1)); };

  const auto ll = ops::add(ops::mul(t, ops::log(p)), ops::mul(one_minus(t), ops::log(one_minus(p))));
  const auto bce = ops::neg(ops::mean(ll));

  const auto inter = ops::sum(ops::mul(p, t));
  const auto num = ops::add_scalar(ops::scale(inter, T(2)), static_cast<T>(kDiceSmooth));
  const auto den = ops::add_scalar(ops::add(ops::sum(p), ops::sum(t)), static_cast<T>(kDiceSmooth));
  const auto dice = one_minus(ops::div(num, den));

  return ops::add(ops::scale(bce, static_cast<T>(w_bce)), ops::scale(dice, static_cast<T>(w_dice)));
}

template Tensor<float> bce_dice_loss(const Tensor<float>&, const Tensor<float>&, double, double);
template Tensor<double> bce_dice_loss(const Tensor<double>&, const Tensor<double>&, double, double);

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  tn += o.tn;
  fp += o.fp;
  fn += o.fn;
  return *this;
}

ConfusionCounts count_confusion(std::span<const float> prob, std::span<const float> truth, double threshold) {
  if (prob.size() != truth.size()) throw std::invalid_argument("count_confusion: size mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const bool p = prob[i] >= threshold;
    const bool t = truth[i] > 0.5f;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

ConfusionCounts count_confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) throw std::invalid_argument("count_confusion: size mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

Metrics metrics(const ConfusionCounts& c) {
  auto ratio = [](std::uint64_t num, std::uint64_t den) {
    return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  return {ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn), ratio(c.tp, c.tp + c.fn), ratio(c.tn, c.tn + c.fp),
          ratio(c.tp + c.tn, c.total())};
}

double cosine_lr(std::size_t epoch, const TrainConfig& cfg) {
  if (cfg.epochs == 0 || epoch >= cfg.epochs) throw std::out_of_range("cosine_lr: epoch outside [0, epochs)");
  if (cfg.epochs == 1) return cfg.lr_init;
  // Weighted form keeps both endpoints exact: w is exactly 1 at epoch 0 and 0 at the last epoch.
  const double w =
      0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1)));
  return cfg.lr_init * w + cfg.lr_min * (1.0 - w);
}

AdamW::AdamW(std::vector<Parameter<float>> params, AdamWOptions options) : params_(std::move(params)), opt_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0f);
    v_.emplace_back(p.tensor.numel(), 0.0f);
  }
}

void AdamW::step(double lr) {
  ++step_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].tensor;
    auto w = t.mutable_data();
    const auto g = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      double wj = w[j];
      wj -= lr * opt_.weight_decay * wj;
      const double mj = opt_.beta1 * m[j] + (1 - opt_.beta1) * gj;
      const double vj = opt_.beta2 * v[j] + (1 - opt_.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      wj -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + opt_.eps);
      w[j] = static_cast<float>(wj);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

OptimizerRecord AdamW::state() const {
  OptimizerRecord r;
  r.step = step_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    r.first_moment.push_back({params_[i].name, params_[i].tensor.shape(), m_[i]});
    r.second_moment.push_back({params_[i].name, params_[i].tensor.shape(), v_[i]});
  }
  return r;
}

void AdamW::load_state(const OptimizerRecord& r) {
  if (r.first_moment.size() != params_.size() || r.second_moment.size() != params_.size()) {
    throw CheckpointError("optimizer state covers " + std::to_string(r.first_moment.size()) + " tensors, model has " +
                          std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& p = params_[i];
    for (const auto* rec : {&r.first_moment[i], &r.second_moment[i]}) {
      if (rec->name != p.name || rec->shape != p.tensor.shape()) {
        throw CheckpointError("optimizer state entry '" + rec->name + "' does not match parameter '" + p.name + "'");
      }
    }
    m_[i] = r.first_moment[i].data;
    v_[i] = r.second_moment[i].data;
  }
  step_ = r.step;
}

namespace {

bool all_finite(std::span<const float> v) {
  for (float x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace

std::string find_first_nonfinite(const HVMUNet<float>& model, const Tensor<float>& images) {
  NoGradGuard guard;
  std::string first;
  model.forward(images, [&](const std::string& name, const Tensor<float>& t) {
    if (first.empty() && !all_finite(t.data())) first = name;
  });
  return first;
}

Tensor<float> predict(const HVMUNet<float>& model, const Tensor<float>& images) {
  NoGradGuard guard;
  return model.forward(images);
}

EvalResult evaluate(const HVMUNet<float>& model, const std::vector<SegmentationSample>& samples,
                    std::size_t batch_size, const TrainConfig& cfg) {
  EvalResult out;
  if (samples.empty()) return out;
  NoGradGuard guard;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    const auto batch = make_batch(std::vector<SegmentationSample>(samples.begin() + start, samples.begin() + end));
    const auto prob = model.forward(batch.images);
    out.counts += count_confusion(prob.data(), batch.targets.data(), cfg.threshold);
    out.loss += bce_dice_loss(prob, batch.targets, cfg.w_bce, cfg.w_dice).item();
    ++batches;
  }
  out.loss /= static_cast<double>(batches);
  return out;
}

std::string format_exact(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::hex);
  return std::string(buf, p);
}

double parse_exact(const std::string& s) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, std::chars_format::hex);
  if (ec != std::errc() || p != s.data() + s.size()) throw std::invalid_argument("not a hex float: '" + s + "'");
  return v;
}

Checkpoint make_checkpoint(const HVMUNet<float>& model, const AdamW* optimizer,
                           const std::map<std::string, std::string>& meta) {
  Checkpoint ckpt;
  ckpt.config_hash = model.config().hash();
  ckpt.config = model.config().canonical();
  ckpt.params = capture_parameters(model);
  if (optimizer) ckpt.optimizer = optimizer->state();
  ckpt.meta = meta;
  return ckpt;
}

void load_into(HVMUNet<float>& model, const Checkpoint& ckpt) {
  const auto expected = model.config().hash();
  if (ckpt.config_hash != expected) {
    throw CheckpointError("checkpoint config hash " + hash_hex(ckpt.config_hash) + " does not match model hash " +
                          hash_hex(expected) + " (checkpoint: " + ckpt.config + "; model: " +
                          model.config().canonical() + ")");
  }
  restore_parameters(model, ckpt.params);
}

TrainResult train(HVMUNet<float>& model, const std::vector<SegmentationSample>& train_set,
                  const std::vector<SegmentationSample>& val_set, const RunConfig& cfg, const TrainOutputs& out) {
  const auto& tc = cfg.train;
  if (train_set.empty()) throw std::invalid_argument("training set is empty");
  const auto& eval_set = tc.eval_on_train ? train_set : val_set;
  if (eval_set.empty()) throw std::invalid_argument("validation set is empty (set train.eval_on_train = true to score the training set)");

  AdamW opt(model.parameters(), {tc.beta1, tc.beta2, tc.eps, tc.weight_decay});
  std::mt19937_64 rng(tc.seed ^ 0x9e3779b97f4a7c15ULL);
  const AugmentConfig aug{cfg.data.hflip, cfg.data.vflip, cfg.data.rotation_degrees};

  std::ofstream log;
  if (!out.log_csv.empty()) {
    log.open(out.log_csv, std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write log '" + out.log_csv.string() + "'");
    log << kLogHeader << "\n";
  }

  TrainResult result;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, tc);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_indices(order, rng);

    double loss_sum = 0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t end = std::min(order.size(), start + tc.batch_size);
      std::vector<SegmentationSample> chunk;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = train_set[order[i]];
        chunk.push_back(cfg.data.augment ? augment(s, rng, aug) : s);
      }
      const auto batch = make_batch(chunk);

      opt.zero_grad();
      const auto prob = model.forward(batch.images);
      const auto loss = bce_dice_loss(prob, batch.targets, tc.w_bce, tc.w_dice);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        active_tape<float>().clear();
        auto where = find_first_nonfinite(model, batch.images);
        if (where.empty()) where = "loss";
        throw NonFiniteError(where, "non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                        std::to_string(opt.steps()) + "; first non-finite output in module '" +
                                        where + "'");
      }
      backward(loss);
      opt.step(lr);
      loss_sum += lv;
      result.step_losses.push_back(lv);
      ++steps;
    }

    const auto ev = evaluate(model, eval_set, tc.batch_size, tc);
    EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(steps), metrics(ev.counts)};
    result.history.push_back(rec);
    if (log) {
      log << rec.epoch << "," << fmt(rec.lr) << "," << fmt(rec.train_loss) << "," << fmt(rec.val.dsc) << ","
          << fmt(rec.val.se) << "," << fmt(rec.val.sp) << "," << fmt(rec.val.acc) << "\n";
      log.flush();
    }
    if (rec.val.dsc > result.best_val_dsc) {
      result.best_val_dsc = rec.val.dsc;
      result.best_epoch = epoch;
      if (!out.checkpoint.empty()) {
        save_checkpoint(out.checkpoint, make_checkpoint(model, &opt,
                                                        {{"epoch", std::to_string(epoch)},
                                                         {"val_dsc", format_exact(rec.val.dsc)},
                                                         {"seed", std::to_string(tc.seed)}}));
      }
    }
    if (out.on_epoch) out.on_epoch(rec);
  }
  return result;
}

}  // namespace hvm
