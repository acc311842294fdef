#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>

#include "helpers.hpp"
#include "hvm/train.hpp"

using namespace hvm;
using hvm::test::random_tensor;
using hvm::test::TempDir;
using hvm::test::to_vec;

namespace {

RunConfig small_run(std::size_t epochs = 2) {
  RunConfig cfg;
  cfg.model = tiny_model_config();
  cfg.model.input_height = cfg.model.input_width = 32;
  cfg.model.state_dim = 4;
  cfg.data.source = "synthetic";
  cfg.train.epochs = epochs;
  cfg.train.batch_size = 2;
  cfg.train.seed = 5;
  return cfg;
}

double loss_of(const std::vector<double>& p, const std::vector<double>& t) {
  const Shape s{1, 1, 1, p.size()};
  return bce_dice_loss(Tensor<double>(s, p), Tensor<double>(s, t)).item();
}

}  // namespace

TEST(Loss, HandValueAtOnePixel) {
  EXPECT_NEAR(loss_of({0.5}, {1.0}), std::log(2.0) + 0.2, 1e-12);
  const Shape s{1, 1, 1, 1};
  auto half = Tensor<double>(s, {0.5});
  auto one = Tensor<double>(s, {1.0});
  EXPECT_NEAR(bce_dice_loss(half, one, 1.0, 0.0).item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(bce_dice_loss(half, one, 0.0, 1.0).item(), 0.2, 1e-12);
}

TEST(Loss, PerfectPredictionIsNearZero) {
  std::vector<double> t{1, 0, 0, 1, 1, 0, 1, 0};
  EXPECT_LE(loss_of(t, t), 1e-5);
  EXPECT_GE(loss_of(t, t), 0.0);
}

TEST(Loss, DecreasesAsPredictionApproachesTarget) {
  std::mt19937_64 rng(3);
  std::vector<double> t(64);
  for (auto& v : t) v = static_cast<double>(rng() % 2);
  double prev = INFINITY;
  for (double q = 0.5; q <= 0.99 + 1e-12; q += 0.01) {
    std::vector<double> p(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) p[i] = t[i] > 0.5 ? q : 1 - q;
    const double l = loss_of(p, t);
    EXPECT_LT(l, prev) << q;
    prev = l;
  }
}

TEST(Loss, NonNegativeAndShapeChecked) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto p = random_tensor<double>({2, 1, 3, 3}, seed, 0, 1);
    auto t = random_tensor<double>({2, 1, 3, 3}, seed + 100, 0, 1);
    std::vector<double> tb(t.numel());
    for (std::size_t i = 0; i < tb.size(); ++i) tb[i] = t[i] > 0.5 ? 1 : 0;
    EXPECT_GT(bce_dice_loss(p, Tensor<double>(t.shape(), tb)).item(), 0.0);
  }
  EXPECT_THROW(bce_dice_loss(Tensor<float>::zeros({1, 1, 2, 2}), Tensor<float>::zeros({1, 1, 2, 3})), ShapeError);
}

TEST(Metrics, Examples) {
  auto m = metrics({2, 2, 1, 1});
  EXPECT_DOUBLE_EQ(m.dsc, 4.0 / 6.0);
  EXPECT_DOUBLE_EQ(m.se, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(m.sp, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(m.acc, 4.0 / 6.0);
  auto perfect = metrics({5, 3, 0, 0});
  EXPECT_EQ(perfect.dsc, 1.0);
  EXPECT_EQ(perfect.se, 1.0);
  EXPECT_EQ(perfect.acc, 1.0);
  auto empty = metrics({0, 9, 0, 0});
  EXPECT_EQ(empty.dsc, 1.0);
  EXPECT_EQ(empty.se, 1.0);
  EXPECT_EQ(empty.sp, 1.0);
  EXPECT_EQ(empty.acc, 1.0);
  auto nothing_right = metrics({0, 0, 3, 4});
  EXPECT_EQ(nothing_right.dsc, 0.0);
  EXPECT_EQ(nothing_right.acc, 0.0);
}

TEST(Metrics, BoundedForAnyCounts) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 2000; ++i) {
    ConfusionCounts c{rng() % 7, rng() % 7, rng() % 7, rng() % 7};
    auto m = metrics(c);
    for (double v : {m.dsc, m.se, m.sp, m.acc}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Metrics, ConfusionCountingAndThreshold) {
  std::vector<float> prob{0.5f, 0.49f, 0.9f, 0.1f};
  std::vector<float> truth{1, 1, 0, 0};
  auto c = count_confusion(prob, truth, 0.5);
  EXPECT_EQ(c, (ConfusionCounts{1, 1, 1, 1}));
  EXPECT_EQ(c.total(), 4u);
  std::vector<std::uint8_t> a{255, 0, 1, 0}, b{1, 1, 0, 0};
  EXPECT_EQ(count_confusion(a, b), (ConfusionCounts{1, 1, 1, 1}));
  EXPECT_THROW(count_confusion(std::span<const float>(prob), std::span<const float>(truth).first(3), 0.5),
               std::invalid_argument);
}

TEST(Cosine, EndpointsAndMidpoint) {
  TrainConfig cfg;
  EXPECT_EQ(cosine_lr(0, cfg), 1e-3);
  EXPECT_EQ(cosine_lr(249, cfg), 1e-5);
  cfg.epochs = 251;  // cosine crosses zero exactly at epoch 125
  EXPECT_NEAR(cosine_lr(125, cfg), 5.05e-4, 1e-15);
  cfg.epochs = 250;
  for (std::size_t e = 1; e < 250; ++e) {
    const double oracle = 1e-5 + 0.5 * (1e-3 - 1e-5) * (1 + std::cos(std::numbers::pi * e / 249.0));
    EXPECT_NEAR(cosine_lr(e, cfg), oracle, 1e-15);
    EXPECT_LT(cosine_lr(e, cfg), cosine_lr(e - 1, cfg));
  }
  EXPECT_THROW(cosine_lr(250, cfg), std::out_of_range);
  cfg.epochs = 1;
  EXPECT_EQ(cosine_lr(0, cfg), cfg.lr_init);
}

namespace {

// One scalar parameter with a preset gradient.
Parameter<float> scalar_param(float value, float grad) {
  auto t = Tensor<float>::scalar(value, true);
  if (grad != 0.0f) t.mutable_grad()[0] = grad;
  return {"w", t};
}

}  // namespace

TEST(AdamW, ZeroGradZeroDecayIsNoOp) {
  auto p = scalar_param(0.75f, 0.0f);
  AdamW opt({p}, {0.9, 0.999, 1e-8, 0.0});
  opt.step(1e-3);
  EXPECT_EQ(p.tensor[0], 0.75f);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  auto p = scalar_param(1.0f, 0.3f);
  AdamW opt({p}, {0.9, 0.999, 1e-8, 0.0});
  opt.step(1e-3);
  const double oracle = 1.0 - 1e-3 * 0.3 / (0.3 + 1e-8);
  EXPECT_NEAR(p.tensor[0], oracle, 1e-7);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, DecoupledDecayShrinksByFactor) {
  auto p = scalar_param(2.0f, 0.0f);
  AdamW opt({p}, {0.9, 0.999, 1e-8, 1e-2});
  opt.step(0.1);
  EXPECT_NEAR(p.tensor[0], 2.0 * (1 - 0.1 * 1e-2), 1e-7);
}

TEST(AdamW, StepInvariantToGradientScale) {
  for (float g : {0.02f, -1.5f, 40.0f}) {
    auto a = scalar_param(0.5f, g), b = scalar_param(0.5f, 10 * g);
    AdamW oa({a}, {}), ob({b}, {});
    for (int i = 0; i < 3; ++i) {
      oa.step(1e-3);
      ob.step(1e-3);
    }
    const double da = a.tensor[0] - 0.5, db = b.tensor[0] - 0.5;
    EXPECT_LT(std::abs(da - db), 0.01 * std::abs(da)) << g;
  }
}

TEST(Training, OneSmallStepDecreasesLoss) {
  auto cfg = small_run();
  HVMUNet<float> model(cfg.model, 1);
  auto batch = make_batch(make_circles(4, 32, 2));
  AdamW opt(model.parameters(), {});
  auto loss0 = bce_dice_loss(model.forward(batch.images), batch.targets);
  const double l0 = loss0.item();
  backward(loss0);
  opt.step(1e-4);
  NoGradGuard g;
  const double l1 = bce_dice_loss(model.forward(batch.images), batch.targets).item();
  EXPECT_LT(l1, l0);
}

TEST(Training, SeedFixedRunsAreIdentical) {
  auto cfg = small_run(2);
  auto data = make_circles(4, 32, 3);
  auto run = [&] {
    HVMUNet<float> model(cfg.model, cfg.train.seed);
    return train(model, data, data, cfg, {});
  };
  auto a = run(), b = run();
  ASSERT_EQ(a.step_losses.size(), 4u);
  EXPECT_EQ(a.step_losses, b.step_losses);
  EXPECT_EQ(a.best_val_dsc, b.best_val_dsc);
}

TEST(Training, BestCheckpointReproducesValidationDsc) {
  TempDir dir("best");
  auto cfg = small_run(3);
  auto data = make_circles(6, 32, 4);
  std::vector<SegmentationSample> tr(data.begin(), data.begin() + 4), va(data.begin() + 4, data.end());
  HVMUNet<float> model(cfg.model, 9);
  TrainOutputs out{dir.path() / "log.csv", dir.path() / "best.ckpt", {}};
  auto res = train(model, tr, va, cfg, out);
  ASSERT_EQ(res.history.size(), 3u);

  auto ckpt = load_checkpoint(out.checkpoint);
  EXPECT_EQ(parse_exact(ckpt.meta.at("val_dsc")), res.best_val_dsc);
  EXPECT_EQ(ckpt.meta.at("epoch"), std::to_string(res.best_epoch));
  HVMUNet<float> fresh(cfg.model, 1234);
  load_into(fresh, ckpt);
  EXPECT_EQ(metrics(evaluate(fresh, va, cfg.train.batch_size, cfg.train).counts).dsc, res.best_val_dsc);

  std::ifstream log(out.log_csv);
  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line, kLogHeader);
  int rows = 0;
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 3);
}

TEST(Training, NonFiniteLossNamesFirstModule) {
  auto cfg = small_run(1);
  HVMUNet<float> model(cfg.model, 2);
  for (auto& p : model.parameters()) {
    if (p.name == "enc.stage3.hvss.ln1.weight") p.tensor.mutable_data()[0] = NAN;
  }
  auto data = make_circles(2, 32, 5);
  try {
    train(model, data, data, cfg, {});
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.module(), "enc.stage3.hvss");
    EXPECT_NE(std::string(e.what()).find("enc.stage3.hvss"), std::string::npos);
  }
}

TEST(Training, EmptySetsRejected) {
  auto cfg = small_run(1);
  HVMUNet<float> model(cfg.model, 2);
  auto data = make_circles(2, 32, 5);
  EXPECT_THROW(train(model, {}, data, cfg, {}), std::invalid_argument);
  EXPECT_THROW(train(model, data, {}, cfg, {}), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir("ckpt");
  auto cfg = small_run();
  HVMUNet<float> model(cfg.model, 3);
  AdamW opt(model.parameters(), {});
  auto ckpt = make_checkpoint(model, &opt, {{"note", "x y"}});
  save_checkpoint(dir.path() / "a.ckpt", ckpt);
  auto back = load_checkpoint(dir.path() / "a.ckpt");
  EXPECT_EQ(back.config_hash, ckpt.config_hash);
  EXPECT_EQ(back.config, ckpt.config);
  EXPECT_EQ(back.meta, ckpt.meta);
  ASSERT_EQ(back.params.size(), ckpt.params.size());
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    EXPECT_EQ(back.params[i].name, ckpt.params[i].name);
    EXPECT_EQ(back.params[i].shape, ckpt.params[i].shape);
    EXPECT_EQ(back.params[i].data, ckpt.params[i].data);
  }
  ASSERT_TRUE(back.optimizer.has_value());
  EXPECT_EQ(back.optimizer->first_moment.size(), ckpt.params.size());

  HVMUNet<float> other(cfg.model, 77);
  load_into(other, back);
  auto x = random_tensor<float>({1, 3, 32, 32}, 1, 0, 1);
  EXPECT_EQ(to_vec(predict(model, x)), to_vec(predict(other, x)));
}

TEST(Checkpoint, CorruptionAndMismatchRejected) {
  TempDir dir("corrupt");
  auto cfg = small_run();
  HVMUNet<float> model(cfg.model, 3);
  const auto path = dir.path() / "m.ckpt";
  save_checkpoint(path, make_checkpoint(model, nullptr, {}));
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  std::ofstream(dir.path() / "junk.ckpt") << "definitely not a checkpoint";
  EXPECT_THROW(load_checkpoint(dir.path() / "junk.ckpt"), CheckpointError);
  EXPECT_THROW(load_checkpoint(dir.path() / "absent.ckpt"), CheckpointError);

  auto other_cfg = cfg.model;
  other_cfg.orders = {1, 1, 1, 1};
  HVMUNet<float> other(other_cfg, 3);
  try {
    load_into(other, make_checkpoint(model, nullptr, {}));
    FAIL() << "expected a hash mismatch";
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(hash_hex(cfg.model.hash())), std::string::npos) << msg;
    EXPECT_NE(msg.find(hash_hex(other_cfg.hash())), std::string::npos) << msg;
  }
}

TEST(FormatExact, RoundTripsBits) {
  for (double v : {0.0, 1.0, 1.0 / 3.0, 0.98765432109876, 1e-300, -2.5}) EXPECT_EQ(parse_exact(format_exact(v)), v);
  EXPECT_THROW(parse_exact("zz"), std::invalid_argument);
  EXPECT_THROW(parse_exact("0x1p-2 "), std::invalid_argument);
}
