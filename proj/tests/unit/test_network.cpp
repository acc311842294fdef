#include <gtest/gtest.h>

#include <set>

#include "helpers.hpp"
#include "hvm/network.hpp"

using namespace hvm;
using hvm::test::fill;
using hvm::test::random_tensor;
using hvm::test::to_vec;

namespace {

ModelConfig small_config(std::size_t size = 32) {
  auto cfg = tiny_model_config();
  cfg.input_height = cfg.input_width = size;
  cfg.state_dim = 4;
  return cfg;
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  auto bad = cfg;
  bad.channels.pop_back();
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.orders = {2, 3, 4};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.input_height = 100;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.orders = {2, 3, 4, 9};  // 256 is not divisible by 2^9
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  EXPECT_THROW(HVMUNet<float>(bad, 1), std::invalid_argument);
}

TEST(ModelConfig, HashTracksCanonicalForm) {
  ModelConfig a, b;
  EXPECT_EQ(a.hash(), b.hash());
  b.orders = {1, 1, 1, 1};
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_EQ(a.canonical(), "channels=8,16,32,64,128,256;orders=2,3,4,5;input_channels=3;input_size=256x256;"
                           "mlp_ratio=4;state_dim=16;conv_first=1");
  EXPECT_EQ(hash_hex(0xabcULL), "0000000000000abc");
}

TEST(Network, OutputShapeRangeAndPyramid) {
  const auto cfg = small_config(64);
  HVMUNet<float> model(cfg, 1);
  auto x = random_tensor<float>({2, 3, 64, 64}, 2, 0, 1);
  NoGradGuard g;
  auto feats = model.encode(x);
  ASSERT_EQ(feats.size(), kStages);
  for (std::size_t s = 1; s <= kStages; ++s) {
    EXPECT_EQ(feats[s - 1].shape(), (Shape{2, cfg.channels[s - 1], 64u >> (s - 1), 64u >> (s - 1)})) << s;
  }
  auto y = model.forward(x);
  EXPECT_EQ(y.shape(), (Shape{2, 1, 64, 64}));
  for (float v : y.data()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
  EXPECT_THROW(model.forward(Tensor<float>::zeros({1, 3, 48, 48})), ShapeError);
  EXPECT_THROW(model.forward(Tensor<float>::zeros({1, 1, 64, 64})), ShapeError);
}

TEST(Network, ForwardIsDeterministic) {
  HVMUNet<float> model(small_config(), 3);
  auto x = random_tensor<float>({1, 3, 32, 32}, 4, 0, 1);
  EXPECT_EQ(to_vec(model.forward(x)), to_vec(model.forward(x)));
  active_tape<float>().clear();
  HVMUNet<float> twin(small_config(), 3);
  NoGradGuard g;
  EXPECT_EQ(to_vec(model.forward(x)), to_vec(twin.forward(x)));
}

TEST(Network, DecoderMirrorsEncoderChannels) {
  HVMUNet<float> model(small_config(), 5);
  for (std::size_t s = 3; s <= kStages; ++s) {
    EXPECT_EQ(model.encoder[s - 1].hvss->order(), model.decoder[s - 2].hvss->order());
    EXPECT_EQ(model.encoder[s - 1].hvss->ln1.gamma.dim(0), model.decoder[s - 2].hvss->ln1.gamma.dim(0));
  }
  EXPECT_EQ(model.decoder[0].hvss, nullptr);
}

TEST(Network, FewerOrdersFewerParameters) {
  auto full = small_config();
  auto flat = full;
  flat.orders = {1, 1, 1, 1};
  EXPECT_LT(HVMUNet<float>(flat, 1).parameter_count(), HVMUNet<float>(full, 1).parameter_count());
}

TEST(Network, ParameterNamesUniqueAndNested) {
  HVMUNet<float> model(small_config(), 6);
  std::set<std::string> names;
  for (auto& p : model.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  EXPECT_TRUE(names.count("enc.stage3.hvss.hss.proj_in.weight"));
  EXPECT_TRUE(names.count("bridge.sab.conv.weight"));
  EXPECT_TRUE(names.count("bridge.cab.attn5.bias"));
  EXPECT_TRUE(names.count("dec.stage2.conv.weight"));
  EXPECT_TRUE(names.count("head.weight"));
}

TEST(Network, EveryParameterReceivesGradient) {
  HVMUNet<float> model(small_config(), 7);
  auto x = random_tensor<float>({2, 3, 32, 32}, 8, 0, 1);
  auto t = random_tensor<float>({2, 1, 32, 32}, 9, 0, 1);
  backward(ops::sum(ops::mul(model.forward(x), t)));
  for (auto& p : model.parameters()) {
    bool nonzero = false;
    for (float g : p.tensor.grad()) nonzero = nonzero || g != 0.0f;
    EXPECT_TRUE(nonzero) << p.name;
  }
}

TEST(Network, SummaryHasOneRowPerSubmodule) {
  HVMUNet<float> model(small_config(), 10);
  auto rows = model.summary();
  // 6 encoder convs, 4 encoder H-VSS, 2 bridges, 5 decoder convs, 4 decoder H-VSS, head.
  EXPECT_EQ(rows.size(), 22u);
  std::size_t total = 0;
  for (const auto& r : rows) {
    total += r.parameters;
    EXPECT_FALSE(r.output.empty()) << r.module;
  }
  EXPECT_EQ(total, model.parameter_count());
  EXPECT_EQ(rows.back().module, "head");
  EXPECT_EQ(rows.back().output, (Shape{1, 1, 32, 32}));
}

TEST(Network, ConvLastOrdering) {
  auto cfg = small_config();
  cfg.conv_first = false;
  HVMUNet<float> model(cfg, 11);
  NoGradGuard g;
  auto y = model.forward(random_tensor<float>({1, 3, 32, 32}, 12, 0, 1));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 32, 32}));
}

TEST(SpatialBridge, ZeroConvScalesByOneAndAHalf) {
  InitRng rng(1);
  SpatialBridge<float> sab(rng);
  fill(sab.conv.weight, 0.0f);
  fill(sab.conv.bias, 0.0f);
  auto x = random_tensor<float>({2, 5, 6, 6}, 2);
  auto y = sab.forward(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_FLOAT_EQ(y[i], 1.5f * x[i]);
  for (float v : sab.forward(Tensor<float>::zeros({1, 3, 4, 4})).data()) EXPECT_EQ(v, 0.0f);
}

TEST(SpatialBridge, SharedConvAccumulatesEveryLevel) {
  InitRng rng(3);
  SpatialBridge<double> sab(rng);
  std::vector<Tensor<double>> xs, rs;
  for (std::size_t i = 0; i < 5; ++i) {
    const std::size_t hw = 32u >> i;
    xs.push_back(random_tensor<double>({1, 4, hw, hw}, 10 + i));
    rs.push_back(random_tensor<double>({1, 4, hw, hw}, 20 + i));
  }
  // Per-level gradients, each from its own backward pass.
  std::vector<double> expected(sab.conv.weight.numel(), 0.0);
  for (std::size_t i = 0; i < 5; ++i) {
    sab.zero_grad();
    backward(ops::sum(ops::mul(sab.forward(xs[i]), rs[i])));
    bool nonzero = false;
    for (std::size_t k = 0; k < expected.size(); ++k) {
      expected[k] += sab.conv.weight.grad()[k];
      nonzero = nonzero || sab.conv.weight.grad()[k] != 0.0;
    }
    EXPECT_TRUE(nonzero) << "level " << i;
  }
  sab.zero_grad();
  auto total = ops::sum(ops::mul(sab.forward(xs[0]), rs[0]));
  for (std::size_t i = 1; i < 5; ++i) total = ops::add(total, ops::sum(ops::mul(sab.forward(xs[i]), rs[i])));
  backward(total);
  for (std::size_t k = 0; k < expected.size(); ++k) EXPECT_NEAR(sab.conv.weight.grad()[k], expected[k], 1e-10);
}

TEST(ChannelBridge, ZeroWeightsAndZeroSkips) {
  InitRng rng(4);
  ChannelBridge<float> cab({2, 3, 4, 5, 6}, rng);
  for (auto& p : cab.parameters()) fill(p.tensor, 0.0f);
  std::vector<Tensor<float>> skips;
  for (std::size_t i = 0; i < 5; ++i) skips.push_back(random_tensor<float>({1, 2 + i, 4, 4}, i));
  auto out = cab.forward(skips);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t k = 0; k < skips[i].numel(); ++k) EXPECT_FLOAT_EQ(out[i][k], 1.5f * skips[i][k]);
  }
  InitRng rng2(5);
  ChannelBridge<float> fresh({2, 3, 4, 5, 6}, rng2);
  std::vector<Tensor<float>> zeros;
  for (std::size_t i = 0; i < 5; ++i) zeros.push_back(Tensor<float>::zeros({1, 2 + i, 4, 4}));
  for (const auto& o : fresh.forward(zeros))
    for (float v : o.data()) EXPECT_EQ(v, 0.0f);
}

TEST(ChannelBridge, ShallowStageSteersDeepAttention) {
  InitRng rng(6);
  ChannelBridge<double> cab({2, 3, 4, 5, 6}, rng);
  std::vector<Tensor<double>> skips;
  for (std::size_t i = 0; i < 5; ++i) skips.push_back(random_tensor<double>({1, 2 + i, 4, 4}, 30 + i));
  auto base = to_vec(cab.forward(skips)[4]);
  skips[0] = ops::add_scalar(skips[0], 0.5);
  auto moved = to_vec(cab.forward(skips)[4]);
  EXPECT_GT(test::max_abs_diff(base, moved), 1e-6);
}
