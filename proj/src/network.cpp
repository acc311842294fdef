#include "hvm/network.hpp"

#include <cstdio>
#include <stdexcept>
#include <string>

namespace hvm {

namespace {

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

template <class T>
Tensor<T> conv_silu(const Conv2d<T>& conv, const Tensor<T>& x) {
  return ops::silu(conv.forward(x));
}

template <class T>
void notify(const typename HVMUNet<T>::Observer& observer, const std::string& name, const Tensor<T>& t) {
  if (observer) observer(name, t);
}

std::string stage_name(const char* side, std::size_t s, const char* part) {
  return std::string(side) + ".stage" + std::to_string(s) + "." + part;
}

}  // namespace

void ModelConfig::validate() const {
  if (channels.size() != kStages) {
    throw std::invalid_argument("model.channels needs " + std::to_string(kStages) + " entries, got " +
                                std::to_string(channels.size()));
  }
  for (auto c : channels) {
    if (c == 0) throw std::invalid_argument("model.channels entries must be positive");
  }
  if (orders.size() != kHvssStages) {
    throw std::invalid_argument("model.orders needs " + std::to_string(kHvssStages) + " entries, got " +
                                std::to_string(orders.size()));
  }
  for (std::size_t i = 0; i < kHvssStages; ++i) {
    const std::size_t n = orders[i];
    if (n < 1 || n > 16) throw std::invalid_argument("model.orders entries must be in 1..16, got " + std::to_string(n));
    const std::size_t stage = i + 3;
    const std::size_t c = hvss_channels(stage);
    // The smallest order width C/2^(n-1) is split in half by Local-SS2D.
    const std::size_t need = std::size_t{1} << n;
    if (c % need != 0) {
      throw std::invalid_argument("model.channels: stage " + std::to_string(stage) + " H-VSS runs on C=" +
                                  std::to_string(c) + " channels, which order n=" + std::to_string(n) +
                                  " needs divisible by " + std::to_string(need));
    }
  }
  if (input_channels == 0) throw std::invalid_argument("model.input_channels must be positive");
  if (input_height == 0 || input_width == 0 || input_height % 32 != 0 || input_width % 32 != 0) {
    throw std::invalid_argument("model.input_size " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                                " must be a positive multiple of 32 per side");
  }
  if (mlp_ratio == 0) throw std::invalid_argument("model.mlp_ratio must be positive");
  if (state_dim == 0) throw std::invalid_argument("model.state_dim must be positive");
}

std::size_t ModelConfig::hvss_channels(std::size_t stage) const {
  if (stage < 3 || stage > kStages) throw std::out_of_range("H-VSS stages are 3..6");
  return conv_first ? channels.at(stage - 1) : channels.at(stage - 2);
}

std::string ModelConfig::canonical() const {
  return "channels=" + join(channels) + ";orders=" + join(orders) + ";input_channels=" + std::to_string(input_channels) +
         ";input_size=" + std::to_string(input_height) + "x" + std::to_string(input_width) +
         ";mlp_ratio=" + std::to_string(mlp_ratio) + ";state_dim=" + std::to_string(state_dim) +
         ";conv_first=" + (conv_first ? "1" : "0");
}

std::uint64_t ModelConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t hash) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.channels = {4, 8, 16, 32, 64, 128};
  cfg.input_height = 64;
  cfg.input_width = 64;
  return cfg;
}

template <class T>
SpatialBridge<T>::SpatialBridge(InitRng& rng) : conv(2, 1, 7, ops::Conv2dOptions{1, 9, 3, 1}, rng) {
  this->register_module("conv", conv);
}

template <class T>
Tensor<T> SpatialBridge<T>::forward(const Tensor<T>& x) const {
  if (x.rank() != 4) throw ShapeError("SAB expects B x C x H x W, got " + shape_str(x.shape()));
  auto pooled = ops::concat<T>({ops::max(x, 1, true), ops::mean(x, 1, true)}, 1);
  auto att = ops::sigmoid(conv.forward(pooled));
  return ops::add(x, ops::mul(x, att));
}

template <class T>
ChannelBridge<T>::ChannelBridge(const std::vector<std::size_t>& channels, InitRng& rng) : channels_(channels) {
  std::size_t total = 0;
  for (auto c : channels) total += c;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    attn.push_back(std::make_unique<Linear<T>>(total, channels[i], true, rng));
    this->register_module("attn" + std::to_string(i + 1), *attn.back());
  }
}

template <class T>
std::vector<Tensor<T>> ChannelBridge<T>::forward(const std::vector<Tensor<T>>& skips) const {
  if (skips.size() != channels_.size()) {
    throw ShapeError("CAB expects " + std::to_string(channels_.size()) + " skips, got " + std::to_string(skips.size()));
  }
  std::vector<Tensor<T>> pooled;
  for (std::size_t i = 0; i < skips.size(); ++i) {
    const auto& s = skips[i];
    if (s.rank() != 4 || s.dim(1) != channels_[i] || s.dim(0) != skips[0].dim(0)) {
      throw ShapeError("CAB skip " + std::to_string(i + 1) + " has shape " + shape_str(s.shape()));
    }
    pooled.push_back(ops::mean(ops::reshape(s, {s.dim(0), s.dim(1), s.dim(2) * s.dim(3)}), 2, false));
  }
  const auto all = ops::concat(pooled, 1);
  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i < skips.size(); ++i) {
    const auto& s = skips[i];
    auto att = ops::reshape(ops::sigmoid(attn[i]->forward(all)), {s.dim(0), s.dim(1), 1, 1});
    out.push_back(ops::add(s, ops::mul(s, att)));
  }
  return out;
}

template <class T>
HVMUNet<T>::HVMUNet(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  InitRng rng(seed);
  const auto& ch = config_.channels;
  const ops::Conv2dOptions same{1, 1, 1, 1};

  encoder.resize(kStages);
  for (std::size_t s = 1; s <= kStages; ++s) {
    const std::size_t in = s == 1 ? config_.input_channels : ch[s - 2];
    auto& st = encoder[s - 1];
    st.conv = std::make_unique<Conv2d<T>>(in, ch[s - 1], 3, same, rng);
    if (s >= 3) {
      st.hvss = std::make_unique<HvssBlock<T>>(config_.hvss_channels(s), config_.orders[s - 3], config_.mlp_ratio,
                                               config_.state_dim, rng);
    }
    // Registration order follows execution order.
    if (s >= 3 && !config_.conv_first) this->register_module(stage_name("enc", s, "hvss"), *st.hvss);
    this->register_module(stage_name("enc", s, "conv"), *st.conv);
    if (s >= 3 && config_.conv_first) this->register_module(stage_name("enc", s, "hvss"), *st.hvss);
  }

  sab = std::make_unique<SpatialBridge<T>>(rng);
  cab = std::make_unique<ChannelBridge<T>>(std::vector<std::size_t>(ch.begin(), ch.end() - 1), rng);
  this->register_module("bridge.sab", *sab);
  this->register_module("bridge.cab", *cab);

  decoder.resize(kStages - 1);
  for (std::size_t s = kStages; s >= 2; --s) {
    auto& st = decoder[s - 2];
    st.conv = std::make_unique<Conv2d<T>>(ch[s - 1], ch[s - 2], 3, same, rng);
    if (s >= 3) {
      st.hvss = std::make_unique<HvssBlock<T>>(config_.hvss_channels(s), config_.orders[s - 3], config_.mlp_ratio,
                                               config_.state_dim, rng);
    }
    if (s >= 3 && config_.conv_first) this->register_module(stage_name("dec", s, "hvss"), *st.hvss);
    this->register_module(stage_name("dec", s, "conv"), *st.conv);
    if (s >= 3 && !config_.conv_first) this->register_module(stage_name("dec", s, "hvss"), *st.hvss);
  }

  head = std::make_unique<Conv2d<T>>(ch[0], 1, 1, ops::Conv2dOptions{}, rng);
  this->register_module("head", *head);
}

template <class T>
Tensor<T> HVMUNet<T>::run_encoder_stage(std::size_t s, Tensor<T> x, const Observer& observer) const {
  const auto& st = encoder[s - 1];
  if (s > 1) x = ops::max_pool2d(x, 2);
  auto run_conv = [&] {
    x = conv_silu(*st.conv, x);
    notify<T>(observer, stage_name("enc", s, "conv"), x);
  };
  auto run_hvss = [&] {
    if (!st.hvss) return;
    x = st.hvss->forward(x);
    notify<T>(observer, stage_name("enc", s, "hvss"), x);
  };
  if (config_.conv_first) {
    run_conv();
    run_hvss();
  } else {
    run_hvss();
    run_conv();
  }
  return x;
}

template <class T>
Tensor<T> HVMUNet<T>::run_decoder_stage(std::size_t s, Tensor<T> x, const Observer& observer) const {
  const auto& st = decoder[s - 2];
  // The conv always runs on the upsampled grid so the finest stage refines block edges.
  auto run_conv = [&] {
    x = conv_silu(*st.conv, ops::upsample_nearest2d(x, 2));
    notify<T>(observer, stage_name("dec", s, "conv"), x);
  };
  auto run_hvss = [&] {
    if (!st.hvss) return;
    x = st.hvss->forward(x);
    notify<T>(observer, stage_name("dec", s, "hvss"), x);
  };
  if (config_.conv_first) {
    run_hvss();
    run_conv();
  } else {
    run_conv();
    run_hvss();
  }
  return x;
}

template <class T>
std::vector<Tensor<T>> HVMUNet<T>::encode(const Tensor<T>& image, const Observer& observer) const {
  if (image.rank() != 4 || image.dim(1) != config_.input_channels) {
    throw ShapeError("model expects B x " + std::to_string(config_.input_channels) + " x H x W, got " +
                     shape_str(image.shape()));
  }
  if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0) {
    throw ShapeError("input spatial size " + shape_str(image.shape()) + " must be divisible by 32");
  }
  std::vector<Tensor<T>> out;
  Tensor<T> x = image;
  for (std::size_t s = 1; s <= kStages; ++s) {
    x = run_encoder_stage(s, x, observer);
    out.push_back(x);
  }
  return out;
}

template <class T>
Tensor<T> HVMUNet<T>::forward(const Tensor<T>& image, const Observer& observer) const {
  auto feats = encode(image, observer);
  std::vector<Tensor<T>> skips;
  for (std::size_t i = 0; i < kSkips; ++i) skips.push_back(sab->forward(feats[i]));
  notify<T>(observer, "bridge.sab", skips.back());
  skips = cab->forward(skips);
  notify<T>(observer, "bridge.cab", skips.back());

  Tensor<T> x = feats[kStages - 1];
  for (std::size_t s = kStages; s >= 2; --s) {
    x = ops::add(run_decoder_stage(s, x, observer), skips[s - 2]);
  }
  auto prob = ops::sigmoid(head->forward(x));
  notify<T>(observer, "head", prob);
  return prob;
}

template <class T>
std::vector<SummaryRow> HVMUNet<T>::summary() const {
  std::vector<SummaryRow> rows;
  auto count = [](const Module<T>& m) { return m.parameter_count(); };
  auto add_row = [&](const std::string& name, std::size_t n) { rows.push_back({name, n, {}}); };
  for (std::size_t s = 1; s <= kStages; ++s) {
    const auto& st = encoder[s - 1];
    if (st.hvss && !config_.conv_first) add_row(stage_name("enc", s, "hvss"), count(*st.hvss));
    add_row(stage_name("enc", s, "conv"), count(*st.conv));
    if (st.hvss && config_.conv_first) add_row(stage_name("enc", s, "hvss"), count(*st.hvss));
  }
  add_row("bridge.sab", count(*sab));
  add_row("bridge.cab", count(*cab));
  for (std::size_t s = kStages; s >= 2; --s) {
    const auto& st = decoder[s - 2];
    if (st.hvss && config_.conv_first) add_row(stage_name("dec", s, "hvss"), count(*st.hvss));
    add_row(stage_name("dec", s, "conv"), count(*st.conv));
    if (st.hvss && !config_.conv_first) add_row(stage_name("dec", s, "hvss"), count(*st.hvss));
  }
  add_row("head", count(*head));

  NoGradGuard guard;
  const auto input = Tensor<T>::zeros({1, config_.input_channels, config_.input_height, config_.input_width});
  forward(input, [&](const std::string& name, const Tensor<T>& t) {
    for (auto& r : rows) {
      if (r.module == name) r.output = t.shape();
    }
  });
  return rows;
}

template class SpatialBridge<float>;
template class SpatialBridge<double>;
template class ChannelBridge<float>;
template class ChannelBridge<double>;
template class HVMUNet<float>;
template class HVMUNet<double>;

}  // namespace hvm
