#pragma once

// Six-stage U-shaped segmentation network.
//
// Encoder stage s (1-based): stages 1-2 are conv3x3 + SiLU, stages 3-6 add an
// H-VSS block of order orders[s-3]; a 2x max-pool precedes stages 2-6. The
// five pre-bottleneck stage outputs pass through the spatial (SAB) then the
// channel (CAB) attention bridge. The decoder mirrors the encoder: per stage
// s = 6..2 it runs H-VSS (s >= 3) and conv C_{s-1} -> C_{s-2} + SiLU in
// mirrored order, upsamples 2x nearest and adds bridged skip s-1. A 1x1 conv
// and a sigmoid produce the probability map.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hvm/hvss.hpp"

namespace hvm {

inline constexpr std::size_t kStages = 6;
inline constexpr std::size_t kHvssStages = 4;
inline constexpr std::size_t kSkips = kStages - 1;

struct ModelConfig {
  std::vector<std::size_t> channels{8, 16, 32, 64, 128, 256};
  std::vector<std::size_t> orders{2, 3, 4, 5};
  std::size_t input_channels = 3;
  std::size_t input_height = 256;
  std::size_t input_width = 256;
  std::size_t mlp_ratio = kDefaultMlpRatio;
  std::size_t state_dim = kDefaultStateDim;
  bool conv_first = true;  // within a stage: conv then H-VSS (encoder), mirrored in the decoder

  // Throws std::invalid_argument with a field-level message.
  void validate() const;
  // Stable single-line description; the hash is FNV-1a over it.
  std::string canonical() const;
  std::uint64_t hash() const;
  // Channel count an H-VSS block at stage s (3..6) runs on.
  std::size_t hvss_channels(std::size_t stage) const;
};

// Tiny variant: half the default channels at 64x64.
ModelConfig tiny_model_config();

std::string hash_hex(std::uint64_t hash);

// Spatial attention bridge with one 7x7 dilated conv shared by every skip level.
template <class T>
class SpatialBridge : public Module<T> {
 public:
  explicit SpatialBridge(InitRng& rng);
  // x + x * sigmoid(conv([max_c(x), mean_c(x)])).
  Tensor<T> forward(const Tensor<T>& x) const;

  Conv2d<T> conv;
};

template <class T>
class ChannelBridge : public Module<T> {
 public:
  ChannelBridge(const std::vector<std::size_t>& channels, InitRng& rng);
  // skips[i]: B x C_i x H_i x W_i.
  std::vector<Tensor<T>> forward(const std::vector<Tensor<T>>& skips) const;

  std::vector<std::unique_ptr<Linear<T>>> attn;

 private:
  std::vector<std::size_t> channels_;
};

struct SummaryRow {
  std::string module;
  std::size_t parameters = 0;
  Shape output;
};

template <class T>
class HVMUNet : public Module<T> {
 public:
  // Called after every top-level submodule with its dotted name and output.
  using Observer = std::function<void(const std::string&, const Tensor<T>&)>;

  HVMUNet(const ModelConfig& config, std::uint64_t seed);

  // image: B x input_channels x H x W with H, W divisible by 32 -> B x 1 x H x W in (0, 1).
  Tensor<T> forward(const Tensor<T>& image, const Observer& observer = {}) const;
  // Encoder stage outputs 1..6.
  std::vector<Tensor<T>> encode(const Tensor<T>& image, const Observer& observer = {}) const;

  // One row per top-level submodule; output shapes come from a no-grad forward
  // on a batch-1 input of the configured size.
  std::vector<SummaryRow> summary() const;

  const ModelConfig& config() const { return config_; }

  struct Stage {
    std::unique_ptr<Conv2d<T>> conv;
    std::unique_ptr<HvssBlock<T>> hvss;  // null for stages 1-2 and decoder stage 2
  };

  std::vector<Stage> encoder;  // index s-1
  std::vector<Stage> decoder;  // index s-2 for s = 2..6
  std::unique_ptr<SpatialBridge<T>> sab;
  std::unique_ptr<ChannelBridge<T>> cab;
  std::unique_ptr<Conv2d<T>> head;

 private:
  Tensor<T> run_encoder_stage(std::size_t s, Tensor<T> x, const Observer& observer) const;
  Tensor<T> run_decoder_stage(std::size_t s, Tensor<T> x, const Observer& observer) const;

  ModelConfig config_;
};

}  // namespace hvm
