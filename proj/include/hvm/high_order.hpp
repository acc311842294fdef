#pragma once

// High-order gated 2D selective scan and its Local-SS2D branch.
//
// For order n on C channels the input projection produces 2C channels split
// as [X_0 | Y_0 | ... | Y_{n-1}] with widths C_0, C_0, ..., C_{n-1} where
// C_k = C / 2^(n-k-1). Each order computes
//   X_{k+1} = lift_k(SS2D_k(X_k * LocalSS2D_k(Y_k)))
// where lift_k is a bias-free C_k -> C_{k+1} linear map (absent for the last
// order), and the output projection maps X_n back to C channels.

#include <cstddef>
#include <memory>
#include <vector>

#include "hvm/ss2d.hpp"

namespace hvm {

struct HssOrderConfig {
  std::size_t order = 1;
  std::size_t channels = 0;
  std::vector<std::size_t> schedule;  // C_0 .. C_{n-1}
};

// Throws std::invalid_argument naming C and n unless C is divisible by 2^(n-1).
HssOrderConfig channel_schedule(std::size_t order, std::size_t channels);

// LN -> split channels in half -> (3x3 conv + SiLU | SS2D) -> concat -> LN.
template <class T>
class LocalSS2D : public Module<T> {
 public:
  LocalSS2D(std::size_t channels, std::size_t state_dim, InitRng& rng);
  // x: B x H x W x C (channels last).
  Tensor<T> forward(const Tensor<T>& x) const;

  std::size_t channels() const { return channels_; }

  LayerNorm<T> norm_in;
  Conv2d<T> conv;
  SS2D<T> scan;
  LayerNorm<T> norm_out;

 private:
  std::size_t channels_;
};

template <class T>
class HighOrderSS2D : public Module<T> {
 public:
  HighOrderSS2D(const HssOrderConfig& config, std::size_t state_dim, InitRng& rng);
  // x: B x H x W x C (channels last).
  Tensor<T> forward(const Tensor<T>& x) const;

  const HssOrderConfig& config() const { return config_; }

  Linear<T> proj_in;
  Linear<T> proj_out;
  std::vector<std::unique_ptr<LocalSS2D<T>>> locals;
  std::vector<std::unique_ptr<SS2D<T>>> scans;
  std::vector<std::unique_ptr<Linear<T>>> lifts;  // n - 1 entries

 private:
  HssOrderConfig config_;
};

}  // namespace hvm
