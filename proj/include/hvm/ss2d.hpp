#pragma once

// Four-direction 2D selective scan.
//
// A B x H x W x D feature map (channels last) is flattened along four
// corner-to-corner orders, each sequence goes through its own S6, and the
// results are realigned to the grid and summed:
//   0: row-major from the top-left          (TL -> BR)
//   1: reverse of 0                         (BR -> TL)
//   2: columns right-to-left, each top-down (TR -> BL)
//   3: reverse of 2                         (BL -> TR)

#include <array>
#include <cstddef>
#include <memory>
#include <vector>

#include "hvm/s6.hpp"

namespace hvm {

inline constexpr std::size_t kScanDirections = 4;

// order[i] is the row-major grid index visited at sequence position i.
std::vector<std::size_t> scan_order(std::size_t direction, std::size_t height, std::size_t width);

template <class T>
struct DirectionalSequences {
  std::array<Tensor<T>, kScanDirections> seqs;  // each B x (H*W) x D
  std::size_t height = 0;
  std::size_t width = 0;
};

// x: B x H x W x D.
template <class T>
DirectionalSequences<T> scan_expand(const Tensor<T>& x);

// Inverse-permutes each sequence back onto the grid and sums: B x H x W x D.
template <class T>
Tensor<T> scan_merge(const DirectionalSequences<T>& seqs);

template <class T>
class SS2D : public Module<T> {
 public:
  SS2D(std::size_t channels, std::size_t state_dim, InitRng& rng);

  // Expand -> per-direction S6 -> merge, without the trailing norm.
  Tensor<T> scan(const Tensor<T>& x) const;
  // scan() followed by a LayerNorm over channels. x: B x H x W x D.
  Tensor<T> forward(const Tensor<T>& x) const;

  std::size_t channels() const { return channels_; }
  S6<T>& direction(std::size_t i) { return *scans_.at(i); }
  const S6<T>& direction(std::size_t i) const { return *scans_.at(i); }
  LayerNorm<T>& norm() { return norm_; }

 private:
  std::size_t channels_;
  std::array<std::unique_ptr<S6<T>>, kScanDirections> scans_;
  LayerNorm<T> norm_;
};

}  // namespace hvm
