#pragma once

// H-VSS block: y = HS(LN(x)) + x, out = MLP(LN(y)) + y.

#include <cstddef>

#include "hvm/high_order.hpp"

namespace hvm {

inline constexpr std::size_t kDefaultMlpRatio = 4;

// Positionwise C -> rC -> C with GELU, on channels-last input.
template <class T>
class Mlp : public Module<T> {
 public:
  Mlp(std::size_t channels, std::size_t ratio, InitRng& rng);
  Tensor<T> forward(const Tensor<T>& x) const { return fc2.forward(ops::gelu(fc1.forward(x))); }
  std::size_t hidden() const { return fc1.out_features(); }

  Linear<T> fc1;
  Linear<T> fc2;
};

template <class T>
class HvssBlock : public Module<T> {
 public:
  HvssBlock(std::size_t channels, std::size_t order, std::size_t mlp_ratio, std::size_t state_dim,
            InitRng& rng);

  // x: B x C x H x W.
  Tensor<T> forward(const Tensor<T>& x) const;
  // Same computation on B x H x W x C.
  Tensor<T> forward_channels_last(const Tensor<T>& x) const;

  std::size_t order() const { return hss.config().order; }

  LayerNorm<T> ln1;
  HighOrderSS2D<T> hss;
  LayerNorm<T> ln2;
  Mlp<T> mlp;
};

}  // namespace hvm
