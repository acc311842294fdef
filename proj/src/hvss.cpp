#include "hvm/hvss.hpp"

#include <stdexcept>
#include <string>

namespace hvm {

template <class T>
Mlp<T>::Mlp(std::size_t channels, std::size_t ratio, InitRng& rng)
    : fc1(channels, channels * ratio, true, rng), fc2(channels * ratio, channels, true, rng) {
  if (ratio == 0) throw std::invalid_argument("MLP ratio must be >= 1");
  this->register_module("fc1", fc1);
  this->register_module("fc2", fc2);
}

template <class T>
HvssBlock<T>::HvssBlock(std::size_t channels, std::size_t order, std::size_t mlp_ratio, std::size_t state_dim,
                        InitRng& rng)
    : ln1(channels),
      hss(channel_schedule(order, channels), state_dim, rng),
      ln2(channels),
      mlp(channels, mlp_ratio, rng) {
  this->register_module("ln1", ln1);
  this->register_module("hss", hss);
  this->register_module("ln2", ln2);
  this->register_module("mlp", mlp);
}

template <class T>
Tensor<T> HvssBlock<T>::forward_channels_last(const Tensor<T>& x) const {
  auto y = ops::add(hss.forward(ln1.forward(x)), x);
  return ops::add(mlp.forward(ln2.forward(y)), y);
}

template <class T>
Tensor<T> HvssBlock<T>::forward(const Tensor<T>& x) const {
  if (x.rank() != 4) throw ShapeError("H-VSS expects B x C x H x W, got " + shape_str(x.shape()));
  return to_channels_first(forward_channels_last(to_channels_last(x)));
}

template class Mlp<float>;
template class Mlp<double>;
template class HvssBlock<float>;
template class HvssBlock<double>;

}  // namespace hvm
