#include "hvm/high_order.hpp"

#include <stdexcept>
#include <string>

namespace hvm {

HssOrderConfig channel_schedule(std::size_t order, std::size_t channels) {
  if (order == 0) throw std::invalid_argument("interaction order must be >= 1");
  if (order > 31) throw std::invalid_argument("interaction order " + std::to_string(order) + " is too large");
  const std::size_t divisor = std::size_t{1} << (order - 1);
  if (channels == 0 || channels % divisor != 0) {
    throw std::invalid_argument("channel count C=" + std::to_string(channels) + " is not divisible by 2^(n-1)=" +
                                std::to_string(divisor) + " for order n=" + std::to_string(order));
  }
  HssOrderConfig cfg;
  cfg.order = order;
  cfg.channels = channels;
  for (std::size_t k = 0; k < order; ++k) cfg.schedule.push_back(channels >> (order - k - 1));
  return cfg;
}

template <class T>
LocalSS2D<T>::LocalSS2D(std::size_t channels, std::size_t state_dim, InitRng& rng)
    : norm_in(channels),
      conv(channels / 2, channels / 2, 3, ops::Conv2dOptions{1, 1, 1, 1}, rng),
      scan(channels / 2, state_dim, rng),
      norm_out(channels),
      channels_(channels) {
  if (channels < 2 || channels % 2 != 0) {
    throw std::invalid_argument("Local-SS2D needs an even channel count, got " + std::to_string(channels));
  }
  this->register_module("norm_in", norm_in);
  this->register_module("conv", conv);
  this->register_module("ss2d", scan);
  this->register_module("norm_out", norm_out);
}

template <class T>
Tensor<T> LocalSS2D<T>::forward(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(3) != channels_) {
    throw ShapeError("Local-SS2D with " + std::to_string(channels_) + " channels got " + shape_str(x.shape()));
  }
  const std::size_t half = channels_ / 2;
  auto halves = ops::split(norm_in.forward(x), {half, half}, -1);
  auto local = to_channels_last(ops::silu(conv.forward(to_channels_first(halves[0]))));
  auto global = scan.forward(halves[1]);
  return norm_out.forward(ops::concat<T>({local, global}, -1));
}

template <class T>
HighOrderSS2D<T>::HighOrderSS2D(const HssOrderConfig& config, std::size_t state_dim, InitRng& rng)
    : proj_in(config.channels, 2 * config.channels, true, rng),
      proj_out(config.channels, config.channels, true, rng),
      config_(config) {
  const auto checked = channel_schedule(config.order, config.channels);
  if (checked.schedule != config.schedule) throw std::invalid_argument("H-SS2D schedule does not match its order/channels");
  std::size_t total = config.schedule[0];
  for (auto c : config.schedule) total += c;
  if (total != 2 * config.channels) throw std::logic_error("H-SS2D schedule does not total 2C");

  this->register_module("proj_in", proj_in);
  for (std::size_t k = 0; k < config.order; ++k) {
    const std::size_t ck = config.schedule[k];
    locals.push_back(std::make_unique<LocalSS2D<T>>(ck, state_dim, rng));
    scans.push_back(std::make_unique<SS2D<T>>(ck, state_dim, rng));
    this->register_module("order" + std::to_string(k) + ".local", *locals.back());
    this->register_module("order" + std::to_string(k) + ".ss2d", *scans.back());
    if (k + 1 < config.order) {
      lifts.push_back(std::make_unique<Linear<T>>(ck, config.schedule[k + 1], false, rng));
      this->register_module("order" + std::to_string(k) + ".lift", *lifts.back());
    }
  }
  this->register_module("proj_out", proj_out);
}

template <class T>
Tensor<T> HighOrderSS2D<T>::forward(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(3) != config_.channels) {
    throw ShapeError("H-SS2D with " + std::to_string(config_.channels) + " channels got " + shape_str(x.shape()));
  }
  std::vector<std::size_t> widths{config_.schedule[0]};
  widths.insert(widths.end(), config_.schedule.begin(), config_.schedule.end());
  auto parts = ops::split(proj_in.forward(x), widths, -1);
  if (parts.size() != config_.order + 1) throw std::logic_error("H-SS2D split produced the wrong number of parts");

  auto state = parts[0];
  for (std::size_t k = 0; k < config_.order; ++k) {
    if (state.dim(3) != config_.schedule[k]) throw std::logic_error("H-SS2D order " + std::to_string(k) + " width mismatch");
    auto gated = ops::mul(state, locals[k]->forward(parts[k + 1]));
    state = scans[k]->forward(gated);
    if (k + 1 < config_.order) state = lifts[k]->forward(state);
  }
  return proj_out.forward(state);
}

template class LocalSS2D<float>;
template class LocalSS2D<double>;
template class HighOrderSS2D<float>;
template class HighOrderSS2D<double>;

}  // namespace hvm
