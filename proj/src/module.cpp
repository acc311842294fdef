#include "hvm/module.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace hvm {

double InitRng::uniform(double lo, double hi) {
  // Top 53 bits -> [0, 1); independent of the standard library's distributions.
  const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

template <class T>
std::vector<T> InitRng::uniform_vector(std::size_t n, double bound) {
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(uniform(-bound, bound));
  return out;
}

template std::vector<float> InitRng::uniform_vector<float>(std::size_t, double);
template std::vector<double> InitRng::uniform_vector<double>(std::size_t, double);

template <class T>
Tensor<T> Module<T>::register_parameter(std::string name, Tensor<T> tensor) {
  for (const auto& [existing, _] : params_) {
    if (existing == name) throw std::logic_error("duplicate parameter name '" + name + "'");
  }
  tensor.set_requires_grad(true);
  params_.emplace_back(std::move(name), tensor);
  return tensor;
}

template <class T>
void Module<T>::register_module(std::string name, Module<T>& child) {
  for (const auto& [existing, _] : children_) {
    if (existing == name) throw std::logic_error("duplicate module name '" + name + "'");
  }
  children_.emplace_back(std::move(name), &child);
}

template <class T>
void Module<T>::collect(const std::string& prefix, std::vector<Parameter<T>>& out) const {
  for (const auto& [name, tensor] : params_) out.push_back({prefix + name, tensor});
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", out);
}

template <class T>
std::vector<Parameter<T>> Module<T>::parameters() const {
  std::vector<Parameter<T>> out;
  collect("", out);
  return out;
}

template <class T>
std::size_t Module<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <class T>
void Module<T>::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

template <class T>
Linear<T>::Linear(std::size_t in, std::size_t out, bool with_bias, InitRng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = this->register_parameter("weight", Tensor<T>({out, in}, rng.uniform_vector<T>(out * in, bound)));
  if (with_bias) bias = this->register_parameter("bias", Tensor<T>({out}, rng.uniform_vector<T>(out, bound)));
}

template <class T>
Conv2d<T>::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, ops::Conv2dOptions options,
                  InitRng& rng)
    : options_(options) {
  if (options.groups == 0 || in % options.groups != 0 || out % options.groups != 0) {
    throw ShapeError("conv channels " + std::to_string(in) + " -> " + std::to_string(out) +
                     " not divisible by groups " + std::to_string(options.groups));
  }
  const std::size_t cg = in / options.groups;
  const std::size_t fan_in = cg * kernel * kernel;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  weight = this->register_parameter(
      "weight", Tensor<T>({out, cg, kernel, kernel}, rng.uniform_vector<T>(out * fan_in, bound)));
  bias = this->register_parameter("bias", Tensor<T>({out}, rng.uniform_vector<T>(out, bound)));
}

template <class T>
LayerNorm<T>::LayerNorm(std::size_t channels) {
  gamma = this->register_parameter("weight", Tensor<T>::full({channels}, T(1)));
  beta = this->register_parameter("bias", Tensor<T>::zeros({channels}));
}

template <class T>
Tensor<T> to_channels_last(const Tensor<T>& x) {
  return ops::permute(x, {0, 2, 3, 1});
}

template <class T>
Tensor<T> to_channels_first(const Tensor<T>& x) {
  return ops::permute(x, {0, 3, 1, 2});
}

template class Module<float>;
template class Module<double>;
template class Linear<float>;
template class Linear<double>;
template class Conv2d<float>;
template class Conv2d<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;
template Tensor<float> to_channels_last(const Tensor<float>&);
template Tensor<double> to_channels_last(const Tensor<double>&);
template Tensor<float> to_channels_first(const Tensor<float>&);
template Tensor<double> to_channels_first(const Tensor<double>&);

}  // namespace hvm
