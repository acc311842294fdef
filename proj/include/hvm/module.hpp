#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hvm/ops.hpp"
#include "hvm/tensor.hpp"

namespace hvm {

template <class T>
struct Parameter {
  std::string name;  // dotted module path, e.g. "enc.stage3.hvss.hss.proj_in.weight"
  Tensor<T> tensor;
};

// Deterministic source for parameter initialisation.
class InitRng {
 public:
  explicit InitRng(std::uint64_t seed) : engine_(seed) {}
  double uniform(double lo, double hi);
  template <class T>
  std::vector<T> uniform_vector(std::size_t n, double bound);

 private:
  std::mt19937_64 engine_;
};

// Base class owning named parameters and named child modules.
// Modules are neither copyable nor movable: children register by address.
template <class T>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  std::vector<Parameter<T>> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();

 protected:
  Tensor<T> register_parameter(std::string name, Tensor<T> tensor);
  void register_module(std::string name, Module<T>& child);

 private:
  void collect(const std::string& prefix, std::vector<Parameter<T>>& out) const;

  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::pair<std::string, Module<T>*>> children_;
};

template <class T>
class Linear : public Module<T> {
 public:
  Linear(std::size_t in, std::size_t out, bool bias, InitRng& rng);
  Tensor<T> forward(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }
  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }

  Tensor<T> weight;
  Tensor<T> bias;  // undefined when constructed without bias
};

template <class T>
class Conv2d : public Module<T> {
 public:
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, ops::Conv2dOptions options,
         InitRng& rng);
  Tensor<T> forward(const Tensor<T>& x) const { return ops::conv2d(x, weight, bias, options_); }
  const ops::Conv2dOptions& options() const { return options_; }

  Tensor<T> weight;
  Tensor<T> bias;

 private:
  ops::Conv2dOptions options_;
};

inline constexpr double kLayerNormEps = 1e-6;

template <class T>
class LayerNorm : public Module<T> {
 public:
  explicit LayerNorm(std::size_t channels);
  Tensor<T> forward(const Tensor<T>& x) const {
    return ops::layer_norm(x, gamma, beta, static_cast<T>(kLayerNormEps));
  }

  Tensor<T> gamma;
  Tensor<T> beta;
};

// NCHW <-> NHWC materialising transposes.
template <class T>
Tensor<T> to_channels_last(const Tensor<T>& x);
template <class T>
Tensor<T> to_channels_first(const Tensor<T>& x);

}  // namespace hvm
