#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "hvm/s6.hpp"
#include "hvm/tensor.hpp"

namespace hvm::test {

template <class T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -2.0, double hi = 2.0, bool grad = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  std::vector<T> data(n);
  for (auto& v : data) v = static_cast<T>(u(rng));
  return Tensor<T>(std::move(shape), std::move(data), grad);
}

template <class A, class B>
double max_abs_diff(const A& a, const B& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <class T>
std::vector<T> to_vec(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

template <class T>
void fill(Tensor<T>& t, T value) {
  std::fill(t.mutable_data().begin(), t.mutable_data().end(), value);
}

// Delta ~ 0 and B = 0, so the recurrence never moves and y = D_skip * x exactly.
template <class T>
void make_skip_only(S6<T>& s6, T d_skip = 1) {
  fill(s6.delta_proj.weight, T(0));
  fill(s6.delta_proj.bias, T(-30));
  fill(s6.b_proj.weight, T(0));
  fill(s6.b_proj.bias, T(0));
  fill(s6.d_skip, d_skip);
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("hvm_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace hvm::test
