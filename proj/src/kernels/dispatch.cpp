#include <atomic>
#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "hvm/kernels.hpp"

namespace hvm::kernels {

namespace {

bool cpu_has_avx2() {
#if defined(HVM_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

std::atomic<int>& active_slot() {
  static std::atomic<int> slot{static_cast<int>(detected_isa())};
  return slot;
}

bool use_avx2() { return active_slot().load(std::memory_order_relaxed) == static_cast<int>(Isa::avx2); }

template <class T>
std::vector<T> transposed(const T* src, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

}  // namespace

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

bool isa_supported(Isa isa) { return isa == Isa::scalar || cpu_has_avx2(); }

Isa detected_isa() {
  const char* force = std::getenv("HVM_FORCE_SCALAR");
  if (force && std::strcmp(force, "0") != 0 && *force) return Isa::scalar;
  return cpu_has_avx2() ? Isa::avx2 : Isa::scalar;
}

Isa active_isa() { return static_cast<Isa>(active_slot().load()); }

void set_active_isa(Isa isa) {
  if (!isa_supported(isa)) {
    throw std::invalid_argument("instruction set " + std::string(isa_name(isa)) +
                                " is not available on this CPU");
  }
  active_slot().store(static_cast<int>(isa));
}

template <>
void gemm<double>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                  const double* a, const double* b, double* c, bool accumulate) {
  scalar::gemm(trans_a, trans_b, m, n, k, a, b, c, accumulate);
}

template <>
void gemm<float>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                 const float* a, const float* b, float* c, bool accumulate) {
#if defined(HVM_HAVE_AVX2)
  if (use_avx2()) {
    std::vector<float> pa, pb;
    if (trans_a) {
      pa = transposed(a, k, m);
      a = pa.data();
    }
    if (trans_b) {
      pb = transposed(b, n, k);
      b = pb.data();
    }
    avx2::gemm_nn(m, n, k, a, b, c, accumulate);
    return;
  }
#endif
  scalar::gemm(trans_a, trans_b, m, n, k, a, b, c, accumulate);
}

template <>
void scan_forward<double>(const ScanShape& s, const ScanOperands<double>& in, double* y,
                          double* states) {
  scalar::scan_forward(s, in, y, states);
}

template <>
void scan_forward<float>(const ScanShape& s, const ScanOperands<float>& in, float* y,
                         float* states) {
#if defined(HVM_HAVE_AVX2)
  if (use_avx2()) return avx2::scan_forward(s, in, y, states);
#endif
  scalar::scan_forward(s, in, y, states);
}

template <>
void scan_backward<double>(const ScanShape& s, const ScanOperands<double>& in,
                           const double* states, const double* grad_y,
                           const ScanGradients<double>& grad) {
  scalar::scan_backward(s, in, states, grad_y, grad);
}

template <>
void scan_backward<float>(const ScanShape& s, const ScanOperands<float>& in, const float* states,
                          const float* grad_y, const ScanGradients<float>& grad) {
#if defined(HVM_HAVE_AVX2)
  if (use_avx2()) return avx2::scan_backward(s, in, states, grad_y, grad);
#endif
  scalar::scan_backward(s, in, states, grad_y, grad);
}

}  // namespace hvm::kernels
