#pragma once

// Arithmetic inner loops behind the tensor ops.
//
// Each kernel has a portable scalar reference in hvm::kernels::scalar and,
// for float on x86-64, an AVX2+FMA variant in hvm::kernels::avx2. The
// dispatching entry points below pick a variant at runtime from the CPU
// feature bits; double always runs the scalar reference.

#include <cstddef>
#include <string_view>

namespace hvm::kernels {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);
// Best variant the running CPU supports (honours HVM_FORCE_SCALAR=1).
Isa detected_isa();
Isa active_isa();
// Throws std::invalid_argument when the CPU cannot run `isa`.
void set_active_isa(Isa isa);
bool isa_supported(Isa isa);

// Row-major C(m x n) = op(A) * op(B) (+ C when accumulate).
// op(A) is m x k, op(B) is k x n; a transposed operand is stored k x m / n x k.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate);

struct ScanShape {
  std::size_t batch;
  std::size_t length;
  std::size_t channels;  // D
  std::size_t state;     // N
};

// Operands of the discretised selective scan. Layouts:
//   x, delta: batch x length x channels
//   a:        channels x state  (continuous-time A, diagonal per channel)
//   b, c:     batch x length x state
//   d_skip:   channels
template <class T>
struct ScanOperands {
  const T* x;
  const T* delta;
  const T* a;
  const T* b;
  const T* c;
  const T* d_skip;
};

template <class T>
struct ScanGradients {
  T* x;
  T* delta;
  T* a;
  T* b;
  T* c;
  T* d_skip;
};

// y: batch x length x channels. states (optional): batch x length x channels x state.
template <class T>
void scan_forward(const ScanShape& shape, const ScanOperands<T>& in, T* y, T* states);

// All gradient buffers must be zeroed by the caller; the kernel accumulates.
template <class T>
void scan_backward(const ScanShape& shape, const ScanOperands<T>& in, const T* states,
                   const T* grad_y, const ScanGradients<T>& grad);

// (exp(z) - 1) / z with the short series near zero, and its derivative.
double zoh_phi(double z);
double zoh_phi_derivative(double z);

inline constexpr double kZohSeriesThreshold = 1e-5;

namespace scalar {
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate);
template <class T>
void scan_forward(const ScanShape& shape, const ScanOperands<T>& in, T* y, T* states);
template <class T>
void scan_backward(const ScanShape& shape, const ScanOperands<T>& in, const T* states,
                   const T* grad_y, const ScanGradients<T>& grad);
}  // namespace scalar

#if defined(HVM_HAVE_AVX2)
namespace avx2 {
// Row-major NN product; the dispatcher packs transposed operands first.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate);
void scan_forward(const ScanShape& shape, const ScanOperands<float>& in, float* y, float* states);
void scan_backward(const ScanShape& shape, const ScanOperands<float>& in, const float* states,
                   const float* grad_y, const ScanGradients<float>& grad);
// Lane-wise exp, exposed for the equivalence tests.
void exp_n(const float* in, float* out, std::size_t n);
}  // namespace avx2
#endif

}  // namespace hvm::kernels
