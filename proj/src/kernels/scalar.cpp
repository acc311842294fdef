#include <algorithm>
#include <cmath>
#include <vector>

#include "hvm/kernels.hpp"

namespace hvm::kernels {

double zoh_phi(double z) {
  if (std::abs(z) < kZohSeriesThreshold) return 1.0 + z / 2.0 + z * z / 6.0;
  return std::expm1(z) / z;
}

double zoh_phi_derivative(double z) {
  // The closed form cancels badly near zero; the cubic series is exact to
  // ~z^4/144 there.
  if (std::abs(z) < 1e-3) return 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0;
  return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

namespace scalar {

template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T(0);
  }
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = trans_a ? a[p * m + i] : a[i * k + p];
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <class T>
void scan_forward(const ScanShape& s, const ScanOperands<T>& in, T* y, T* states) {
  const std::size_t D = s.channels, N = s.state, L = s.length;
  std::vector<T> h(D * N);
  for (std::size_t b = 0; b < s.batch; ++b) {
    std::fill(h.begin(), h.end(), T(0));
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t row = b * L + t;
      const T* bt = in.b + row * N;
      const T* ct = in.c + row * N;
      for (std::size_t d = 0; d < D; ++d) {
        const T xv = in.x[row * D + d];
        const T dt = in.delta[row * D + d];
        T* hd = h.data() + d * N;
        T acc = T(0);
        for (std::size_t n = 0; n < N; ++n) {
          const double z = static_cast<double>(dt) * static_cast<double>(in.a[d * N + n]);
          const T abar = static_cast<T>(std::exp(z));
          const T bbar = static_cast<T>(zoh_phi(z)) * dt * bt[n];
          hd[n] = abar * hd[n] + bbar * xv;
          acc += ct[n] * hd[n];
        }
        if (states) std::copy(hd, hd + N, states + (row * D + d) * N);
        y[row * D + d] = acc + in.d_skip[d] * xv;
      }
    }
  }
}

template <class T>
void scan_backward(const ScanShape& s, const ScanOperands<T>& in, const T* states,
                   const T* grad_y, const ScanGradients<T>& g) {
  const std::size_t D = s.channels, N = s.state, L = s.length;
  std::vector<T> carry(N);
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t d = 0; d < D; ++d) {
      std::fill(carry.begin(), carry.end(), T(0));
      const T* ad = in.a + d * N;
      for (std::size_t t = L; t-- > 0;) {
        const std::size_t row = b * L + t;
        const std::size_t xd = row * D + d;
        const T gy = grad_y[xd];
        const T xv = in.x[xd];
        const T dt = in.delta[xd];
        const T* h = states + xd * N;
        const T* hprev = t > 0 ? states + (xd - D) * N : nullptr;
        const T* bt = in.b + row * N;
        const T* ct = in.c + row * N;
        T* gbt = g.b + row * N;
        T* gct = g.c + row * N;

        g.d_skip[d] += gy * xv;
        T gx = in.d_skip[d] * gy;
        T gdt = T(0);
        for (std::size_t n = 0; n < N; ++n) {
          gct[n] += gy * h[n];
          const T gh = carry[n] + gy * ct[n];
          const double z = static_cast<double>(dt) * static_cast<double>(ad[n]);
          const T abar = static_cast<T>(std::exp(z));
          const T phi = static_cast<T>(zoh_phi(z));
          const T dphi = static_cast<T>(zoh_phi_derivative(z));
          const T bbar = phi * dt * bt[n];
          const T ga = hprev ? gh * hprev[n] : T(0);
          const T gbbar = gh * xv;
          gx += gh * bbar;
          const T gz = ga * abar + gbbar * dt * bt[n] * dphi;
          gdt += gbbar * phi * bt[n] + gz * ad[n];
          g.a[d * N + n] += gz * dt;
          gbt[n] += gbbar * phi * dt;
          carry[n] = gh * abar;
        }
        g.x[xd] += gx;
        g.delta[xd] += gdt;
      }
    }
  }
}

template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t, const float*,
                          const float*, float*, bool);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t, const double*,
                           const double*, double*, bool);
template void scan_forward<float>(const ScanShape&, const ScanOperands<float>&, float*, float*);
template void scan_forward<double>(const ScanShape&, const ScanOperands<double>&, double*,
                                   double*);
template void scan_backward<float>(const ScanShape&, const ScanOperands<float>&, const float*,
                                   const float*, const ScanGradients<float>&);
template void scan_backward<double>(const ScanShape&, const ScanOperands<double>&, const double*,
                                    const double*, const ScanGradients<double>&);

}  // namespace scalar
}  // namespace hvm::kernels
