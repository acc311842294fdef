// AVX2+FMA float kernels. This translation unit is compiled with -mavx2 -mfma
// and must only be entered after the runtime feature check in dispatch.cpp.

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "hvm/kernels.hpp"

namespace hvm::kernels::avx2 {

namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

// Cephes-style expf: range reduction by ln2 and a degree-5 minimax polynomial.
inline __m256 exp_ps(__m256 x) {
  const __m256 one = _mm256_set1_ps(1.0f);
  x = _mm256_min_ps(x, _mm256_set1_ps(88.3762626647949f));
  x = _mm256_max_ps(x, _mm256_set1_ps(-87.3365447504019f));

  __m256 fx = _mm256_fmadd_ps(x, _mm256_set1_ps(1.44269504088896341f), _mm256_set1_ps(0.5f));
  fx = _mm256_floor_ps(fx);
  x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(0.693359375f), x);
  x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(-2.12194440e-4f), x);

  __m256 y = _mm256_set1_ps(1.9875691500E-4f);
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507E-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073E-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894E-2f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459E-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201E-1f));
  y = _mm256_fmadd_ps(y, _mm256_mul_ps(x, x), _mm256_add_ps(x, one));

  __m256i n = _mm256_cvttps_epi32(fx);
  n = _mm256_add_epi32(n, _mm256_set1_epi32(0x7f));
  n = _mm256_slli_epi32(n, 23);
  return _mm256_mul_ps(y, _mm256_castsi256_ps(n));
}

inline __m256 abs_ps(__m256 x) {
  return _mm256_andnot_ps(_mm256_set1_ps(-0.0f), x);
}

// (e^z - 1)/z: Taylor series through z^7 on |z| < 1/2, closed form elsewhere.
inline __m256 phi_ps(__m256 z, __m256 ez) {
  __m256 p = _mm256_set1_ps(1.0f / 40320.0f);
  p = _mm256_fmadd_ps(p, z, _mm256_set1_ps(1.0f / 5040.0f));
  p = _mm256_fmadd_ps(p, z, _mm256_set1_ps(1.0f / 720.0f));
  p = _mm256_fmadd_ps(p, z, _mm256_set1_ps(1.0f / 120.0f));
  p = _mm256_fmadd_ps(p, z, _mm256_set1_ps(1.0f / 24.0f));
  p = _mm256_fmadd_ps(p, z, _mm256_set1_ps(1.0f / 6.0f));
  p = _mm256_fmadd_ps(p, z, _mm256_set1_ps(0.5f));
  p = _mm256_fmadd_ps(p, z, _mm256_set1_ps(1.0f));
  const __m256 closed = _mm256_div_ps(_mm256_sub_ps(ez, _mm256_set1_ps(1.0f)), z);
  const __m256 small = _mm256_cmp_ps(abs_ps(z), _mm256_set1_ps(0.5f), _CMP_LT_OQ);
  return _mm256_blendv_ps(closed, p, small);
}

// d/dz of phi_ps; the series is sum (j+1) z^j / (j+2)!.
inline __m256 dphi_ps(__m256 z, __m256 ez) {
  __m256 p = _mm256_set1_ps(8.0f / 362880.0f);
  p = _mm256_fmadd_ps(p, z, _mm256_set1_ps(7.0f / 40320.0f));
  p = _mm256_fmadd_ps(p, z, _mm256_set1_ps(6.0f / 5040.0f));
  p = _mm256_fmadd_ps(p, z, _mm256_set1_ps(5.0f / 720.0f));
  p = _mm256_fmadd_ps(p, z, _mm256_set1_ps(4.0f / 120.0f));
  p = _mm256_fmadd_ps(p, z, _mm256_set1_ps(3.0f / 24.0f));
  p = _mm256_fmadd_ps(p, z, _mm256_set1_ps(2.0f / 6.0f));
  p = _mm256_fmadd_ps(p, z, _mm256_set1_ps(0.5f));
  const __m256 num = _mm256_fmsub_ps(z, ez, _mm256_sub_ps(ez, _mm256_set1_ps(1.0f)));
  const __m256 closed = _mm256_div_ps(num, _mm256_mul_ps(z, z));
  const __m256 small = _mm256_cmp_ps(abs_ps(z), _mm256_set1_ps(0.5f), _CMP_LT_OQ);
  return _mm256_blendv_ps(closed, p, small);
}

}  // namespace

void exp_n(const float* in, float* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(out + i, exp_ps(_mm256_loadu_ps(in + i)));
  for (; i < n; ++i) out[i] = std::exp(in[i]);
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate) {
  constexpr std::size_t kBlock = 64;
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    float* crow = c + i * n;
    std::size_t j0 = 0;
    for (; j0 + kBlock <= n; j0 += kBlock) {
      __m256 acc[8];
      for (int q = 0; q < 8; ++q) {
        acc[q] = accumulate ? _mm256_loadu_ps(crow + j0 + 8 * q) : _mm256_setzero_ps();
      }
      for (std::size_t p = 0; p < k; ++p) {
        const __m256 av = _mm256_set1_ps(arow[p]);
        const float* brow = b + p * n + j0;
        for (int q = 0; q < 8; ++q) acc[q] = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 8 * q), acc[q]);
      }
      for (int q = 0; q < 8; ++q) _mm256_storeu_ps(crow + j0 + 8 * q, acc[q]);
    }
    for (; j0 + 8 <= n; j0 += 8) {
      __m256 acc = accumulate ? _mm256_loadu_ps(crow + j0) : _mm256_setzero_ps();
      for (std::size_t p = 0; p < k; ++p) {
        acc = _mm256_fmadd_ps(_mm256_set1_ps(arow[p]), _mm256_loadu_ps(b + p * n + j0), acc);
      }
      _mm256_storeu_ps(crow + j0, acc);
    }
    for (; j0 < n; ++j0) {
      float acc = accumulate ? crow[j0] : 0.0f;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * b[p * n + j0];
      crow[j0] = acc;
    }
  }
}

void scan_forward(const ScanShape& s, const ScanOperands<float>& in, float* y, float* states) {
  const std::size_t D = s.channels, N = s.state, L = s.length;
  const std::size_t nv = N - N % 8;
  std::vector<float> h(D * N);
  for (std::size_t b = 0; b < s.batch; ++b) {
    std::fill(h.begin(), h.end(), 0.0f);
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t row = b * L + t;
      const float* bt = in.b + row * N;
      const float* ct = in.c + row * N;
      for (std::size_t d = 0; d < D; ++d) {
        const float xv = in.x[row * D + d];
        const float dt = in.delta[row * D + d];
        const __m256 xvv = _mm256_set1_ps(xv);
        const __m256 dtv = _mm256_set1_ps(dt);
        float* hd = h.data() + d * N;
        const float* ad = in.a + d * N;
        __m256 accv = _mm256_setzero_ps();
        for (std::size_t n = 0; n < nv; n += 8) {
          const __m256 z = _mm256_mul_ps(dtv, _mm256_loadu_ps(ad + n));
          const __m256 ez = exp_ps(z);
          const __m256 bbar = _mm256_mul_ps(_mm256_mul_ps(phi_ps(z, ez), dtv), _mm256_loadu_ps(bt + n));
          const __m256 hn = _mm256_fmadd_ps(ez, _mm256_loadu_ps(hd + n), _mm256_mul_ps(bbar, xvv));
          _mm256_storeu_ps(hd + n, hn);
          accv = _mm256_fmadd_ps(_mm256_loadu_ps(ct + n), hn, accv);
        }
        float acc = hsum(accv);
        for (std::size_t n = nv; n < N; ++n) {
          const double z = static_cast<double>(dt) * ad[n];
          const float bbar = static_cast<float>(zoh_phi(z)) * dt * bt[n];
          hd[n] = static_cast<float>(std::exp(z)) * hd[n] + bbar * xv;
          acc += ct[n] * hd[n];
        }
        if (states) std::copy(hd, hd + N, states + (row * D + d) * N);
        y[row * D + d] = acc + in.d_skip[d] * xv;
      }
    }
  }
}

void scan_backward(const ScanShape& s, const ScanOperands<float>& in, const float* states,
                   const float* grad_y, const ScanGradients<float>& g) {
  const std::size_t D = s.channels, N = s.state, L = s.length;
  const std::size_t nv = N - N % 8;
  std::vector<float> carry(N);
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t d = 0; d < D; ++d) {
      std::fill(carry.begin(), carry.end(), 0.0f);
      const float* ad = in.a + d * N;
      float* gad = g.a + d * N;
      for (std::size_t t = L; t-- > 0;) {
        const std::size_t row = b * L + t;
        const std::size_t xd = row * D + d;
        const float gy = grad_y[xd];
        const float xv = in.x[xd];
        const float dt = in.delta[xd];
        const float* h = states + xd * N;
        const float* hprev = t > 0 ? states + (xd - D) * N : nullptr;
        const float* bt = in.b + row * N;
        const float* ct = in.c + row * N;
        float* gbt = g.b + row * N;
        float* gct = g.c + row * N;

        g.d_skip[d] += gy * xv;
        const __m256 gyv = _mm256_set1_ps(gy);
        const __m256 xvv = _mm256_set1_ps(xv);
        const __m256 dtv = _mm256_set1_ps(dt);
        __m256 gxv = _mm256_setzero_ps();
        __m256 gdtv = _mm256_setzero_ps();
        for (std::size_t n = 0; n < nv; n += 8) {
          const __m256 hv = _mm256_loadu_ps(h + n);
          const __m256 hp = hprev ? _mm256_loadu_ps(hprev + n) : _mm256_setzero_ps();
          const __m256 bv = _mm256_loadu_ps(bt + n);
          const __m256 av = _mm256_loadu_ps(ad + n);
          _mm256_storeu_ps(gct + n, _mm256_fmadd_ps(gyv, hv, _mm256_loadu_ps(gct + n)));
          const __m256 gh = _mm256_fmadd_ps(gyv, _mm256_loadu_ps(ct + n), _mm256_loadu_ps(carry.data() + n));
          const __m256 z = _mm256_mul_ps(dtv, av);
          const __m256 ez = exp_ps(z);
          const __m256 phi = phi_ps(z, ez);
          const __m256 dphi = dphi_ps(z, ez);
          const __m256 bbar = _mm256_mul_ps(_mm256_mul_ps(phi, dtv), bv);
          const __m256 ga = _mm256_mul_ps(gh, hp);
          const __m256 gbbar = _mm256_mul_ps(gh, xvv);
          gxv = _mm256_fmadd_ps(gh, bbar, gxv);
          const __m256 gz = _mm256_fmadd_ps(ga, ez, _mm256_mul_ps(_mm256_mul_ps(gbbar, dtv), _mm256_mul_ps(bv, dphi)));
          gdtv = _mm256_fmadd_ps(_mm256_mul_ps(gbbar, phi), bv, gdtv);
          gdtv = _mm256_fmadd_ps(gz, av, gdtv);
          _mm256_storeu_ps(gad + n, _mm256_fmadd_ps(gz, dtv, _mm256_loadu_ps(gad + n)));
          _mm256_storeu_ps(gbt + n, _mm256_fmadd_ps(_mm256_mul_ps(gbbar, phi), dtv, _mm256_loadu_ps(gbt + n)));
          _mm256_storeu_ps(carry.data() + n, _mm256_mul_ps(gh, ez));
        }
        float gx = in.d_skip[d] * gy + hsum(gxv);
        float gdt = hsum(gdtv);
        for (std::size_t n = nv; n < N; ++n) {
          gct[n] += gy * h[n];
          const float gh = carry[n] + gy * ct[n];
          const double z = static_cast<double>(dt) * ad[n];
          const float abar = static_cast<float>(std::exp(z));
          const float phi = static_cast<float>(zoh_phi(z));
          const float dphi = static_cast<float>(zoh_phi_derivative(z));
          const float bbar = phi * dt * bt[n];
          const float ga = hprev ? gh * hprev[n] : 0.0f;
          const float gbbar = gh * xv;
          gx += gh * bbar;
          const float gz = ga * abar + gbbar * dt * bt[n] * dphi;
          gdt += gbbar * phi * bt[n] + gz * ad[n];
          gad[n] += gz * dt;
          gbt[n] += gbbar * phi * dt;
          carry[n] = gh * abar;
        }
        g.x[xd] += gx;
        g.delta[xd] += gdt;
      }
    }
  }
}

}  // namespace hvm::kernels::avx2
