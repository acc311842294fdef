#pragma once

// Selective state-space scan (S6).
//
// Per channel d and state n, with z = delta_d * A_dn:
//   Abar = exp(z),  Bbar = ((exp(z) - 1) / z) * delta_d * B_n
//   h_t  = Abar_t * h_{t-1} + Bbar_t * x_t
//   y_t  = sum_n C_tn * h_tdn + D_d * x_td
// delta, B and C are linear functions of x; delta goes through softplus.

#include <cstddef>

#include "hvm/module.hpp"

namespace hvm {

inline constexpr std::size_t kDefaultStateDim = 16;

template <class T>
struct S6Projections {
  Tensor<T> delta;  // B x L x D, strictly positive
  Tensor<T> b;      // B x L x N
  Tensor<T> c;      // B x L x N
};

template <class T>
struct Discretized {
  Tensor<T> a_bar;  // B x L x D x N
  Tensor<T> b_bar;  // B x L x D x N
};

// Zero-order-hold discretisation as a standalone differentiable op.
// Throws std::invalid_argument if any delta <= 0.
template <class T>
Discretized<T> discretize(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b);

// Fused recurrence over already-projected operands; records one tape entry.
// x, delta: B x L x D; a: D x N; b, c: B x L x N; d_skip: D.
template <class T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a,
                         const Tensor<T>& b, const Tensor<T>& c, const Tensor<T>& d_skip);

template <class T>
class S6 : public Module<T> {
 public:
  S6(std::size_t channels, std::size_t state_dim, InitRng& rng);

  S6Projections<T> project_inputs(const Tensor<T>& x) const;
  // x: B x L x D -> B x L x D
  Tensor<T> forward(const Tensor<T>& x) const;

  std::size_t channels() const { return a.dim(0); }
  std::size_t state_dim() const { return a.dim(1); }

  Tensor<T> a;       // D x N, initialised to -(1..N) per channel
  Tensor<T> d_skip;  // D
  Linear<T> delta_proj;
  Linear<T> b_proj;
  Linear<T> c_proj;
};

}  // namespace hvm
