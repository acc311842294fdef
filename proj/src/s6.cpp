#include "hvm/s6.hpp"

#include <cmath>
#include <stdexcept>

#include "hvm/kernels.hpp"

namespace hvm {

using detail::grad_buffer;

namespace {

template <class T>
void check_scan_shapes(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a,
                       const Tensor<T>& b, const Tensor<T>& c, const Tensor<T>& d_skip) {
  if (x.rank() != 3) throw ShapeError("selective scan input must be B x L x D, got " + shape_str(x.shape()));
  const std::size_t bsz = x.dim(0), len = x.dim(1), ch = x.dim(2);
  if (len == 0) throw ShapeError("selective scan needs L >= 1");
  if (delta.shape() != x.shape()) {
    throw ShapeError("delta " + shape_str(delta.shape()) + " does not match input " + shape_str(x.shape()));
  }
  if (a.rank() != 2 || a.dim(0) != ch) {
    throw ShapeError("A " + shape_str(a.shape()) + " does not match channel count " + std::to_string(ch));
  }
  const Shape proj{bsz, len, a.dim(1)};
  if (b.shape() != proj || c.shape() != proj) {
    throw ShapeError("B/C projections " + shape_str(b.shape()) + "/" + shape_str(c.shape()) + " expected " +
                     shape_str(proj));
  }
  if (d_skip.rank() != 1 || d_skip.dim(0) != ch) {
    throw ShapeError("D " + shape_str(d_skip.shape()) + " does not match channel count " + std::to_string(ch));
  }
}

double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

}  // namespace

template <class T>
Discretized<T> discretize(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b) {
  if (delta.rank() != 3 || a.rank() != 2 || b.rank() != 3 || a.dim(0) != delta.dim(2) ||
      b.dim(0) != delta.dim(0) || b.dim(1) != delta.dim(1) || b.dim(2) != a.dim(1)) {
    throw ShapeError("discretize shape mismatch: delta " + shape_str(delta.shape()) + ", A " +
                     shape_str(a.shape()) + ", B " + shape_str(b.shape()));
  }
  for (auto v : delta.data()) {
    if (!(v > T(0))) throw std::invalid_argument("discretize requires delta > 0 (is softplus missing?)");
  }
  const std::size_t rows = delta.dim(0) * delta.dim(1), D = delta.dim(2), N = a.dim(1);
  const Shape shape{delta.dim(0), delta.dim(1), D, N};
  std::vector<T> abar(rows * D * N), bbar(rows * D * N);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t d = 0; d < D; ++d) {
      const double dt = delta[r * D + d];
      for (std::size_t n = 0; n < N; ++n) {
        const double z = dt * static_cast<double>(a[d * N + n]);
        const std::size_t i = (r * D + d) * N + n;
        abar[i] = static_cast<T>(std::exp(z));
        bbar[i] = static_cast<T>(kernels::zoh_phi(z) * dt * static_cast<double>(b[r * N + n]));
      }
    }
  }
  auto dn = delta.node_ptr();
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  // Both outputs share the same inputs; each records its own entry.
  auto a_out = detail::make_result<T>("discretize_a", shape, std::move(abar), {&delta, &a},
                                      [dn, an, rows, D, N](const std::vector<T>& g) {
                                        T* gd = dn->requires_grad ? grad_buffer(*dn).data() : nullptr;
                                        T* ga = an->requires_grad ? grad_buffer(*an).data() : nullptr;
                                        for (std::size_t r = 0; r < rows; ++r) {
                                          for (std::size_t d = 0; d < D; ++d) {
                                            const double dt = dn->data[r * D + d];
                                            for (std::size_t n = 0; n < N; ++n) {
                                              const double av = an->data[d * N + n];
                                              const double gz = g[(r * D + d) * N + n] * std::exp(dt * av);
                                              if (gd) gd[r * D + d] += static_cast<T>(gz * av);
                                              if (ga) ga[d * N + n] += static_cast<T>(gz * dt);
                                            }
                                          }
                                        }
                                      });
  auto b_out = detail::make_result<T>(
      "discretize_b", shape, std::move(bbar), {&delta, &a, &b}, [dn, an, bn, rows, D, N](const std::vector<T>& g) {
        T* gd = dn->requires_grad ? grad_buffer(*dn).data() : nullptr;
        T* ga = an->requires_grad ? grad_buffer(*an).data() : nullptr;
        T* gb = bn->requires_grad ? grad_buffer(*bn).data() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t d = 0; d < D; ++d) {
            const double dt = dn->data[r * D + d];
            for (std::size_t n = 0; n < N; ++n) {
              const double av = an->data[d * N + n];
              const double bv = bn->data[r * N + n];
              const double z = dt * av;
              const double gv = g[(r * D + d) * N + n];
              const double phi = kernels::zoh_phi(z);
              const double gz = gv * kernels::zoh_phi_derivative(z) * dt * bv;
              if (gd) gd[r * D + d] += static_cast<T>(gv * phi * bv + gz * av);
              if (ga) ga[d * N + n] += static_cast<T>(gz * dt);
              if (gb) gb[r * N + n] += static_cast<T>(gv * phi * dt);
            }
          }
        }
      });
  return {a_out, b_out};
}

template <class T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a,
                         const Tensor<T>& b, const Tensor<T>& c, const Tensor<T>& d_skip) {
  check_scan_shapes(x, delta, a, b, c, d_skip);
  const kernels::ScanShape shape{x.dim(0), x.dim(1), x.dim(2), a.dim(1)};
  const bool tracked = grad_enabled() && (x.requires_grad() || delta.requires_grad() || a.requires_grad() ||
                                          b.requires_grad() || c.requires_grad() || d_skip.requires_grad());
  const kernels::ScanOperands<T> in{x.data().data(), delta.data().data(), a.data().data(),
                                    b.data().data(), c.data().data(), d_skip.data().data()};
  std::vector<T> y(x.numel());
  auto states = std::make_shared<std::vector<T>>();
  if (tracked) states->resize(x.numel() * shape.state);
  kernels::scan_forward<T>(shape, in, y.data(), tracked ? states->data() : nullptr);

  auto xn = x.node_ptr(), dn = delta.node_ptr(), an = a.node_ptr();
  auto bn = b.node_ptr(), cn = c.node_ptr(), sn = d_skip.node_ptr();
  return detail::make_result<T>(
      "selective_scan", x.shape(), std::move(y), {&x, &delta, &a, &b, &c, &d_skip},
      [xn, dn, an, bn, cn, sn, shape, states](const std::vector<T>& gy) {
        const kernels::ScanOperands<T> in{xn->data.data(), dn->data.data(), an->data.data(),
                                          bn->data.data(), cn->data.data(), sn->data.data()};
        std::vector<T> gx(xn->data.size()), gd(dn->data.size()), ga(an->data.size());
        std::vector<T> gb(bn->data.size()), gc(cn->data.size()), gs(sn->data.size());
        kernels::scan_backward<T>(shape, in, states->data(), gy.data(),
                                  {gx.data(), gd.data(), ga.data(), gb.data(), gc.data(), gs.data()});
        auto accumulate = [](TensorNode<T>& node, const std::vector<T>& g) {
          if (!node.requires_grad) return;
          auto& buf = grad_buffer(node);
          for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
        };
        accumulate(*xn, gx);
        accumulate(*dn, gd);
        accumulate(*an, ga);
        accumulate(*bn, gb);
        accumulate(*cn, gc);
        accumulate(*sn, gs);
      });
}

template <class T>
S6<T>::S6(std::size_t channels, std::size_t state_dim, InitRng& rng)
    : delta_proj(channels, channels, true, rng),
      b_proj(channels, state_dim, true, rng),
      c_proj(channels, state_dim, true, rng) {
  if (channels == 0 || state_dim == 0) throw ShapeError("S6 needs positive channel and state sizes");
  std::vector<T> a_init(channels * state_dim);
  for (std::size_t d = 0; d < channels; ++d) {
    for (std::size_t n = 0; n < state_dim; ++n) a_init[d * state_dim + n] = -static_cast<T>(n + 1);
  }
  a = this->register_parameter("A", Tensor<T>({channels, state_dim}, std::move(a_init)));
  d_skip = this->register_parameter("D", Tensor<T>::full({channels}, T(1)));
  this->register_module("delta_proj", delta_proj);
  this->register_module("b_proj", b_proj);
  this->register_module("c_proj", c_proj);

  // Step sizes start log-uniform in [1e-3, 1e-1].
  auto bias = delta_proj.bias.mutable_data();
  for (auto& v : bias) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    v = static_cast<T>(inverse_softplus(dt));
  }
  for (auto& v : b_proj.bias.mutable_data()) v = T(0);
  for (auto& v : c_proj.bias.mutable_data()) v = T(0);
}

template <class T>
S6Projections<T> S6<T>::project_inputs(const Tensor<T>& x) const {
  if (x.rank() != 3 || x.dim(2) != channels()) {
    throw ShapeError("S6 with " + std::to_string(channels()) + " channels got input " + shape_str(x.shape()));
  }
  return {ops::softplus(delta_proj.forward(x)), b_proj.forward(x), c_proj.forward(x)};
}

template <class T>
Tensor<T> S6<T>::forward(const Tensor<T>& x) const {
  const auto p = project_inputs(x);
  return selective_scan(x, p.delta, a, p.b, p.c, d_skip);
}

template Discretized<float> discretize(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Discretized<double> discretize(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);
template Tensor<float> selective_scan(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                      const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> selective_scan(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                       const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);
template class S6<float>;
template class S6<double>;

}  // namespace hvm
