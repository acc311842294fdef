#include "hvm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>

#include "hvm/kernels.hpp"

namespace hvm::ops {

using detail::grad_buffer;
using detail::make_result;

namespace {

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

// Strides of `in` expressed in the index space of `out` (0 where broadcast).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t src = in.size() - 1 - i;
    const std::size_t dst = out.size() - 1 - i;
    strides[dst] = in[src] == 1 ? 0 : stride;
    stride *= in[src];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t rank = out.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t inner = out[rank - 1];
  const std::size_t ia_step = sa[rank - 1], ib_step = sb[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t outer = shape_numel(out) / inner;
  std::size_t o = 0;
  for (std::size_t r = 0; r < outer; ++r) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t d = 0; d + 1 < rank; ++d) {
      ia += idx[d] * sa[d];
      ib += idx[d] * sb[d];
    }
    for (std::size_t j = 0; j < inner; ++j, ++o) f(o, ia + j * ia_step, ib + j * ib_step);
    for (std::size_t d = rank - 1; d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
}

template <class T, class F, class DA, class DB>
Tensor<T> binary(const char* name, const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  std::vector<T> out(shape_numel(out_shape));
  const auto& av = a.values();
  const auto& bv = b.values();
  const bool same = a.shape() == b.shape();
  std::vector<std::size_t> sa, sb;
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  } else {
    sa = broadcast_strides(a.shape(), out_shape);
    sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb,
                       [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = f(av[ia], bv[ib]); });
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_result<T>(name, out_shape, std::move(out), {&a, &b},
                        [an, bn, out_shape, sa, sb, same, da, db](const std::vector<T>& g) {
                          T* ga = an->requires_grad ? grad_buffer(*an).data() : nullptr;
                          T* gb = bn->requires_grad ? grad_buffer(*bn).data() : nullptr;
                          const auto& av = an->data;
                          const auto& bv = bn->data;
                          auto body = [&](std::size_t o, std::size_t ia, std::size_t ib) {
                            if (ga) ga[ia] += g[o] * da(av[ia], bv[ib]);
                            if (gb) gb[ib] += g[o] * db(av[ia], bv[ib]);
                          };
                          if (same) {
                            for (std::size_t i = 0; i < g.size(); ++i) body(i, i, i);
                          } else {
                            for_each_broadcast(out_shape, sa, sb, body);
                          }
                        });
}

// df(x, y) is dy/dx evaluated from the input and output values.
template <class T, class F, class DF>
Tensor<T> unary(const char* name, const Tensor<T>& x, F f, DF df) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  auto xn = x.node_ptr();
  auto yv = std::make_shared<std::vector<T>>(out);
  return make_result<T>(name, x.shape(), std::move(out), {&x}, [xn, yv, df](const std::vector<T>& g) {
    auto& gx = grad_buffer(*xn);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xn->data[i], (*yv)[i]);
  });
}

template <class T>
T sigmoid_value(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t eb = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
    }
    out[rank - 1 - i] = std::max(ea, eb);
  }
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>("add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
                   [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>("sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
                   [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>("mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
                   [](T x, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>("div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
                   [](T x, T y) { return -x / (y * y); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return unary<T>("neg", x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary<T>("scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  return unary<T>("add_scalar", x, [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary<T>(
      "softplus", x, [](T v) { return v > T(20) ? v : std::log1p(std::exp(v)); },
      [](T v, T) { return sigmoid_value(v); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>("sigmoid", x, [](T v) { return sigmoid_value(v); },
                  [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary<T>("silu", x, [](T v) { return v * sigmoid_value(v); },
                  [](T v, T) {
                    const T s = sigmoid_value(v);
                    return s + v * s * (T(1) - s);
                  });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * std::exp(-v * v / T(2)) * inv_sqrt2pi; });
}

template <class T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  return unary<T>("reciprocal", x, [](T v) { return T(1) / v; }, [](T v, T) { return T(-1) / (v * v); });
}

template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return unary<T>("clamp", x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
                  [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  kernels::gemm<T>(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_result<T>("matmul", {m, n}, std::move(out), {&a, &b}, [an, bn, m, n, k](const std::vector<T>& g) {
    if (an->requires_grad) {
      kernels::gemm<T>(false, true, m, k, n, g.data(), bn->data.data(), grad_buffer(*an).data(), true);
    }
    if (bn->requires_grad) {
      kernels::gemm<T>(true, false, k, n, m, an->data.data(), g.data(), grad_buffer(*bn).data(), true);
    }
  });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(1)) {
    throw ShapeError("linear shape mismatch: input " + shape_str(x.shape()) + ", weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t in = weight.dim(1), outf = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outf)) {
    throw ShapeError("linear bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t rows = x.numel() / in;
  std::vector<T> out(rows * outf);
  kernels::gemm<T>(false, true, rows, outf, in, x.data().data(), weight.data().data(), out.data(), false);
  if (bias.defined()) {
    const auto& bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < outf; ++j) out[r * outf + j] += bv[j];
    }
  }
  Shape shape = x.shape();
  shape.back() = outf;
  auto xn = x.node_ptr();
  auto wn = weight.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  return make_result<T>("linear", shape, std::move(out), {&x, &weight, &bias},
                        [xn, wn, bn, rows, in, outf](const std::vector<T>& g) {
                          if (xn->requires_grad) {
                            kernels::gemm<T>(false, false, rows, in, outf, g.data(), wn->data.data(),
                                             grad_buffer(*xn).data(), true);
                          }
                          if (wn->requires_grad) {
                            kernels::gemm<T>(true, false, outf, in, rows, g.data(), xn->data.data(),
                                             grad_buffer(*wn).data(), true);
                          }
                          if (bn && bn->requires_grad) {
                            auto& gb = grad_buffer(*bn);
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t j = 0; j < outf; ++j) gb[j] += g[r * outf + j];
                            }
                          }
                        });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  auto xn = x.node_ptr();
  return make_result<T>("reshape", std::move(shape), x.values(), {&x}, [xn](const std::vector<T>& g) {
    auto& gx = grad_buffer(*xn);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order) {
  const std::size_t rank = x.rank();
  std::vector<bool> seen(rank, false);
  if (order.size() != rank) throw ShapeError("permute order has wrong length for " + shape_str(x.shape()));
  for (auto o : order) {
    if (o >= rank || seen[o]) throw ShapeError("permute order is not a permutation");
    seen[o] = true;
  }
  const Shape& in_shape = x.shape();
  Shape out_shape(rank);
  std::vector<std::size_t> in_strides(rank);
  std::size_t stride = 1;
  for (std::size_t d = rank; d-- > 0;) {
    in_strides[d] = stride;
    stride *= in_shape[d];
  }
  std::vector<std::size_t> gather_strides(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out_shape[d] = in_shape[order[d]];
    gather_strides[d] = in_strides[order[d]];
  }
  // map[o] = flat input index of output element o.
  std::vector<std::size_t> map(x.numel());
  std::vector<std::size_t> zero(rank, 0);
  for_each_broadcast(out_shape, gather_strides, zero,
                     [&](std::size_t o, std::size_t i, std::size_t) { map[o] = i; });
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xv[map[o]];
  auto xn = x.node_ptr();
  return make_result<T>("permute", out_shape, std::move(out), {&x},
                        [xn, map = std::move(map)](const std::vector<T>& g) {
                          auto& gx = grad_buffer(*xn);
                          for (std::size_t o = 0; o < g.size(); ++o) gx[map[o]] += g[o];
                        });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

template <class T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  if (broadcast_shape(x.shape(), shape) != shape) {
    throw ShapeError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  const auto sx = broadcast_strides(x.shape(), shape);
  const std::vector<std::size_t> zero(shape.size(), 0);
  const auto& xv = x.values();
  std::vector<T> out(shape_numel(shape));
  for_each_broadcast(shape, sx, zero, [&](std::size_t o, std::size_t i, std::size_t) { out[o] = xv[i]; });
  auto xn = x.node_ptr();
  return make_result<T>("broadcast_to", shape, std::move(out), {&x}, [xn, shape, sx, zero](const std::vector<T>& g) {
    auto& gx = grad_buffer(*xn);
    for_each_broadcast(shape, sx, zero, [&](std::size_t o, std::size_t i, std::size_t) { gx[i] += g[o]; });
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t ax = normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    if (a.size() != b.size()) throw ShapeError("concat rank mismatch: " + shape_str(a) + " vs " + shape_str(b));
    a[ax] = b[ax] = 0;
    if (a != b) throw ShapeError("concat shape mismatch: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    out_shape[ax] += p.shape()[ax];
  }
  const std::size_t outer = prod(out_shape, 0, ax);
  const std::size_t inner = prod(out_shape, ax + 1, out_shape.size());
  const std::size_t out_row = out_shape[ax] * inner;
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t row = p.shape()[ax] * inner;
    const auto& pv = p.values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * row), row,
                  out.begin() + static_cast<std::ptrdiff_t>(o * out_row + offset));
    }
    offsets.push_back(offset);
    offset += row;
  }
  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  return make_result<T>("concat", out_shape, std::move(out), parts,
                        [nodes, offsets, outer, out_row](const std::vector<T>& g) {
                          for (std::size_t i = 0; i < nodes.size(); ++i) {
                            if (!nodes[i]->requires_grad) continue;
                            auto& gp = grad_buffer(*nodes[i]);
                            const std::size_t row = gp.size() / outer;
                            for (std::size_t o = 0; o < outer; ++o) {
                              for (std::size_t j = 0; j < row; ++j) gp[o * row + j] += g[o * out_row + offsets[i] + j];
                            }
                          }
                        });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  if (length == 0 || start + length > x.shape()[ax]) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(ax) + " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  const std::size_t outer = prod(x.shape(), 0, ax);
  const std::size_t inner = prod(x.shape(), ax + 1, x.rank());
  const std::size_t in_row = x.shape()[ax] * inner;
  const std::size_t out_row = length * inner;
  const std::size_t offset = start * inner;
  const auto& xv = x.values();
  std::vector<T> out(outer * out_row);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * in_row + offset), out_row,
                out.begin() + static_cast<std::ptrdiff_t>(o * out_row));
  }
  auto xn = x.node_ptr();
  return make_result<T>("slice", out_shape, std::move(out), {&x},
                        [xn, outer, in_row, out_row, offset](const std::vector<T>& g) {
                          auto& gx = grad_buffer(*xn);
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t j = 0; j < out_row; ++j) gx[o * in_row + offset + j] += g[o * out_row + j];
                          }
                        });
}

template <class T>
std::vector<Tensor<T>> split(const Tensor<T>& x, const std::vector<std::size_t>& sizes, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  if (total != x.shape()[ax]) {
    throw ShapeError("split sizes sum to " + std::to_string(total) + " but axis extent of " +
                     shape_str(x.shape()) + " is " + std::to_string(x.shape()[ax]));
  }
  std::vector<Tensor<T>> parts;
  std::size_t start = 0;
  for (auto s : sizes) {
    parts.push_back(slice(x, static_cast<int>(ax), start, s));
    start += s;
  }
  return parts;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (auto v : x.data()) total += v;
  auto xn = x.node_ptr();
  return make_result<T>("sum", {}, {total}, {&x}, [xn](const std::vector<T>& g) {
    auto& gx = grad_buffer(*xn);
    for (auto& v : gx) v += g[0];
  });
}

namespace {

template <class T>
Tensor<T> reduce_axis(const char* name, const Tensor<T>& x, int axis, bool keepdim, T factor) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const std::size_t outer = prod(x.shape(), 0, ax);
  const std::size_t extent = x.shape()[ax];
  const std::size_t inner = prod(x.shape(), ax + 1, x.rank());
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  const auto& xv = x.values();
  std::vector<T> out(outer * inner, T(0));
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t e = 0; e < extent; ++e) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * extent + e) * inner + i];
    }
  }
  if (factor != T(1)) {
    for (auto& v : out) v *= factor;
  }
  auto xn = x.node_ptr();
  return make_result<T>(name, out_shape, std::move(out), {&x},
                        [xn, outer, extent, inner, factor](const std::vector<T>& g) {
                          auto& gx = grad_buffer(*xn);
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t e = 0; e < extent; ++e) {
                              for (std::size_t i = 0; i < inner; ++i) gx[(o * extent + e) * inner + i] += g[o * inner + i] * factor;
                            }
                          }
                        });
}

}  // namespace

template <class T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim) {
  return reduce_axis<T>("sum_axis", x, axis, keepdim, T(1));
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  T total = T(0);
  for (auto v : x.data()) total += v;
  const T inv = T(1) / static_cast<T>(x.numel());
  auto xn = x.node_ptr();
  return make_result<T>("mean", {}, {total * inv}, {&x}, [xn, inv](const std::vector<T>& g) {
    auto& gx = grad_buffer(*xn);
    for (auto& v : gx) v += g[0] * inv;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim) {
  const std::size_t extent = x.dim(axis);
  return reduce_axis<T>("mean_axis", x, axis, keepdim, T(1) / static_cast<T>(extent));
}

template <class T>
Tensor<T> max(const Tensor<T>& x, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const std::size_t outer = prod(x.shape(), 0, ax);
  const std::size_t extent = x.shape()[ax];
  const std::size_t inner = prod(x.shape(), ax + 1, x.rank());
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  const auto& xv = x.values();
  std::vector<T> out(outer * inner);
  std::vector<std::size_t> arg(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = o * extent * inner + i;
      for (std::size_t e = 1; e < extent; ++e) {
        const std::size_t idx = (o * extent + e) * inner + i;
        if (xv[idx] > xv[best]) best = idx;
      }
      out[o * inner + i] = xv[best];
      arg[o * inner + i] = best;
    }
  }
  auto xn = x.node_ptr();
  return make_result<T>("max_axis", out_shape, std::move(out), {&x}, [xn, arg = std::move(arg)](const std::vector<T>& g) {
    auto& gx = grad_buffer(*xn);
    for (std::size_t o = 0; o < g.size(); ++o) gx[arg[o]] += g[o];
  });
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, o, k, cg, og, groups, ho, wo, stride, padding, dilation;
};

template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cg; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* dst = col + ((c * g.k + ki) * g.k + kj) * hw;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki * g.dilation) - static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj * g.dilation) - static_cast<std::ptrdiff_t>(g.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) && ix < static_cast<std::ptrdiff_t>(g.w);
            dst[oy * g.wo + ox] = inside ? img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cg; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* src = col + ((c * g.k + ki) * g.k + kj) * hw;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki * g.dilation) - static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj * g.dilation) - static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += src[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dOptions& opt) {
  if (x.rank() != 4 || weight.rank() != 4) {
    throw ShapeError("conv2d expects NCHW input and OIkk weight, got " + shape_str(x.shape()) + " and " +
                     shape_str(weight.shape()));
  }
  ConvGeometry g{};
  g.n = x.dim(0), g.c = x.dim(1), g.h = x.dim(2), g.w = x.dim(3);
  g.o = weight.dim(0), g.k = weight.dim(2);
  g.groups = opt.groups, g.stride = opt.stride, g.padding = opt.padding, g.dilation = opt.dilation;
  if (g.groups == 0 || g.stride == 0 || g.dilation == 0) throw ShapeError("conv2d: groups, stride and dilation must be positive");
  if (g.c % g.groups != 0 || g.o % g.groups != 0) {
    throw ShapeError("conv2d: channels " + std::to_string(g.c) + " -> " + std::to_string(g.o) +
                     " not divisible by groups " + std::to_string(g.groups));
  }
  g.cg = g.c / g.groups, g.og = g.o / g.groups;
  if (weight.dim(1) != g.cg || weight.dim(3) != g.k) {
    throw ShapeError("conv2d weight " + shape_str(weight.shape()) + " does not match input " +
                     shape_str(x.shape()) + " with groups " + std::to_string(g.groups));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.o)) {
    throw ShapeError("conv2d bias " + shape_str(bias.shape()) + " does not match " + std::to_string(g.o) + " outputs");
  }
  const std::size_t span = g.dilation * (g.k - 1) + 1;
  if (g.h + 2 * g.padding < span || g.w + 2 * g.padding < span) {
    throw ShapeError("conv2d kernel larger than padded input " + shape_str(x.shape()));
  }
  g.ho = (g.h + 2 * g.padding - span) / g.stride + 1;
  g.wo = (g.w + 2 * g.padding - span) / g.stride + 1;

  const std::size_t hw = g.ho * g.wo;
  const std::size_t ckk = g.cg * g.k * g.k;
  std::vector<T> out(g.n * g.o * hw);
  std::vector<T> col(ckk * hw);
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t gr = 0; gr < g.groups; ++gr) {
      im2col(xd + (n * g.c + gr * g.cg) * g.h * g.w, g, col.data());
      kernels::gemm<T>(false, false, g.og, hw, ckk, wd + gr * g.og * ckk, col.data(),
                       out.data() + (n * g.o + gr * g.og) * hw, false);
    }
    if (bias.defined()) {
      for (std::size_t o = 0; o < g.o; ++o) {
        T* dst = out.data() + (n * g.o + o) * hw;
        const T bv = bias[o];
        for (std::size_t i = 0; i < hw; ++i) dst[i] += bv;
      }
    }
  }
  auto xn = x.node_ptr();
  auto wn = weight.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  return make_result<T>("conv2d", {g.n, g.o, g.ho, g.wo}, std::move(out), {&x, &weight, &bias},
                        [xn, wn, bn, g, hw, ckk](const std::vector<T>& gout) {
                          std::vector<T> col(ckk * hw), gcol(ckk * hw);
                          T* gx = xn->requires_grad ? grad_buffer(*xn).data() : nullptr;
                          T* gw = wn->requires_grad ? grad_buffer(*wn).data() : nullptr;
                          for (std::size_t n = 0; n < g.n; ++n) {
                            for (std::size_t gr = 0; gr < g.groups; ++gr) {
                              const T* go = gout.data() + (n * g.o + gr * g.og) * hw;
                              if (gw) {
                                im2col(xn->data.data() + (n * g.c + gr * g.cg) * g.h * g.w, g, col.data());
                                kernels::gemm<T>(false, true, g.og, ckk, hw, go, col.data(), gw + gr * g.og * ckk, true);
                              }
                              if (gx) {
                                kernels::gemm<T>(true, false, ckk, hw, g.og, wn->data.data() + gr * g.og * ckk, go,
                                                 gcol.data(), false);
                                col2im(gcol.data(), g, gx + (n * g.c + gr * g.cg) * g.h * g.w);
                              }
                            }
                          }
                          if (bn && bn->requires_grad) {
                            auto& gb = grad_buffer(*bn);
                            for (std::size_t n = 0; n < g.n; ++n) {
                              for (std::size_t o = 0; o < g.o; ++o) {
                                const T* go = gout.data() + (n * g.o + o) * hw;
                                T acc = T(0);
                                for (std::size_t i = 0; i < hw; ++i) acc += go[i];
                                gb[o] += acc;
                              }
                            }
                          }
                        });
}

template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t k) {
  if (x.rank() != 4 || k == 0 || x.dim(2) % k != 0 || x.dim(3) % k != 0) {
    throw ShapeError("max_pool2d(" + std::to_string(k) + ") cannot tile " + shape_str(x.shape()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h / k, wo = w / k;
  const auto& xv = x.values();
  std::vector<T> out(planes * ho * wo);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (p * h + oy * k) * w + ox * k;
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t idx = (p * h + oy * k + dy) * w + ox * k + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const std::size_t o = (p * ho + oy) * wo + ox;
        out[o] = xv[best];
        arg[o] = best;
      }
    }
  }
  auto xn = x.node_ptr();
  return make_result<T>("max_pool2d", {x.dim(0), x.dim(1), ho, wo}, std::move(out), {&x},
                        [xn, arg = std::move(arg)](const std::vector<T>& g) {
                          auto& gx = grad_buffer(*xn);
                          for (std::size_t o = 0; o < g.size(); ++o) gx[arg[o]] += g[o];
                        });
}

template <class T>
Tensor<T> upsample_nearest2d(const Tensor<T>& x, std::size_t f) {
  if (x.rank() != 4 || f == 0) throw ShapeError("upsample_nearest2d expects NCHW, got " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h * f, wo = w * f;
  const auto& xv = x.values();
  std::vector<T> out(planes * ho * wo);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t xx = 0; xx < wo; ++xx) out[(p * ho + y) * wo + xx] = xv[(p * h + y / f) * w + xx / f];
    }
  }
  auto xn = x.node_ptr();
  return make_result<T>("upsample_nearest2d", {x.dim(0), x.dim(1), ho, wo}, std::move(out), {&x},
                        [xn, planes, h, w, f](const std::vector<T>& g) {
                          auto& gx = grad_buffer(*xn);
                          const std::size_t ho = h * f, wo = w * f;
                          for (std::size_t p = 0; p < planes; ++p) {
                            for (std::size_t y = 0; y < ho; ++y) {
                              for (std::size_t xx = 0; xx < wo; ++xx) gx[(p * h + y / f) * w + xx / f] += g[(p * ho + y) * wo + xx];
                            }
                          }
                        });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() < 1 || x.dim(-1) < 1) throw ShapeError("layer_norm needs a non-empty last axis");
  const std::size_t c = x.dim(-1);
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("layer_norm affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / c;
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<T> out(xv.size());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    T mu = T(0);
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const T xh = (row[j] - mu) * rs;
      (*xhat)[r * c + j] = xh;
      out[r * c + j] = xh * gv[j] + bv[j];
    }
  }
  auto xn = x.node_ptr();
  auto gn = gamma.node_ptr();
  auto bn = beta.node_ptr();
  return make_result<T>("layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta},
                        [xn, gn, bn, xhat, rstd, rows, c](const std::vector<T>& g) {
                          const auto& gv = gn->data;
                          if (gn->requires_grad || bn->requires_grad) {
                            T* gg = gn->requires_grad ? grad_buffer(*gn).data() : nullptr;
                            T* gb = bn->requires_grad ? grad_buffer(*bn).data() : nullptr;
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t j = 0; j < c; ++j) {
                                if (gg) gg[j] += g[r * c + j] * (*xhat)[r * c + j];
                                if (gb) gb[j] += g[r * c + j];
                              }
                            }
                          }
                          if (!xn->requires_grad) return;
                          auto& gx = grad_buffer(*xn);
                          const T inv_c = T(1) / static_cast<T>(c);
                          for (std::size_t r = 0; r < rows; ++r) {
                            T mean_g = T(0), mean_gx = T(0);
                            for (std::size_t j = 0; j < c; ++j) {
                              const T gxh = g[r * c + j] * gv[j];
                              mean_g += gxh;
                              mean_gx += gxh * (*xhat)[r * c + j];
                            }
                            mean_g *= inv_c;
                            mean_gx *= inv_c;
                            for (std::size_t j = 0; j < c; ++j) {
                              const T gxh = g[r * c + j] * gv[j];
                              gx[r * c + j] += (*rstd)[r] * (gxh - mean_g - (*xhat)[r * c + j] * mean_gx);
                            }
                          }
                        });
}

template <class T>
Tensor<T> permute_tokens(const Tensor<T>& x, std::span<const std::size_t> order) {
  if (x.rank() != 3) throw ShapeError("permute_tokens expects B x L x D, got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (order.size() != l) throw ShapeError("token order of length " + std::to_string(order.size()) + " for L=" + std::to_string(l));
  std::vector<bool> seen(l, false);
  for (auto o : order) {
    if (o >= l || seen[o]) throw ShapeError("token order is not a permutation of 0..L-1");
    seen[o] = true;
  }
  std::vector<std::size_t> idx(order.begin(), order.end());
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t i = 0; i < l; ++i) {
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((bi * l + idx[i]) * d), d,
                  out.begin() + static_cast<std::ptrdiff_t>((bi * l + i) * d));
    }
  }
  auto xn = x.node_ptr();
  return make_result<T>("permute_tokens", x.shape(), std::move(out), {&x},
                        [xn, idx = std::move(idx), b, l, d](const std::vector<T>& g) {
                          auto& gx = grad_buffer(*xn);
                          for (std::size_t bi = 0; bi < b; ++bi) {
                            for (std::size_t i = 0; i < l; ++i) {
                              for (std::size_t j = 0; j < d; ++j) gx[(bi * l + idx[i]) * d + j] += g[(bi * l + i) * d + j];
                            }
                          }
                        });
}

namespace {

template <class T>
using PrimitiveFn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

template <class T>
const std::map<std::string, std::pair<std::size_t, PrimitiveFn<T>>, std::less<>>& registry() {
  using V = std::vector<Tensor<T>>;
  static const std::map<std::string, std::pair<std::size_t, PrimitiveFn<T>>, std::less<>> table = {
      {"add", {2, [](const V& v) { return add(v[0], v[1]); }}},
      {"sub", {2, [](const V& v) { return sub(v[0], v[1]); }}},
      {"mul", {2, [](const V& v) { return mul(v[0], v[1]); }}},
      {"div", {2, [](const V& v) { return div(v[0], v[1]); }}},
      {"matmul", {2, [](const V& v) { return matmul(v[0], v[1]); }}},
      {"linear", {3, [](const V& v) { return linear(v[0], v[1], v[2]); }}},
      {"layer_norm", {3, [](const V& v) { return layer_norm(v[0], v[1], v[2], T(1e-6)); }}},
      {"neg", {1, [](const V& v) { return neg(v[0]); }}},
      {"exp", {1, [](const V& v) { return exp(v[0]); }}},
      {"log", {1, [](const V& v) { return log(v[0]); }}},
      {"softplus", {1, [](const V& v) { return softplus(v[0]); }}},
      {"sigmoid", {1, [](const V& v) { return sigmoid(v[0]); }}},
      {"silu", {1, [](const V& v) { return silu(v[0]); }}},
      {"gelu", {1, [](const V& v) { return gelu(v[0]); }}},
      {"reciprocal", {1, [](const V& v) { return reciprocal(v[0]); }}},
      {"transpose", {1, [](const V& v) { return transpose(v[0]); }}},
      {"sum", {1, [](const V& v) { return sum(v[0]); }}},
      {"mean", {1, [](const V& v) { return mean(v[0]); }}},
      {"concat", {0, [](const V& v) { return concat(v, -1); }}},
  };
  return table;
}

}  // namespace

template <class T>
Tensor<T> apply(std::string_view op, const std::vector<Tensor<T>>& inputs) {
  const auto& table = registry<T>();
  const auto it = table.find(op);
  if (it == table.end()) throw std::invalid_argument("unknown primitive '" + std::string(op) + "'");
  const auto arity = it->second.first;
  if (arity != 0 && inputs.size() != arity) {
    throw std::invalid_argument("primitive '" + std::string(op) + "' takes " + std::to_string(arity) +
                                " inputs, got " + std::to_string(inputs.size()));
  }
  return it->second.second(inputs);
}

std::vector<std::string> primitive_names() {
  std::vector<std::string> names;
  for (const auto& [name, entry] : registry<double>()) names.push_back(name);
  return names;
}

#define HVM_OPS_INSTANTIATE(T)                                                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> neg(const Tensor<T>&);                                                       \
  template Tensor<T> scale(const Tensor<T>&, T);                                                  \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                             \
  template Tensor<T> exp(const Tensor<T>&);                                                       \
  template Tensor<T> log(const Tensor<T>&);                                                       \
  template Tensor<T> softplus(const Tensor<T>&);                                                  \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                   \
  template Tensor<T> silu(const Tensor<T>&);                                                      \
  template Tensor<T> gelu(const Tensor<T>&);                                                      \
  template Tensor<T> reciprocal(const Tensor<T>&);                                                \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                            \
  template Tensor<T> transpose(const Tensor<T>&);                                                 \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                  \
  template Tensor<T> broadcast_to(const Tensor<T>&, const Shape&);                                \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                  \
  template std::vector<Tensor<T>> split(const Tensor<T>&, const std::vector<std::size_t>&, int);  \
  template Tensor<T> slice(const Tensor<T>&, int, std::size_t, std::size_t);                      \
  template Tensor<T> sum(const Tensor<T>&);                                                       \
  template Tensor<T> sum(const Tensor<T>&, int, bool);                                            \
  template Tensor<T> mean(const Tensor<T>&);                                                      \
  template Tensor<T> mean(const Tensor<T>&, int, bool);                                           \
  template Tensor<T> max(const Tensor<T>&, int, bool);                                            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                            const Conv2dOptions&);                                                \
  template Tensor<T> max_pool2d(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> upsample_nearest2d(const Tensor<T>&, std::size_t);                           \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);         \
  template Tensor<T> permute_tokens(const Tensor<T>&, std::span<const std::size_t>);              \
  template Tensor<T> apply(std::string_view, const std::vector<Tensor<T>>&);

HVM_OPS_INSTANTIATE(float)
HVM_OPS_INSTANTIATE(double)

#undef HVM_OPS_INSTANTIATE

}  // namespace hvm::ops
