#include "hvm/ss2d.hpp"

#include <algorithm>
#include <stdexcept>

namespace hvm {

std::vector<std::size_t> scan_order(std::size_t direction, std::size_t height, std::size_t width) {
  if (direction >= kScanDirections) throw std::invalid_argument("scan direction must be 0..3");
  if (height == 0 || width == 0) throw ShapeError("scan grid must be non-empty");
  std::vector<std::size_t> order;
  order.reserve(height * width);
  if (direction < 2) {
    for (std::size_t i = 0; i < height * width; ++i) order.push_back(i);
  } else {
    for (std::size_t col = width; col-- > 0;) {
      for (std::size_t row = 0; row < height; ++row) order.push_back(row * width + col);
    }
  }
  if (direction % 2 == 1) std::reverse(order.begin(), order.end());
  return order;
}

namespace {

std::vector<std::size_t> inverse(const std::vector<std::size_t>& order) {
  std::vector<std::size_t> inv(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inv[order[i]] = i;
  return inv;
}

}  // namespace

template <class T>
DirectionalSequences<T> scan_expand(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("scan_expand expects B x H x W x D, got " + shape_str(x.shape()));
  DirectionalSequences<T> out;
  out.height = x.dim(1);
  out.width = x.dim(2);
  const auto flat = ops::reshape(x, {x.dim(0), out.height * out.width, x.dim(3)});
  for (std::size_t d = 0; d < kScanDirections; ++d) {
    out.seqs[d] = ops::permute_tokens(flat, scan_order(d, out.height, out.width));
  }
  return out;
}

template <class T>
Tensor<T> scan_merge(const DirectionalSequences<T>& in) {
  const std::size_t len = in.height * in.width;
  const Shape& ref = in.seqs[0].shape();
  for (const auto& s : in.seqs) {
    if (s.rank() != 3 || s.dim(1) != len || s.shape() != ref) {
      throw ShapeError("scan_merge: sequence " + shape_str(s.shape()) + " inconsistent with grid " +
                       std::to_string(in.height) + "x" + std::to_string(in.width));
    }
  }
  std::array<Tensor<T>, kScanDirections> aligned;
  for (std::size_t d = 0; d < kScanDirections; ++d) {
    aligned[d] = ops::permute_tokens(in.seqs[d], inverse(scan_order(d, in.height, in.width)));
  }
  // Pairwise: identical inputs sum to exactly 4x.
  auto total = ops::add(ops::add(aligned[0], aligned[1]), ops::add(aligned[2], aligned[3]));
  return ops::reshape(total, {ref[0], in.height, in.width, ref[2]});
}

template <class T>
SS2D<T>::SS2D(std::size_t channels, std::size_t state_dim, InitRng& rng) : channels_(channels), norm_(channels) {
  for (std::size_t d = 0; d < kScanDirections; ++d) {
    scans_[d] = std::make_unique<S6<T>>(channels, state_dim, rng);
    this->register_module("scan" + std::to_string(d), *scans_[d]);
  }
  this->register_module("norm", norm_);
}

template <class T>
Tensor<T> SS2D<T>::scan(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(3) != channels_) {
    throw ShapeError("SS2D with " + std::to_string(channels_) + " channels got " + shape_str(x.shape()));
  }
  auto seqs = scan_expand(x);
  for (std::size_t d = 0; d < kScanDirections; ++d) seqs.seqs[d] = scans_[d]->forward(seqs.seqs[d]);
  return scan_merge(seqs);
}

template <class T>
Tensor<T> SS2D<T>::forward(const Tensor<T>& x) const {
  return norm_.forward(scan(x));
}

template DirectionalSequences<float> scan_expand(const Tensor<float>&);
template DirectionalSequences<double> scan_expand(const Tensor<double>&);
template Tensor<float> scan_merge(const DirectionalSequences<float>&);
template Tensor<double> scan_merge(const DirectionalSequences<double>&);
template class SS2D<float>;
template class SS2D<double>;

}  // namespace hvm
