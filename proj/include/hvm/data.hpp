#pragma once

// Segmentation samples: loading, resizing, augmentation, splitting, batching,
// and a synthetic random-circles generator.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hvm/image_io.hpp"
#include "hvm/tensor.hpp"

namespace hvm {

struct SegmentationSample {
  std::string id;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> image;         // H x W x 3, values in [0, 1]
  std::vector<std::uint8_t> mask;   // H x W, values in {0, 1}
};

using WarningSink = std::function<void(const std::string&)>;

// Images matched to masks by filename stem, lexicographic by stem. A missing
// mask throws naming the stem; non-image files are reported and skipped.
std::vector<SegmentationSample> load_dataset(const std::filesystem::path& images_dir,
                                             const std::filesystem::path& masks_dir, std::size_t target_height,
                                             std::size_t target_width, const WarningSink& warn = {});

// Pixels > 127 are foreground.
SegmentationSample make_sample(std::string id, const Image& rgb, const Image& mask);

// Half-pixel-centre bilinear resize of an H x W x C float buffer.
std::vector<float> resize_bilinear(const std::vector<float>& src, std::size_t h, std::size_t w, std::size_t c,
                                   std::size_t out_h, std::size_t out_w);
std::vector<std::uint8_t> resize_nearest(const std::vector<std::uint8_t>& src, std::size_t h, std::size_t w,
                                         std::size_t out_h, std::size_t out_w);
SegmentationSample resize_sample(const SegmentationSample& s, std::size_t out_h, std::size_t out_w);

struct AugmentConfig {
  bool hflip = true;
  bool vflip = true;
  double max_rotation_degrees = 30.0;
};

struct AugmentDraws {
  bool hflip = false;
  bool vflip = false;
  double angle_degrees = 0.0;
};

AugmentDraws draw_augment(std::mt19937_64& rng, const AugmentConfig& cfg);
// Flips, then rotation about the centre (bilinear image, nearest mask, zero fill).
SegmentationSample apply_augment(const SegmentationSample& s, const AugmentDraws& draws);
SegmentationSample augment(const SegmentationSample& s, std::mt19937_64& rng, const AugmentConfig& cfg);

struct SplitSpec {
  double train = 0.8;
  double val = 0.2;
  double test = 0.0;
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

// Seeded shuffle then partition: train = round(n*f_train), val = round(n*f_val), test = rest.
SplitIndices split(std::size_t count, const SplitSpec& spec);

template <class T>
std::vector<T> select(const std::vector<T>& items, const std::vector<std::size_t>& indices) {
  std::vector<T> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(items.at(i));
  return out;
}

// Fisher-Yates with an explicit uniform draw, so orders are portable across standard libraries.
void shuffle_indices(std::vector<std::size_t>& idx, std::mt19937_64& rng);
std::size_t uniform_index(std::mt19937_64& rng, std::size_t n);
double uniform_unit(std::mt19937_64& rng);

struct Batch {
  Tensor<float> images;   // B x 3 x H x W
  Tensor<float> targets;  // B x 1 x H x W
};

Batch make_batch(const std::vector<SegmentationSample>& samples);

// Noisy backgrounds with one to three bright discs; the mask is the union of discs.
std::vector<SegmentationSample> make_circles(std::size_t count, std::size_t size, std::uint64_t seed);
void write_dataset(const std::vector<SegmentationSample>& samples, const std::filesystem::path& images_dir,
                   const std::filesystem::path& masks_dir);

Image to_image(const SegmentationSample& s);
Image mask_to_image(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w);

}  // namespace hvm
