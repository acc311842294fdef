#include "hvm/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>

namespace hvm {

namespace fs = std::filesystem;

double uniform_unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  // Rejection sampling avoids modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return static_cast<std::size_t>(v % n);
}

void shuffle_indices(std::vector<std::size_t>& idx, std::mt19937_64& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
}

SegmentationSample make_sample(std::string id, const Image& rgb, const Image& mask) {
  if (rgb.channels != 3 || mask.channels != 1) throw ImageError("sample '" + id + "' needs an RGB image and a gray mask");
  if (rgb.height != mask.height || rgb.width != mask.width) {
    throw ImageError("sample '" + id + "': image is " + std::to_string(rgb.height) + "x" + std::to_string(rgb.width) +
                     " but mask is " + std::to_string(mask.height) + "x" + std::to_string(mask.width));
  }
  SegmentationSample s{std::move(id), rgb.height, rgb.width, {}, {}};
  s.image.resize(rgb.pixels.size());
  for (std::size_t i = 0; i < rgb.pixels.size(); ++i) s.image[i] = static_cast<float>(rgb.pixels[i]) / 255.0f;
  s.mask.resize(mask.pixels.size());
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) s.mask[i] = mask.pixels[i] > 127 ? 1 : 0;
  return s;
}

std::vector<float> resize_bilinear(const std::vector<float>& src, std::size_t h, std::size_t w, std::size_t c,
                                   std::size_t out_h, std::size_t out_w) {
  if (src.size() != h * w * c) throw std::invalid_argument("resize_bilinear: buffer size does not match shape");
  if (h == out_h && w == out_w) return src;
  std::vector<float> out(out_h * out_w * c);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::max(0.0, (static_cast<double>(y) + 0.5) * sy - 0.5);
    const std::size_t y0 = std::min(static_cast<std::size_t>(fy), h - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::max(0.0, (static_cast<double>(x) + 0.5) * sx - 0.5);
      const std::size_t x0 = std::min(static_cast<std::size_t>(fx), w - 1);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t k = 0; k < c; ++k) {
        const double top = src[(y0 * w + x0) * c + k] * (1 - wx) + src[(y0 * w + x1) * c + k] * wx;
        const double bot = src[(y1 * w + x0) * c + k] * (1 - wx) + src[(y1 * w + x1) * c + k] * wx;
        out[(y * out_w + x) * c + k] = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> resize_nearest(const std::vector<std::uint8_t>& src, std::size_t h, std::size_t w,
                                         std::size_t out_h, std::size_t out_w) {
  if (src.size() != h * w) throw std::invalid_argument("resize_nearest: buffer size does not match shape");
  if (h == out_h && w == out_w) return src;
  std::vector<std::uint8_t> out(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = std::min(h - 1, static_cast<std::size_t>((static_cast<double>(y) + 0.5) * h / out_h));
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = std::min(w - 1, static_cast<std::size_t>((static_cast<double>(x) + 0.5) * w / out_w));
      out[y * out_w + x] = src[sy * w + sx];
    }
  }
  return out;
}

SegmentationSample resize_sample(const SegmentationSample& s, std::size_t out_h, std::size_t out_w) {
  SegmentationSample out{s.id, out_h, out_w, resize_bilinear(s.image, s.height, s.width, 3, out_h, out_w),
                         resize_nearest(s.mask, s.height, s.width, out_h, out_w)};
  return out;
}

std::vector<SegmentationSample> load_dataset(const fs::path& images_dir, const fs::path& masks_dir,
                                             std::size_t target_height, std::size_t target_width,
                                             const WarningSink& warn) {
  if (!fs::is_directory(images_dir)) throw std::runtime_error("images directory '" + images_dir.string() + "' does not exist");
  if (!fs::is_directory(masks_dir)) throw std::runtime_error("masks directory '" + masks_dir.string() + "' does not exist");

  std::map<std::string, fs::path> masks;
  for (const auto& e : fs::directory_iterator(masks_dir)) {
    if (e.is_regular_file() && is_image_path(e.path())) masks.emplace(e.path().stem().string(), e.path());
  }
  std::map<std::string, fs::path> images;
  for (const auto& e : fs::directory_iterator(images_dir)) {
    if (!e.is_regular_file()) continue;
    if (!is_image_path(e.path())) {
      if (warn) warn("skipping non-image file '" + e.path().string() + "'");
      continue;
    }
    images.emplace(e.path().stem().string(), e.path());
  }

  std::vector<SegmentationSample> out;
  for (const auto& [stem, path] : images) {
    auto m = masks.find(stem);
    if (m == masks.end()) throw std::runtime_error("no mask for image stem '" + stem + "' in '" + masks_dir.string() + "'");
    auto s = make_sample(stem, read_image(path, 3), read_image(m->second, 1));
    out.push_back(target_height ? resize_sample(s, target_height, target_width) : std::move(s));
  }
  return out;
}

AugmentDraws draw_augment(std::mt19937_64& rng, const AugmentConfig& cfg) {
  // All three draws happen unconditionally so toggles never shift later draws.
  AugmentDraws d;
  const bool h = uniform_unit(rng) < 0.5;
  const bool v = uniform_unit(rng) < 0.5;
  const double a = (2.0 * uniform_unit(rng) - 1.0) * cfg.max_rotation_degrees;
  d.hflip = cfg.hflip && h;
  d.vflip = cfg.vflip && v;
  d.angle_degrees = a;
  return d;
}

SegmentationSample apply_augment(const SegmentationSample& s, const AugmentDraws& d) {
  const std::size_t H = s.height, W = s.width;
  SegmentationSample out = s;
  if (d.hflip || d.vflip) {
    for (std::size_t y = 0; y < H; ++y) {
      const std::size_t sy = d.vflip ? H - 1 - y : y;
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t sx = d.hflip ? W - 1 - x : x;
        for (std::size_t c = 0; c < 3; ++c) out.image[(y * W + x) * 3 + c] = s.image[(sy * W + sx) * 3 + c];
        out.mask[y * W + x] = s.mask[sy * W + sx];
      }
    }
  }
  if (d.angle_degrees == 0.0) return out;

  const SegmentationSample src = out;
  const double theta = d.angle_degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cy = (static_cast<double>(H) - 1) / 2, cx = (static_cast<double>(W) - 1) / 2;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      // Inverse map: output pixel -> source coordinate.
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      const double fx = cs * dx + sn * dy + cx;
      const double fy = -sn * dx + cs * dy + cy;
      const long nx = std::lround(fx), ny = std::lround(fy);
      const bool inside_n = nx >= 0 && ny >= 0 && nx < static_cast<long>(W) && ny < static_cast<long>(H);
      out.mask[y * W + x] = inside_n ? src.mask[static_cast<std::size_t>(ny) * W + static_cast<std::size_t>(nx)] : 0;

      const double x0f = std::floor(fx), y0f = std::floor(fy);
      const double wx = fx - x0f, wy = fy - y0f;
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0;
        for (int oy = 0; oy < 2; ++oy) {
          for (int ox = 0; ox < 2; ++ox) {
            const long px = static_cast<long>(x0f) + ox, py = static_cast<long>(y0f) + oy;
            if (px < 0 || py < 0 || px >= static_cast<long>(W) || py >= static_cast<long>(H)) continue;
            const double wgt = (ox ? wx : 1 - wx) * (oy ? wy : 1 - wy);
            acc += wgt * src.image[(static_cast<std::size_t>(py) * W + static_cast<std::size_t>(px)) * 3 + c];
          }
        }
        out.image[(y * W + x) * 3 + c] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

SegmentationSample augment(const SegmentationSample& s, std::mt19937_64& rng, const AugmentConfig& cfg) {
  return apply_augment(s, draw_augment(rng, cfg));
}

SplitIndices split(std::size_t count, const SplitSpec& spec) {
  if (spec.train < 0 || spec.val < 0 || spec.test < 0 || std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9) {
    throw std::invalid_argument("split fractions must be non-negative and sum to 1");
  }
  if (count == 0) throw std::invalid_argument("cannot split an empty dataset");
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i;
  std::mt19937_64 rng(spec.seed);
  shuffle_indices(idx, rng);
  const auto n_train = std::min(count, static_cast<std::size_t>(std::llround(spec.train * static_cast<double>(count))));
  const auto n_val =
      std::min(count - n_train, static_cast<std::size_t>(std::llround(spec.val * static_cast<double>(count))));
  SplitIndices out;
  out.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                 idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  out.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  return out;
}

Batch make_batch(const std::vector<SegmentationSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("cannot batch zero samples");
  const std::size_t B = samples.size(), H = samples[0].height, W = samples[0].width;
  std::vector<float> img(B * 3 * H * W), tgt(B * H * W);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& s = samples[b];
    if (s.height != H || s.width != W) throw ShapeError("batch mixes sample sizes; sample '" + s.id + "' differs");
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < H * W; ++p) img[((b * 3 + c) * H * W) + p] = s.image[p * 3 + c];
    }
    for (std::size_t p = 0; p < H * W; ++p) tgt[b * H * W + p] = static_cast<float>(s.mask[p]);
  }
  return {Tensor<float>({B, 3, H, W}, std::move(img)), Tensor<float>({B, 1, H, W}, std::move(tgt))};
}

std::vector<SegmentationSample> make_circles(std::size_t count, std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SegmentationSample> out;
  const double S = static_cast<double>(size);
  for (std::size_t i = 0; i < count; ++i) {
    SegmentationSample s;
    char id[32];
    std::snprintf(id, sizeof id, "circle_%04zu", i);
    s.id = id;
    s.height = s.width = size;
    s.image.resize(size * size * 3);
    s.mask.assign(size * size, 0);
    const std::size_t discs = 1 + uniform_index(rng, 3);
    struct Disc {
      double cy, cx, r;
    };
    std::vector<Disc> ds;
    for (std::size_t k = 0; k < discs; ++k) {
      const double r = S * (0.08 + 0.12 * uniform_unit(rng));
      ds.push_back({r + (S - 2 * r) * uniform_unit(rng), r + (S - 2 * r) * uniform_unit(rng), r});
    }
    const double tint[3] = {0.6 + 0.4 * uniform_unit(rng), 0.5 + 0.4 * uniform_unit(rng), 0.4 + 0.4 * uniform_unit(rng)};
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        bool inside = false;
        for (const auto& d : ds) {
          const double dy = static_cast<double>(y) + 0.5 - d.cy, dx = static_cast<double>(x) + 0.5 - d.cx;
          inside = inside || dy * dy + dx * dx <= d.r * d.r;
        }
        s.mask[y * size + x] = inside ? 1 : 0;
        for (std::size_t c = 0; c < 3; ++c) {
          const double noise = 0.15 * uniform_unit(rng);
          const double v = inside ? tint[c] + noise * 0.5 : 0.1 + noise;
          // Quantise like an 8-bit image so synthetic data survives a PNG round trip exactly.
          s.image[(y * size + x) * 3 + c] = static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f;
        }
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

Image to_image(const SegmentationSample& s) {
  Image img{s.height, s.width, 3, std::vector<std::uint8_t>(s.image.size())};
  for (std::size_t i = 0; i < s.image.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(s.image[i], 0.0f, 1.0f) * 255.0f));
  }
  return img;
}

Image mask_to_image(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w) {
  Image img{h, w, 1, std::vector<std::uint8_t>(mask.size())};
  for (std::size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask[i] ? 255 : 0;
  return img;
}

void write_dataset(const std::vector<SegmentationSample>& samples, const fs::path& images_dir,
                   const fs::path& masks_dir) {
  fs::create_directories(images_dir);
  fs::create_directories(masks_dir);
  for (const auto& s : samples) {
    write_png(images_dir / (s.id + ".png"), to_image(s));
    write_png(masks_dir / (s.id + ".png"), mask_to_image(s.mask, s.height, s.width));
  }
}

}  // namespace hvm
