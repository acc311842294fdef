#include "hvm/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <string>

#include <jpeglib.h>
#include <png.h>

namespace hvm {

namespace {

std::string lower_ext(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Image read_png(const std::filesystem::path& path, std::size_t channels) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw ImageError("cannot decode PNG '" + path.string() + "': " + img.message);
  }
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image out{img.height, img.width, channels, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(img))};
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw ImageError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

Image read_jpeg(const std::filesystem::path& path, std::size_t channels) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw ImageError("cannot open '" + path.string() + "'");
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  Image out;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw ImageError("cannot decode JPEG '" + path.string() + "': " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.height = cinfo.output_height;
  out.width = cinfo.output_width;
  out.channels = channels;
  out.pixels.resize(out.height * out.width * channels);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

void check_image(const Image& image, const std::filesystem::path& path) {
  if ((image.channels != 1 && image.channels != 3) || image.height == 0 || image.width == 0 ||
      image.pixels.size() != image.height * image.width * image.channels) {
    throw ImageError("refusing to write malformed image to '" + path.string() + "'");
  }
}

}  // namespace

bool is_image_path(const std::filesystem::path& path) {
  const auto ext = lower_ext(path);
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

Image read_image(const std::filesystem::path& path, std::size_t channels) {
  if (channels != 1 && channels != 3) throw ImageError("images are read as 1 or 3 channels");
  const auto ext = lower_ext(path);
  if (ext == ".png") return read_png(path, channels);
  if (ext == ".jpg" || ext == ".jpeg") return read_jpeg(path, channels);
  throw ImageError("'" + path.string() + "' is not a PNG or JPEG file");
}

void write_png(const std::filesystem::path& path, const Image& image) {
  check_image(image, path);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw ImageError("cannot write PNG '" + path.string() + "': " + img.message);
  }
}

void write_jpeg(const std::filesystem::path& path, const Image& image, int quality) {
  check_image(image, path);
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw ImageError("cannot open '" + path.string() + "' for writing");
  jpeg_compress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    throw ImageError("cannot encode JPEG '" + path.string() + "': " + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_stdio_dest(&cinfo, file.get());
  cinfo.image_width = static_cast<JDIMENSION>(image.width);
  cinfo.image_height = static_cast<JDIMENSION>(image.height);
  cinfo.input_components = static_cast<int>(image.channels);
  cinfo.in_color_space = image.channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPLE*>(image.pixels.data() + static_cast<std::size_t>(cinfo.next_scanline) * image.width *
                                                               image.channels);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
}

}  // namespace hvm
