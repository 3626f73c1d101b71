#pragma once

// 8-bit PNG/JPEG decoding to float tensors in [0,255] and grayscale PNG
// encoding.

#include <jpeglib.h>
#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "castnet/errors.hpp"
#include "castnet/tensor.hpp"

namespace castnet {

namespace detail {

inline std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  for (auto& ch : e) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return e;
}

struct JpegErrorJump {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorJump*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

inline Tensor<float> read_png_rgb(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw DataError("cannot read image '" + path.string() + "': " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataError("cannot decode image '" + path.string() + "': " + img.message);
  }
  return Tensor<float>({img.height, img.width, 3}, std::vector<float>(buf.begin(), buf.end()));
}

inline Tensor<float> read_jpeg_rgb(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!file) throw DataError("cannot open image '" + path.string() + "'");
  jpeg_decompress_struct cinfo{};
  JpegErrorJump err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  std::vector<float> pixels;
  std::vector<JSAMPLE> row;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DataError("cannot decode image '" + path.string() + "': " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const std::size_t w = cinfo.output_width, h = cinfo.output_height;
  pixels.reserve(w * h * 3);
  row.resize(w * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW rp = row.data();
    jpeg_read_scanlines(&cinfo, &rp, 1);
    pixels.insert(pixels.end(), row.begin(), row.end());
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return Tensor<float>({h, w, 3}, std::move(pixels));
}

}  // namespace detail

inline bool is_image_file(const std::filesystem::path& p) {
  const std::string e = detail::lower_ext(p);
  return e == ".png" || e == ".jpg" || e == ".jpeg";
}

// (H, W, 3) tensor with values in [0, 255]; grayscale files are expanded.
inline Tensor<float> read_image_rgb(const std::filesystem::path& path) {
  const std::string e = detail::lower_ext(path);
  if (e == ".png") return detail::read_png_rgb(path);
  if (e == ".jpg" || e == ".jpeg") return detail::read_jpeg_rgb(path);
  throw DataError("unsupported image type '" + path.string() + "'");
}

// Writes an (H, W, 1) tensor in [0,1] as an 8-bit grayscale PNG.
inline void write_png_gray(const std::filesystem::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(2) != 1) {
    throw ShapeError("write_png_gray expects (H,W,1), got " + shape_str(image.shape()));
  }
  std::vector<png_byte> buf(image.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const float v = std::clamp(image[i], 0.f, 1.f);
    buf[i] = static_cast<png_byte>(std::lround(v * 255.f));
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.dim(1));
  img.height = static_cast<png_uint_32>(image.dim(0));
  img.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw DataError("cannot write '" + path.string() + "': " + img.message);
  }
}

}  // namespace castnet
