#pragma once

// PNG/JPEG readers and a PNG writer over the system codecs. 8-bit RGB is the
// wire format; in memory everything is [-1, 1] doubles (or floats), with
// byte b mapping to (b-127.5)/127.5 — the correctly rounded (2b-255)/255 —
// so 0 -> -1 and 255 -> +1 exactly.

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <jpeglib.h>

#include "tuigan/common.hpp"
#include "tuigan/image.hpp"

namespace tuigan {

namespace detail {

struct JpegErrorTrap {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char msg[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* trap = reinterpret_cast<JpegErrorTrap*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, trap->msg);
  std::longjmp(trap->jump, 1);
}

template <class T>
Image<T> rgb_bytes_to_image(const unsigned char* rgb, std::int64_t h, std::int64_t w) {
  T lut[256];
  for (int b = 0; b < 256; ++b)
    lut[b] = (static_cast<T>(b) - T(127.5)) / T(127.5);
  Image<T> img;
  img.h = h;
  img.w = w;
  img.data.resize(static_cast<std::size_t>(3 * h * w));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.data[(c * h + y) * w + x] = lut[rgb[(y * w + x) * 3 + c]];
  return img;
}

template <class T>
std::vector<unsigned char> image_to_rgb_bytes(const Image<T>& img) {
  std::vector<unsigned char> rgb(static_cast<std::size_t>(3 * img.h * img.w));
  for (std::int64_t y = 0; y < img.h; ++y)
    for (std::int64_t x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) {
        T v = std::clamp(img.data[(c * img.h + y) * img.w + x], T(-1), T(1));
        T q = std::floor((v + T(1)) / T(2) * T(255) + T(0.5));
        rgb[(y * img.w + x) * 3 + c] =
            static_cast<unsigned char>(std::clamp<T>(q, T(0), T(255)));
      }
  return rgb;
}

template <class T>
Image<T> load_png(const std::string& path) {
  png_image pimg;
  std::memset(&pimg, 0, sizeof(pimg));
  pimg.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pimg, path.c_str())) {
    std::string msg = pimg.message;
    png_image_free(&pimg);
    throw FormatError("failed to read PNG '" + path + "': " + msg);
  }
  pimg.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(pimg));
  if (!png_image_finish_read(&pimg, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = pimg.message;
    png_image_free(&pimg);
    throw FormatError("failed to decode PNG '" + path + "': " + msg);
  }
  auto img = rgb_bytes_to_image<T>(buf.data(), pimg.height, pimg.width);
  png_image_free(&pimg);
  return img;
}

template <class T>
Image<T> load_jpeg(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open '" + path + "'");

  jpeg_decompress_struct cinfo;
  JpegErrorTrap trap;
  cinfo.err = jpeg_std_error(&trap.pub);
  trap.pub.error_exit = jpeg_error_exit;
  std::vector<unsigned char> rgb;

  if (setjmp(trap.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(f);
    throw FormatError("failed to decode JPEG '" + path + "': " + trap.msg);
  }

  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);

  const std::int64_t w = cinfo.output_width;
  const std::int64_t h = cinfo.output_height;
  rgb.resize(static_cast<std::size_t>(3 * h * w));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(f);
  return rgb_bytes_to_image<T>(rgb.data(), h, w);
}

}  // namespace detail

// Dispatches on file magic, not extension. PNG and JPEG are accepted.
template <class T>
Image<T> load_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  unsigned char magic[8] = {0};
  in.read(reinterpret_cast<char*>(magic), 8);
  if (in.gcount() < 3) throw FormatError("'" + path + "' is too short to be an image");
  in.close();

  static const unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (std::equal(png_sig, png_sig + 8, magic)) return detail::load_png<T>(path);
  if (magic[0] == 0xff && magic[1] == 0xd8 && magic[2] == 0xff)
    return detail::load_jpeg<T>(path);
  throw FormatError("'" + path + "' is neither PNG nor JPEG");
}

// PNG only. Quantization is round-half-up to 8 bits, so a loaded image saves
// back to identical bytes.
template <class T>
void save_image(const Image<T>& img, const std::string& path) {
  validate_image(img, "save_image");
  auto rgb = detail::image_to_rgb_bytes(img);
  png_image pimg;
  std::memset(&pimg, 0, sizeof(pimg));
  pimg.version = PNG_IMAGE_VERSION;
  pimg.width = static_cast<png_uint_32>(img.w);
  pimg.height = static_cast<png_uint_32>(img.h);
  pimg.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pimg, path.c_str(), 0, rgb.data(), 0, nullptr)) {
    std::string msg = pimg.message;
    png_image_free(&pimg);
    throw IoError("failed to write PNG '" + path + "': " + msg);
  }
  png_image_free(&pimg);
}

}  // namespace tuigan
