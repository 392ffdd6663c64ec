#pragma once

// 8-bit image files <-> CHW tensors in [-1, 1].
//
// Pixel value k maps to k / 127.5 - 1. On write, (v + 1) * 127.5 is rounded
// half away from zero and clamped to [0, 255], so every 8-bit value survives a
// load/store round trip unchanged.

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>
#include <torch/torch.h>

#include "lcmsr/error.hpp"
#include "lcmsr/tensor_ops.hpp"

namespace lcmsr {

// Interleaved HWC 8-bit pixels.
struct Image8 {
  std::int64_t channels = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> data;
};

inline std::uint8_t quantize_unit(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::round((v + 1.0) * 127.5), 0.0, 255.0));
}

namespace detail {

inline Image8 read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 out{gray ? 1 : 3, static_cast<std::int64_t>(img.height), static_cast<std::int64_t>(img.width), {}};
  out.data.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.data.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

inline Image8 read_jpeg(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!file) throw IoError("cannot open " + path.string());
  Image8 out;
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("cannot decode JPEG " + path.string() + ": " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.channels = cinfo.output_components;
  out.height = cinfo.output_height;
  out.width = cinfo.output_width;
  out.data.resize(static_cast<std::size_t>(out.channels * out.height * out.width));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.data.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * out.channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

}  // namespace detail

inline bool is_image_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

inline Image8 read_image(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return detail::read_png(path);
  if (ext == ".jpg" || ext == ".jpeg") return detail::read_jpeg(path);
  throw IoError("unsupported image type: " + path.string());
}

inline void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw IoError("PNG writer supports 1 or 3 channels");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.data.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

// CHW float tensor in [-1, 1]; gray/RGB converted to the requested channel count.
inline torch::Tensor to_tensor(const Image8& image, std::int64_t channels) {
  auto hwc = torch::from_blob(const_cast<std::uint8_t*>(image.data.data()),
                              {image.height, image.width, image.channels}, torch::kUInt8)
                 .to(torch::kFloat64);
  auto chw = hwc.permute({2, 0, 1}) / 127.5 - 1.0;
  if (image.channels == channels) return chw.to(torch::kFloat32).contiguous();
  if (image.channels == 1 && channels == 3) return chw.expand({3, -1, -1}).to(torch::kFloat32).contiguous();
  if (image.channels == 3 && channels == 1) {
    auto y = 0.299 * chw[0] + 0.587 * chw[1] + 0.114 * chw[2];
    return y.unsqueeze(0).to(torch::kFloat32).contiguous();
  }
  throw ShapeError("cannot convert " + std::to_string(image.channels) + "-channel image to " +
                   std::to_string(channels) + " channels");
}

inline Image8 from_tensor(const torch::Tensor& chw) {
  if (chw.dim() != 3) throw ShapeError("expected CHW tensor, got " + shape_str(chw));
  auto hwc = chw.detach().to(torch::kFloat64).permute({1, 2, 0}).contiguous();
  Image8 out{chw.size(0), chw.size(1), chw.size(2), {}};
  out.data.resize(static_cast<std::size_t>(hwc.numel()));
  const double* src = hwc.data_ptr<double>();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = quantize_unit(src[i]);
  return out;
}

// Snaps a [-1, 1] tensor onto the 8-bit grid that a PNG write would produce.
inline torch::Tensor quantize_8bit(const torch::Tensor& x) {
  auto v = (x.detach().to(torch::kFloat64) + 1.0) * 127.5;
  v = torch::sign(v) * torch::floor(v.abs() + 0.5);  // half away from zero
  return (v.clamp(0.0, 255.0) / 127.5 - 1.0).to(x.scalar_type());
}

inline torch::Tensor load_image(const std::filesystem::path& path, std::int64_t channels) {
  return to_tensor(read_image(path), channels);
}

inline void save_image(const std::filesystem::path& path, const torch::Tensor& chw) {
  write_png(path, from_tensor(chw));
}

}  // namespace lcmsr
