#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace prunecam::png_io {

struct Rgb8Image {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> pixels;  // H*W*3 interleaved
};

// 8-bit RGB only; deterministic byte output for fixed input.
void write_rgb8(const std::filesystem::path& path, const Rgb8Image& img);
Rgb8Image read_rgb8(const std::filesystem::path& path);

}  // namespace prunecam::png_io
