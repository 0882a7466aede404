#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace osuda {

// Decoded 8-bit image, interleaved HWC.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};

// Decodes PNG or JPEG (chosen by signature). Gray, palette and alpha inputs
// are converted to 3-channel RGB. Throws ValidationError naming the file on
// failure.
Image read_image(const std::filesystem::path& path);

// Reads only the header and reports whether the file is a decodable PNG/JPEG.
bool probe_image(const std::filesystem::path& path);

// Writes an 8-bit RGB PNG; output bytes depend only on the pixels.
void write_png(const std::filesystem::path& path, const Image& image);

}  // namespace osuda
