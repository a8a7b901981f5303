#pragma once

#include <filesystem>
#include <vector>

namespace biaslens {

// Grayscale image, row-major, intensities nominally in [0, 1].
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, double fill = 0.0) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const GrayImage&) const = default;
};

// Binary PGM (P5), 8-bit. Pixels are clamped to [0,1] and scaled by 255.
void write_pgm(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_pgm(const std::filesystem::path& path);

// Raw 8-bit variant used for heatmaps where bytes are computed by the caller.
void write_pgm_bytes(const std::filesystem::path& path, int width, int height,
                     const std::vector<unsigned char>& bytes);

}  // namespace biaslens
