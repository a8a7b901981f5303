#include "biaslens/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "biaslens/common.hpp"

namespace biaslens {

void write_pgm_bytes(const std::filesystem::path& path, int width, int height,
                     const std::vector<unsigned char>& bytes) {
  if (bytes.size() != static_cast<std::size_t>(width) * height) {
    throw std::invalid_argument("write_pgm_bytes: size mismatch");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot open " + path.string() + " for writing");
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RuntimeFailure("short write to " + path.string());
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  std::vector<unsigned char> bytes(image.pixels.size());
  std::transform(image.pixels.begin(), image.pixels.end(), bytes.begin(), [](double v) {
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  });
  write_pgm_bytes(path, image.width, image.height, bytes);
}

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open image " + path.string());
  if (header_token(in) != "P5") throw ValidationError(path.string() + ": not a binary PGM (P5)");
  const int w = std::stoi(header_token(in));
  const int h = std::stoi(header_token(in));
  const int maxval = std::stoi(header_token(in));
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw ValidationError(path.string() + ": unsupported PGM header");
  }
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw ValidationError(path.string() + ": truncated pixel data");
  }
  GrayImage img(w, h);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / static_cast<double>(maxval);
  return img;
}

}  // namespace biaslens
