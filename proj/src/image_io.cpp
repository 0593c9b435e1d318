#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "fogdetr/dataset.hpp"

namespace fogdetr {

std::string encode_ppm(const Image& image) {
  std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::string out = header;
  out.reserve(header.size() + static_cast<std::size_t>(image.pixels.size()));
  for (Index i = 0; i < image.pixels.size(); ++i) {
    const double v = std::clamp(image.pixels.data()[i], 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  return out;
}

Image decode_ppm(std::string_view bytes) {
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return std::string(bytes.substr(start, pos - start));
  };
  if (next_token() != "P6") throw IoError("not a binary PPM (P6) image");
  Index width = 0, height = 0, maxval = 0;
  try {
    width = std::stol(next_token());
    height = std::stol(next_token());
    maxval = std::stol(next_token());
  } catch (const std::exception&) {
    throw IoError("malformed PPM header");
  }
  if (maxval != 255 || width <= 0 || height <= 0) throw IoError("unsupported PPM dimensions or depth");
  ++pos;  // single whitespace after maxval
  const auto expected = static_cast<std::size_t>(width * height * 3);
  if (bytes.size() < pos + expected) throw IoError("truncated PPM payload");
  Image image(height, width);
  for (std::size_t i = 0; i < expected; ++i) {
    image.pixels.data()[i] = static_cast<unsigned char>(bytes[pos + i]) / 255.0;
  }
  return image;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_ppm(image);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_ppm(bytes);
}

void write_depth(const std::filesystem::path& path, const DepthMap& depth) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, Shape{depth.height, depth.width},
               std::span<const double>(depth.depth.data(), static_cast<std::size_t>(depth.depth.size())));
}

DepthMap read_depth(const std::filesystem::path& path) {
  Tensor t = load_tensor(path);
  if (t.rank() != 2) throw IoError("depth map " + path.string() + " is not rank 2");
  DepthMap d(t.shape()[0], t.shape()[1]);
  std::copy(t.data().begin(), t.data().end(), d.depth.data());
  if ((d.depth < 0).any()) throw IoError("depth map " + path.string() + " has negative depth");
  return d;
}

}  // namespace fogdetr
