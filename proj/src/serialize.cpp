#include "fogdetr/serialize.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace fogdetr {

namespace {

template <typename U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> bytes{};
  is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!is) throw IoError("truncated tensor stream");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Shape& shape, std::span<const double> data) {
  if (shape_size(shape) != static_cast<Index>(data.size())) {
    throw DimensionError("write_tensor: shape " + shape_string(shape) + " vs " +
                         std::to_string(data.size()) + " values");
  }
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) {
    if (d < 0 || d > std::numeric_limits<std::uint32_t>::max()) {
      throw DimensionError("write_tensor: dimension out of u32 range");
    }
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  }
  for (double v : data) put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw IoError("tensor write failed");
}

void write_tensor(std::ostream& os, const Tensor& t) { write_tensor(os, t.shape(), t.data()); }

Tensor read_tensor(std::istream& is) {
  const auto rank = get_le<std::uint32_t>(is);
  if (rank > 16) throw IoError("tensor stream has implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_le<std::uint32_t>(is);
  std::vector<double> data(static_cast<std::size_t>(shape_size(shape)));
  for (auto& v : data) v = std::bit_cast<double>(get_le<std::uint64_t>(is));
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace fogdetr
