#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>

#include "fogdetr/tensor.hpp"

namespace fogdetr {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flat tensor layout: little-endian u32 rank, rank x u32 dims, then the
// row-major f64 payload.
void write_tensor(std::ostream& os, const Shape& shape, std::span<const double> data);
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace fogdetr
