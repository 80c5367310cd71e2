#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace subseg::npz {

/// Error for unreadable or schema-violating archives.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One named array: numpy dtype string, shape, little-endian payload.
struct Array {
  std::string dtype;
  std::vector<long> shape;
  std::vector<unsigned char> raw;

  long numel() const {
    long n = 1;
    for (long d : shape) n *= d;
    return n;
  }
  long itemsize() const;

  static Array from_doubles(std::vector<long> shape, const std::vector<double>& v);
  static Array from_bytes(std::vector<long> shape, const std::vector<uint8_t>& v);
  std::vector<double> as_doubles() const;  // converts any supported numeric dtype
  std::vector<uint8_t> as_bytes() const;   // requires |u1 / |i1
};

using Archive = std::map<std::string, Array>;

/// Writes a .npz archive (zip of .npy members, deflate-compressed).
void save(const std::string& path, const Archive& arrays);

/// Reads a .npz archive. Throws FormatError on malformed input.
Archive load(const std::string& path);

}  // namespace subseg::npz
