#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "echodx/tensor.hpp"

namespace echodx {

/// Raised when a binary file does not start with the expected magic bytes.
class BadMagicError : public IoError {
 public:
  using IoError::IoError;
};

/// Raised when a binary file ends before its declared payload.
class TruncatedError : public IoError {
 public:
  using IoError::IoError;
};

// `.ect` tensor container:
//   "ECT1" | u8 rank | rank x u32 LE extents | f32 LE payload (row-major)
void write_ect(std::ostream& out, const Tensor& tensor);
Tensor read_ect(std::istream& in);

void save_ect(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_ect(const std::filesystem::path& path);

namespace binary {

void put_u32(std::ostream& out, std::uint32_t value);
void put_f32(std::ostream& out, float value);
void put_bytes(std::ostream& out, const std::string& bytes);
std::uint32_t get_u32(std::istream& in, const char* what);
std::uint8_t get_u8(std::istream& in, const char* what);
std::string get_bytes(std::istream& in, std::size_t count, const char* what);

}  // namespace binary

}  // namespace echodx
