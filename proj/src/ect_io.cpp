#include "echodx/ect_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace echodx {

namespace binary {

void put_u32(std::ostream& out, std::uint32_t value) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
  out.write(bytes, 4);
}

void put_f32(std::ostream& out, float value) { put_u32(out, std::bit_cast<std::uint32_t>(value)); }

void put_bytes(std::ostream& out, const std::string& bytes) {
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string get_bytes(std::istream& in, std::size_t count, const char* what) {
  std::string bytes(count, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(in.gcount()) != count)
    throw TruncatedError(std::string("truncated while reading ") + what);
  return bytes;
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  const auto bytes = get_bytes(in, 4, what);
  std::uint32_t value = 0;
  for (int i = 0; i < 4; ++i)
    value |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  return value;
}

std::uint8_t get_u8(std::istream& in, const char* what) {
  return static_cast<std::uint8_t>(get_bytes(in, 1, what)[0]);
}

}  // namespace binary

namespace {

constexpr char kMagic[4] = {'E', 'C', 'T', '1'};

}  // namespace

void write_ect(std::ostream& out, const Tensor& tensor) {
  if (tensor.empty()) throw ShapeError("cannot serialize an empty tensor");
  out.write(kMagic, 4);
  out.put(static_cast<char>(tensor.rank()));
  for (auto extent : tensor.shape()) binary::put_u32(out, static_cast<std::uint32_t>(extent));
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(tensor.ptr()),
              static_cast<std::streamsize>(tensor.size() * sizeof(float)));
  } else {
    for (float v : tensor.data()) binary::put_f32(out, v);
  }
}

Tensor read_ect(std::istream& in) {
  const auto magic = binary::get_bytes(in, 4, "ect magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw BadMagicError("not an ECT1 tensor");
  const auto rank = binary::get_u8(in, "ect rank");
  if (rank == 0 || rank > 5) throw IoError("ect rank out of range: " + std::to_string(rank));
  Shape shape(rank);
  for (auto& extent : shape) extent = binary::get_u32(in, "ect extents");
  const auto count = shape_size(shape);
  auto payload = binary::get_bytes(in, count * sizeof(float), "ect payload");
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[4 * i + b])) << (8 * b);
    data[i] = std::bit_cast<float>(bits);
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_ect(const std::filesystem::path& path, const Tensor& tensor) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  write_ect(out, tensor);
  if (!out) throw IoError("write failed: " + path.string());
}

Tensor load_ect(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  return read_ect(in);
}

}  // namespace echodx
