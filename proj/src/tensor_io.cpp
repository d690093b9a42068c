#include "fuseseg/tensor_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace fuseseg {

namespace {

constexpr std::array<char, 4> kMagic{'F', 'T', 'N', 'S'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxRank = 8;

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  os.write(bytes.data(), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  std::array<char, sizeof(T)> bytes;
  if (!is.read(bytes.data(), sizeof(T))) throw FormatError("unexpected end of stream");
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  T v;
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

}  // namespace

namespace io {

void write_u8(std::ostream& os, std::uint8_t v) { write_le(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
void write_f64(std::ostream& os, double v) { write_le(os, v); }
std::uint8_t read_u8(std::istream& is) { return read_le<std::uint8_t>(is); }
std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }
double read_f64(std::istream& is) { return read_le<double>(is); }

}  // namespace io

void write_tensor(std::ostream& os, const Tensor& t, DType dtype) {
  os.write(kMagic.data(), kMagic.size());
  write_le<std::uint32_t>(os, kVersion);
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) write_le<std::uint64_t>(os, d);
  write_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
  if (dtype == DType::f64) {
    for (double v : t.values()) write_le(os, v);
  } else {
    for (double v : t.values()) write_le(os, static_cast<float>(v));
  }
  if (!os) throw std::runtime_error("failed writing tensor record");
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw FormatError("bad tensor magic (expected FTNS)");
  }
  const auto version = read_le<std::uint32_t>(is);
  if (version != kVersion) {
    throw FormatError("unsupported tensor version " + std::to_string(version));
  }
  const auto rank = read_le<std::uint32_t>(is);
  if (rank > kMaxRank) throw FormatError("tensor rank " + std::to_string(rank) + " too large");
  Shape shape(rank);
  std::uint64_t count = 1;
  for (auto& d : shape) {
    const auto dim = read_le<std::uint64_t>(is);
    if (dim != 0 && count > std::numeric_limits<std::uint32_t>::max() / dim) {
      throw FormatError("tensor dims overflow");
    }
    d = static_cast<std::size_t>(dim);
    count *= dim;
  }
  const auto code = read_le<std::uint8_t>(is);
  std::vector<double> values(count);
  if (code == static_cast<std::uint8_t>(DType::f64)) {
    for (auto& v : values) v = read_le<double>(is);
  } else if (code == static_cast<std::uint8_t>(DType::f32)) {
    for (auto& v : values) v = static_cast<double>(read_le<float>(is));
  } else {
    throw FormatError("unknown tensor dtype code " + std::to_string(code));
  }
  return Tensor::from_values(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_tensor(os, t, dtype);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  try {
    auto t = read_tensor(is);
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes");
    return t;
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace fuseseg
