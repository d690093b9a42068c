#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "fuseseg/tensor.hpp"

namespace fuseseg {

/// On-disk element type of a tensor record.
enum class DType : std::uint8_t { f64 = 1, f32 = 2 };

// Tensor record layout (little-endian):
//   "FTNS" | u32 version=1 | u32 rank | rank x u64 dims | u8 dtype | row-major payload

void write_tensor(std::ostream& os, const Tensor& t, DType dtype = DType::f64);
/// Reads one record. f32 payloads are widened to f64.
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::f64);
/// Reads a file holding exactly one record; trailing bytes are a format error.
Tensor load_tensor(const std::filesystem::path& path);

namespace io {

// Little-endian primitives shared by the checkpoint and dataset formats.
void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);

}  // namespace io

}  // namespace fuseseg
