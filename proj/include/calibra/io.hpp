#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "calibra/tensor.hpp"

namespace calibra {

// Little-endian binary primitives shared by all file formats.
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_magic(std::ostream& os, const char magic[4]);
void write_string(std::ostream& os, const std::string& s);

// Readers throw std::runtime_error mentioning `context` on short reads.
std::uint32_t read_u32(std::istream& is, const std::string& context);
std::uint64_t read_u64(std::istream& is, const std::string& context);
double read_f64(std::istream& is, const std::string& context);
void read_magic(std::istream& is, const char expected[4], const std::string& context);
std::string read_string(std::istream& is, const std::string& context);

// Tensor file format, used repo-wide (also embedded in checkpoint and dataset
// files): magic "CALT", version u32, rank u32, dims u64 each, then row-major
// 64-bit little-endian reals.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is, const std::string& context);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace calibra
