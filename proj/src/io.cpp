#include "calibra/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace calibra {

static void write_bytes_le(std::ostream& os, const unsigned char* p, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
    } else {
        for (std::size_t i = n; i-- > 0;) os.put(static_cast<char>(p[i]));
    }
}

static void read_bytes_le(std::istream& is, unsigned char* p, std::size_t n, const std::string& context) {
    char buf[16];
    if (!is.read(buf, static_cast<std::streamsize>(n))) {
        throw std::runtime_error("corrupt or truncated file while reading " + context);
    }
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(p, buf, n);
    } else {
        for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<unsigned char>(buf[n - 1 - i]);
    }
}

void write_u32(std::ostream& os, std::uint32_t v) {
    write_bytes_le(os, reinterpret_cast<const unsigned char*>(&v), 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
    write_bytes_le(os, reinterpret_cast<const unsigned char*>(&v), 8);
}

void write_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(os, bits);
}

void write_magic(std::ostream& os, const char magic[4]) { os.write(magic, 4); }

void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is, const std::string& context) {
    std::uint32_t v;
    read_bytes_le(is, reinterpret_cast<unsigned char*>(&v), 4, context);
    return v;
}

std::uint64_t read_u64(std::istream& is, const std::string& context) {
    std::uint64_t v;
    read_bytes_le(is, reinterpret_cast<unsigned char*>(&v), 8, context);
    return v;
}

double read_f64(std::istream& is, const std::string& context) {
    std::uint64_t bits = read_u64(is, context);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

void read_magic(std::istream& is, const char expected[4], const std::string& context) {
    char got[4];
    if (!is.read(got, 4)) {
        throw std::runtime_error("corrupt or truncated file while reading " + context + " magic");
    }
    if (std::memcmp(got, expected, 4) != 0) {
        throw std::runtime_error("bad magic in " + context + ": expected \"" +
                                 std::string(expected, 4) + "\", found \"" + std::string(got, 4) + "\"");
    }
}

std::string read_string(std::istream& is, const std::string& context) {
    std::uint32_t n = read_u32(is, context);
    std::string s(n, '\0');
    if (n > 0 && !is.read(s.data(), n)) {
        throw std::runtime_error("corrupt or truncated file while reading " + context);
    }
    return s;
}

void write_tensor(std::ostream& os, const Tensor& t) {
    write_magic(os, "CALT");
    write_u32(os, kTensorFormatVersion);
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::int64_t d : t.shape) write_u64(os, static_cast<std::uint64_t>(d));
    for (double v : t.data) write_f64(os, v);
}

Tensor read_tensor(std::istream& is, const std::string& context) {
    read_magic(is, "CALT", context);
    std::uint32_t version = read_u32(is, context + " version");
    if (version != kTensorFormatVersion) {
        throw std::runtime_error("unsupported tensor format version " + std::to_string(version) +
                                 " in " + context);
    }
    std::uint32_t rank = read_u32(is, context + " rank");
    if (rank > 8) {
        throw std::runtime_error("implausible tensor rank " + std::to_string(rank) + " in " + context);
    }
    std::vector<std::int64_t> shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<std::int64_t>(read_u64(is, context + " dims"));
        if (shape[i] <= 0 || shape[i] > (1LL << 32)) {
            throw std::runtime_error("implausible tensor dim in " + context);
        }
    }
    std::int64_t n = numel(shape);
    std::vector<double> data(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) data[static_cast<std::size_t>(i)] = read_f64(is, context + " data");
    return Tensor::from_data(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    write_tensor(os, t);
    if (!os) throw std::runtime_error("write failed for " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return read_tensor(is, path);
}

}  // namespace calibra
