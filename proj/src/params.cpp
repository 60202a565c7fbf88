#include "calibra/params.hpp"

#include <cstring>
#include <stdexcept>

namespace calibra {

void ParameterSet::add(std::string name, Tensor t) {
    if (index_of(name) >= 0) {
        throw std::invalid_argument("duplicate parameter name: " + name);
    }
    t.requires_grad = !frozen;
    names.push_back(std::move(name));
    tensors.push_back(std::move(t));
}

std::int64_t ParameterSet::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] == name) return static_cast<std::int64_t>(i);
    }
    return -1;
}

const Tensor& ParameterSet::at(const std::string& name) const {
    std::int64_t i = index_of(name);
    if (i < 0) throw std::invalid_argument("unknown parameter: " + name);
    return tensors[static_cast<std::size_t>(i)];
}

Tensor& ParameterSet::at(const std::string& name) {
    std::int64_t i = index_of(name);
    if (i < 0) throw std::invalid_argument("unknown parameter: " + name);
    return tensors[static_cast<std::size_t>(i)];
}

std::int64_t ParameterSet::total_count() const {
    std::int64_t n = 0;
    for (const Tensor& t : tensors) n += t.numel();
    return n;
}

void ParameterSet::freeze() {
    frozen = true;
    for (Tensor& t : tensors) t.requires_grad = false;
}

std::uint64_t ParameterSet::content_hash() const {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a offset basis
    auto mix = [&h](const void* p, std::size_t len) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        mix(names[i].data(), names[i].size());
        const Tensor& t = tensors[i];
        for (std::int64_t d : t.shape) mix(&d, sizeof(d));
        if (!t.data.empty()) mix(t.data.data(), t.data.size() * sizeof(double));
    }
    return h;
}

}  // namespace calibra
