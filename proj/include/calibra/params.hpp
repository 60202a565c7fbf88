#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "calibra/tensor.hpp"

namespace calibra {

// Named, ordered collection of trainable tensors. Order is the registration
// order and is what optimizer state and checkpoints align with.
struct ParameterSet {
    std::vector<std::string> names;
    std::vector<Tensor> tensors;
    bool frozen = false;

    std::size_t size() const { return tensors.size(); }

    void add(std::string name, Tensor t);

    // Index of `name`, or -1 if absent.
    std::int64_t index_of(const std::string& name) const;

    // Throws std::invalid_argument on unknown names.
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);

    std::int64_t total_count() const;

    // Marks every tensor as non-trainable; adam_step refuses frozen sets.
    void freeze();

    // FNV-1a over all names and raw tensor bytes; changes iff any value does.
    std::uint64_t content_hash() const;
};

}  // namespace calibra
