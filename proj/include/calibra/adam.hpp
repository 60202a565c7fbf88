#pragma once

#include <cstdint>
#include <vector>

#include "calibra/params.hpp"
#include "calibra/tensor.hpp"

namespace calibra {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First/second moment buffers, one pair per parameter tensor, in parameter
// order. step_count is the number of updates applied so far.
struct AdamState {
    AdamConfig config;
    std::int64_t step_count = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
};

AdamState make_adam_state(const ParameterSet& params, AdamConfig config = {});

// One bias-corrected update in place. `grads` must align with params
// (same count, same shapes). Throws std::logic_error if params.frozen.
void adam_step(ParameterSet& params, AdamState& state, const std::vector<Tensor>& grads);

}  // namespace calibra
