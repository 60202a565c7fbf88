#include "calibra/adam.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace calibra {

AdamState make_adam_state(const ParameterSet& params, AdamConfig config) {
    if (!(config.lr >= 0.0)) throw std::invalid_argument("adam: lr must be >= 0");
    if (!(config.beta1 >= 0.0 && config.beta1 < 1.0) ||
        !(config.beta2 >= 0.0 && config.beta2 < 1.0)) {
        throw std::invalid_argument("adam: betas must lie in [0, 1)");
    }
    AdamState s;
    s.config = config;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const Tensor& t : params.tensors) {
        s.m.push_back(Tensor::zeros(t.shape));
        s.v.push_back(Tensor::zeros(t.shape));
    }
    return s;
}

void adam_step(ParameterSet& params, AdamState& state, const std::vector<Tensor>& grads) {
    if (params.frozen) {
        throw std::logic_error("adam_step: parameter set is frozen");
    }
    if (grads.size() != params.size() || state.m.size() != params.size()) {
        throw std::invalid_argument("adam_step: got " + std::to_string(grads.size()) +
                                    " gradients and state for " + std::to_string(state.m.size()) +
                                    " tensors, expected " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!grads[i].same_shape(params.tensors[i])) {
            throw std::invalid_argument("adam_step: gradient shape " + shape_str(grads[i].shape) +
                                        " does not match parameter '" + params.names[i] + "' shape " +
                                        shape_str(params.tensors[i].shape));
        }
    }
    state.step_count += 1;
    const double b1 = state.config.beta1;
    const double b2 = state.config.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
        double* p = params.tensors[i].data.data();
        double* m = state.m[i].data.data();
        double* v = state.v[i].data.data();
        const double* g = grads[i].data.data();
        const std::size_t n = params.tensors[i].data.size();
        for (std::size_t j = 0; j < n; ++j) {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= state.config.lr * mhat / (std::sqrt(vhat) + state.config.eps);
        }
    }
}

}  // namespace calibra
