#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "calibra/tensor.hpp"

namespace calibra {

// Handle into a Tape. Valid only for the tape that produced it.
struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

enum class OpKind : std::uint8_t {
    leaf,
    conv2d,
    bias_add,
    linear,
    relu,
    tanh,
    upsample2,
    max_pool2,
    add,
    scalar_mul,
    clamp,
    reshape,
    softmax,
    cross_entropy,
    sum,
    mean,
    weighted_sum,
    patch_gather,
};

// Randomly located patch plus a spatial permutation, applied identically to
// every channel. Produced by data::make_patch_plan, consumed by
// Tape::patch_gather and data::sample_patch_and_shuffle.
struct PatchPlan {
    int patch = 0;                      // patch side length
    int row0 = 0, col0 = 0;             // top-left corner
    std::vector<std::int32_t> perm;     // permutation of the patch*patch positions
};

// Define-by-run reverse-mode differentiation tape. Rebuilt per forward pass;
// confined to a single thread. Node order is topological by construction:
// every node's inputs are created before it.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaves. `leaf` honours t.requires_grad, `constant` never requires grad.
    Var leaf(Tensor t);
    Var leaf(Tensor t, bool requires_grad);
    Var constant(Tensor t);

    const Tensor& value(Var v) const;
    // Gradient of the last backward() pass; zeros for tensors the loss never
    // reached.
    Tensor grad(Var v) const;
    bool requires_grad(Var v) const;

    std::size_t size() const { return nodes_.size(); }

    // ---- differentiable ops ----
    // Cross-correlation, NCHW input against OIKK kernel.
    Var conv2d(Var input, Var kernel, int stride, int padding);
    Var bias_add(Var input, Var bias);          // NCHW + [C]
    Var linear(Var input, Var weight, Var bias);  // [B,I] x [I,O] + [O]
    Var relu(Var x);
    Var tanh(Var x);
    Var upsample2_nearest(Var x);               // NCHW -> N,C,2H,2W
    Var max_pool2(Var x);                       // 2x2 window, stride 2
    Var add(Var a, Var b);                      // same shape
    Var scalar_mul(Var x, double s);
    Var clamp(Var x, double lo, double hi);
    Var reshape(Var x, std::vector<std::int64_t> new_shape);
    Var softmax(Var x);                         // over last axis
    Var cross_entropy(Var logits, std::span<const int> target_classes);  // scalar mean
    Var sum(Var x);                             // scalar
    Var mean(Var x);                            // scalar
    Var weighted_sum(Var x, Tensor weights);    // scalar dot with constant weights
    Var patch_gather(Var images, std::vector<PatchPlan> plans);  // NCHW -> [N, C*P*P]

    // Reverse sweep from a scalar loss. Throws on non-scalar loss.
    void backward(Var loss);

private:
    struct Node {
        OpKind kind = OpKind::leaf;
        Tensor value;
        Tensor grad;  // empty until touched by backward
        bool needs_grad = false;
        std::function<void(Tape&, const Node&)> backward_fn;
    };

    // Deque keeps Tensor references returned by value() stable across
    // subsequent op calls.
    std::deque<Node> nodes_;

    const Node& node(Var v) const;
    Var push(OpKind kind, Tensor value, bool needs_grad,
             std::function<void(Tape&, const Node&)> backward_fn);
    void accumulate(std::int32_t id, const Tensor& g);
    Tensor& grad_buf(std::int32_t id);
    friend struct TapeAccess;
};

}  // namespace calibra
