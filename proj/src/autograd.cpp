#include "calibra/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace calibra {

// ---------------------------------------------------------------------------
// tape plumbing
// ---------------------------------------------------------------------------

const Tape::Node& Tape::node(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
        throw std::invalid_argument("invalid tape variable id " + std::to_string(v.id));
    }
    return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::push(OpKind kind, Tensor value, bool needs_grad,
               std::function<void(Tape&, const Node&)> backward_fn) {
    Node n;
    n.kind = kind;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.backward_fn = std::move(backward_fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor t) {
    bool rg = t.requires_grad;
    return push(OpKind::leaf, std::move(t), rg, nullptr);
}

Var Tape::leaf(Tensor t, bool requires_grad) {
    return push(OpKind::leaf, std::move(t), requires_grad, nullptr);
}

Var Tape::constant(Tensor t) { return push(OpKind::leaf, std::move(t), false, nullptr); }

const Tensor& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).needs_grad; }

Tensor Tape::grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.data.empty()) return Tensor::zeros(n.value.shape);
    return n.grad;
}

Tensor& Tape::grad_buf(std::int32_t id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
}

void Tape::accumulate(std::int32_t id, const Tensor& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    Tensor& buf = grad_buf(id);
    for (std::size_t i = 0; i < buf.data.size(); ++i) buf.data[i] += g.data[i];
}

void Tape::backward(Var loss) {
    const Node& ln = node(loss);
    if (ln.value.numel() != 1) {
        throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                    shape_str(ln.value.shape));
    }
    if (!ln.needs_grad) return;  // loss detached from every grad-requiring leaf
    grad_buf(loss.id).data[0] = 1.0;
    for (std::int32_t i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.needs_grad || n.grad.data.empty() || !n.backward_fn) continue;
        n.backward_fn(*this, n);
    }
}

// ---------------------------------------------------------------------------
// op helpers
// ---------------------------------------------------------------------------

namespace {

void require_rank(const Tensor& t, int rank, const char* op, const char* arg) {
    if (t.rank() != rank) {
        throw std::invalid_argument(std::string(op) + ": " + arg + " must have rank " +
                                    std::to_string(rank) + ", got shape " + shape_str(t.shape));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch: " + shape_str(a.shape) +
                                    " vs " + shape_str(b.shape));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    std::int64_t n, ci, h, w, co, k, oh, ow;
    int stride, pad;
};

ConvDims conv_dims(const Tensor& in, const Tensor& kernel, int stride, int padding) {
    require_rank(in, 4, "conv2d", "input");
    require_rank(kernel, 4, "conv2d", "kernel");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
    if (kernel.shape[2] != kernel.shape[3]) {
        throw std::invalid_argument("conv2d: kernel must be square, got " + shape_str(kernel.shape));
    }
    if (in.shape[1] != kernel.shape[1]) {
        throw std::invalid_argument("conv2d: channel mismatch: input " + shape_str(in.shape) +
                                    " vs kernel " + shape_str(kernel.shape));
    }
    ConvDims d;
    d.n = in.shape[0];
    d.ci = in.shape[1];
    d.h = in.shape[2];
    d.w = in.shape[3];
    d.co = kernel.shape[0];
    d.k = kernel.shape[2];
    d.stride = stride;
    d.pad = padding;
    d.oh = (d.h + 2 * padding - d.k) / stride + 1;
    d.ow = (d.w + 2 * padding - d.k) / stride + 1;
    if (d.h + 2 * padding < d.k || d.w + 2 * padding < d.k || d.oh < 1 || d.ow < 1) {
        throw std::invalid_argument("conv2d: non-positive output dims for input " +
                                    shape_str(in.shape) + ", kernel " + shape_str(kernel.shape) +
                                    ", stride " + std::to_string(stride) + ", padding " +
                                    std::to_string(padding));
    }
    return d;
}

// Valid output range [lo, hi] such that o*stride + koff - pad stays inside [0, extent).
inline void out_range(std::int64_t koff, int pad, int stride, std::int64_t extent,
                      std::int64_t omax, std::int64_t& lo, std::int64_t& hi) {
    std::int64_t a = pad - koff;
    lo = a <= 0 ? 0 : (a + stride - 1) / stride;
    std::int64_t b = extent - 1 + pad - koff;
    hi = b < 0 ? -1 : std::min(omax - 1, b / stride);
}

void conv2d_forward(const Tensor& in, const Tensor& kernel, const ConvDims& d, Tensor& out) {
    const double* ip = in.data.data();
    const double* kp = kernel.data.data();
    double* op = out.data.data();
    const std::int64_t s = d.stride;
    for (std::int64_t n = 0; n < d.n; ++n) {
        for (std::int64_t co = 0; co < d.co; ++co) {
            double* out_base = op + (n * d.co + co) * d.oh * d.ow;
            for (std::int64_t ci = 0; ci < d.ci; ++ci) {
                const double* in_base = ip + (n * d.ci + ci) * d.h * d.w;
                const double* k_base = kp + (co * d.ci + ci) * d.k * d.k;
                for (std::int64_t kh = 0; kh < d.k; ++kh) {
                    std::int64_t oh_lo, oh_hi;
                    out_range(kh, d.pad, d.stride, d.h, d.oh, oh_lo, oh_hi);
                    for (std::int64_t kw = 0; kw < d.k; ++kw) {
                        const double w = k_base[kh * d.k + kw];
                        if (w == 0.0) continue;
                        std::int64_t ow_lo, ow_hi;
                        out_range(kw, d.pad, d.stride, d.w, d.ow, ow_lo, ow_hi);
                        for (std::int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                            const std::int64_t ih = oh * s + kh - d.pad;
                            const double* in_row = in_base + ih * d.w + (ow_lo * s + kw - d.pad);
                            double* out_row = out_base + oh * d.ow + ow_lo;
                            const std::int64_t len = ow_hi - ow_lo;
                            for (std::int64_t j = 0; j <= len; ++j) out_row[j] += w * in_row[j * s];
                        }
                    }
                }
            }
        }
    }
}

void conv2d_backward(const Tensor& in, const Tensor& kernel, const ConvDims& d, const Tensor& gout,
                     Tensor* gin, Tensor* gkernel) {
    const double* ip = in.data.data();
    const double* kp = kernel.data.data();
    const double* gp = gout.data.data();
    const std::int64_t s = d.stride;
    for (std::int64_t n = 0; n < d.n; ++n) {
        for (std::int64_t co = 0; co < d.co; ++co) {
            const double* g_base = gp + (n * d.co + co) * d.oh * d.ow;
            for (std::int64_t ci = 0; ci < d.ci; ++ci) {
                const double* in_base = ip + (n * d.ci + ci) * d.h * d.w;
                const double* k_base = kp + (co * d.ci + ci) * d.k * d.k;
                double* gin_base = gin ? gin->data.data() + (n * d.ci + ci) * d.h * d.w : nullptr;
                double* gk_base =
                    gkernel ? gkernel->data.data() + (co * d.ci + ci) * d.k * d.k : nullptr;
                for (std::int64_t kh = 0; kh < d.k; ++kh) {
                    std::int64_t oh_lo, oh_hi;
                    out_range(kh, d.pad, d.stride, d.h, d.oh, oh_lo, oh_hi);
                    for (std::int64_t kw = 0; kw < d.k; ++kw) {
                        std::int64_t ow_lo, ow_hi;
                        out_range(kw, d.pad, d.stride, d.w, d.ow, ow_lo, ow_hi);
                        const std::int64_t len = ow_hi - ow_lo;
                        if (len < 0) continue;
                        const double w = k_base[kh * d.k + kw];
                        double acc = 0.0;
                        for (std::int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                            const std::int64_t ih = oh * s + kh - d.pad;
                            const double* g_row = g_base + oh * d.ow + ow_lo;
                            const std::int64_t in_off = ih * d.w + (ow_lo * s + kw - d.pad);
                            if (gin_base) {
                                double* gin_row = gin_base + in_off;
                                for (std::int64_t j = 0; j <= len; ++j) gin_row[j * s] += w * g_row[j];
                            }
                            if (gk_base) {
                                const double* in_row = in_base + in_off;
                                for (std::int64_t j = 0; j <= len; ++j) acc += in_row[j * s] * g_row[j];
                            }
                        }
                        if (gk_base) gk_base[kh * d.k + kw] += acc;
                    }
                }
            }
        }
    }
}

}  // namespace

Var Tape::conv2d(Var input, Var kernel, int stride, int padding) {
    const Tensor& in = value(input);
    const Tensor& k = value(kernel);
    ConvDims d = conv_dims(in, k, stride, padding);
    Tensor out = Tensor::zeros({d.n, d.co, d.oh, d.ow});
    conv2d_forward(in, k, d, out);
    bool ng = requires_grad(input) || requires_grad(kernel);
    std::int32_t in_id = input.id, k_id = kernel.id;
    return push(OpKind::conv2d, std::move(out), ng, [in_id, k_id, d](Tape& t, const Node& self) {
        const Tensor& in_v = t.nodes_[static_cast<std::size_t>(in_id)].value;
        const Tensor& k_v = t.nodes_[static_cast<std::size_t>(k_id)].value;
        bool need_in = t.nodes_[static_cast<std::size_t>(in_id)].needs_grad;
        bool need_k = t.nodes_[static_cast<std::size_t>(k_id)].needs_grad;
        Tensor* gin = need_in ? &t.grad_buf(in_id) : nullptr;
        Tensor* gk = need_k ? &t.grad_buf(k_id) : nullptr;
        conv2d_backward(in_v, k_v, d, self.grad, gin, gk);
    });
}

// ---------------------------------------------------------------------------
// remaining ops
// ---------------------------------------------------------------------------

Var Tape::bias_add(Var input, Var bias) {
    const Tensor& x = value(input);
    const Tensor& b = value(bias);
    require_rank(x, 4, "bias_add", "input");
    require_rank(b, 1, "bias_add", "bias");
    if (b.shape[0] != x.shape[1]) {
        throw std::invalid_argument("bias_add: shape mismatch: input " + shape_str(x.shape) +
                                    " vs bias " + shape_str(b.shape));
    }
    Tensor out = x;
    out.requires_grad = false;
    const std::int64_t hw = x.shape[2] * x.shape[3];
    for (std::int64_t n = 0; n < x.shape[0]; ++n) {
        for (std::int64_t c = 0; c < x.shape[1]; ++c) {
            double* row = out.data.data() + (n * x.shape[1] + c) * hw;
            const double bv = b.data[static_cast<std::size_t>(c)];
            for (std::int64_t i = 0; i < hw; ++i) row[i] += bv;
        }
    }
    bool ng = requires_grad(input) || requires_grad(bias);
    std::int32_t x_id = input.id, b_id = bias.id;
    std::int64_t nn = x.shape[0], cc = x.shape[1];
    return push(OpKind::bias_add, std::move(out), ng, [x_id, b_id, nn, cc, hw](Tape& t, const Node& self) {
        if (t.nodes_[static_cast<std::size_t>(x_id)].needs_grad) t.accumulate(x_id, self.grad);
        if (t.nodes_[static_cast<std::size_t>(b_id)].needs_grad) {
            Tensor& gb = t.grad_buf(b_id);
            for (std::int64_t n = 0; n < nn; ++n) {
                for (std::int64_t c = 0; c < cc; ++c) {
                    const double* row = self.grad.data.data() + (n * cc + c) * hw;
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < hw; ++i) acc += row[i];
                    gb.data[static_cast<std::size_t>(c)] += acc;
                }
            }
        }
    });
}

Var Tape::linear(Var input, Var weight, Var bias) {
    const Tensor& x = value(input);
    const Tensor& w = value(weight);
    const Tensor& b = value(bias);
    require_rank(x, 2, "linear", "input");
    require_rank(w, 2, "linear", "weight");
    require_rank(b, 1, "linear", "bias");
    if (x.shape[1] != w.shape[0] || w.shape[1] != b.shape[0]) {
        throw std::invalid_argument("linear: shape mismatch: input " + shape_str(x.shape) +
                                    ", weight " + shape_str(w.shape) + ", bias " + shape_str(b.shape));
    }
    const std::int64_t B = x.shape[0], I = x.shape[1], O = w.shape[1];
    Tensor out = Tensor::zeros({B, O});
    for (std::int64_t r = 0; r < B; ++r) {
        double* out_row = out.data.data() + r * O;
        for (std::int64_t o = 0; o < O; ++o) out_row[o] = b.data[static_cast<std::size_t>(o)];
        const double* x_row = x.data.data() + r * I;
        for (std::int64_t i = 0; i < I; ++i) {
            const double xv = x_row[i];
            if (xv == 0.0) continue;
            const double* w_row = w.data.data() + i * O;
            for (std::int64_t o = 0; o < O; ++o) out_row[o] += xv * w_row[o];
        }
    }
    bool ng = requires_grad(input) || requires_grad(weight) || requires_grad(bias);
    std::int32_t x_id = input.id, w_id = weight.id, b_id = bias.id;
    return push(OpKind::linear, std::move(out), ng, [x_id, w_id, b_id, B, I, O](Tape& t, const Node& self) {
        const Tensor& x_v = t.nodes_[static_cast<std::size_t>(x_id)].value;
        const Tensor& w_v = t.nodes_[static_cast<std::size_t>(w_id)].value;
        const double* g = self.grad.data.data();
        if (t.nodes_[static_cast<std::size_t>(x_id)].needs_grad) {
            Tensor& gx = t.grad_buf(x_id);
            for (std::int64_t r = 0; r < B; ++r) {
                const double* g_row = g + r * O;
                double* gx_row = gx.data.data() + r * I;
                for (std::int64_t i = 0; i < I; ++i) {
                    const double* w_row = w_v.data.data() + i * O;
                    double acc = 0.0;
                    for (std::int64_t o = 0; o < O; ++o) acc += g_row[o] * w_row[o];
                    gx_row[i] += acc;
                }
            }
        }
        if (t.nodes_[static_cast<std::size_t>(w_id)].needs_grad) {
            Tensor& gw = t.grad_buf(w_id);
            for (std::int64_t r = 0; r < B; ++r) {
                const double* g_row = g + r * O;
                const double* x_row = x_v.data.data() + r * I;
                for (std::int64_t i = 0; i < I; ++i) {
                    const double xv = x_row[i];
                    if (xv == 0.0) continue;
                    double* gw_row = gw.data.data() + i * O;
                    for (std::int64_t o = 0; o < O; ++o) gw_row[o] += xv * g_row[o];
                }
            }
        }
        if (t.nodes_[static_cast<std::size_t>(b_id)].needs_grad) {
            Tensor& gb = t.grad_buf(b_id);
            for (std::int64_t r = 0; r < B; ++r) {
                const double* g_row = g + r * O;
                for (std::int64_t o = 0; o < O; ++o) gb.data[static_cast<std::size_t>(o)] += g_row[o];
            }
        }
    });
}

Var Tape::relu(Var x) {
    const Tensor& xv = value(x);
    Tensor out = xv;
    out.requires_grad = false;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    std::int32_t x_id = x.id;
    return push(OpKind::relu, std::move(out), requires_grad(x), [x_id](Tape& t, const Node& self) {
        const Tensor& in_v = t.nodes_[static_cast<std::size_t>(x_id)].value;
        Tensor g = self.grad;
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            if (in_v.data[i] <= 0.0) g.data[i] = 0.0;
        }
        t.accumulate(x_id, g);
    });
}

Var Tape::tanh(Var x) {
    const Tensor& xv = value(x);
    Tensor out = xv;
    out.requires_grad = false;
    for (double& v : out.data) v = std::tanh(v);
    std::int32_t x_id = x.id;
    return push(OpKind::tanh, std::move(out), requires_grad(x), [x_id](Tape& t, const Node& self) {
        Tensor g = self.grad;
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            const double y = self.value.data[i];
            g.data[i] *= 1.0 - y * y;
        }
        t.accumulate(x_id, g);
    });
}

Var Tape::upsample2_nearest(Var x) {
    const Tensor& xv = value(x);
    require_rank(xv, 4, "upsample2_nearest", "input");
    const std::int64_t N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    Tensor out = Tensor::zeros({N, C, 2 * H, 2 * W});
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const double* in_base = xv.data.data() + nc * H * W;
        double* out_base = out.data.data() + nc * 4 * H * W;
        for (std::int64_t h = 0; h < H; ++h) {
            for (std::int64_t w = 0; w < W; ++w) {
                const double v = in_base[h * W + w];
                double* o = out_base + (2 * h) * 2 * W + 2 * w;
                o[0] = v;
                o[1] = v;
                o[2 * W] = v;
                o[2 * W + 1] = v;
            }
        }
    }
    std::int32_t x_id = x.id;
    return push(OpKind::upsample2, std::move(out), requires_grad(x),
                [x_id, N, C, H, W](Tape& t, const Node& self) {
                    if (!t.nodes_[static_cast<std::size_t>(x_id)].needs_grad) return;
                    Tensor& gin = t.grad_buf(x_id);
                    for (std::int64_t nc = 0; nc < N * C; ++nc) {
                        double* gi = gin.data.data() + nc * H * W;
                        const double* go = self.grad.data.data() + nc * 4 * H * W;
                        for (std::int64_t h = 0; h < H; ++h) {
                            for (std::int64_t w = 0; w < W; ++w) {
                                const double* o = go + (2 * h) * 2 * W + 2 * w;
                                gi[h * W + w] += o[0] + o[1] + o[2 * W] + o[2 * W + 1];
                            }
                        }
                    }
                });
}

Var Tape::max_pool2(Var x) {
    const Tensor& xv = value(x);
    require_rank(xv, 4, "max_pool2", "input");
    const std::int64_t N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    if (H % 2 != 0 || W % 2 != 0) {
        throw std::invalid_argument("max_pool2: spatial dims must be even, got " + shape_str(xv.shape));
    }
    const std::int64_t OH = H / 2, OW = W / 2;
    Tensor out = Tensor::zeros({N, C, OH, OW});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const double* in_base = xv.data.data() + nc * H * W;
        double* out_base = out.data.data() + nc * OH * OW;
        std::int64_t* am_base = argmax.data() + nc * OH * OW;
        for (std::int64_t oh = 0; oh < OH; ++oh) {
            for (std::int64_t ow = 0; ow < OW; ++ow) {
                const std::int64_t i00 = (2 * oh) * W + 2 * ow;
                const std::int64_t idx[4] = {i00, i00 + 1, i00 + W, i00 + W + 1};
                std::int64_t best = idx[0];
                double bv = in_base[idx[0]];
                for (int j = 1; j < 4; ++j) {
                    if (in_base[idx[j]] > bv) {
                        bv = in_base[idx[j]];
                        best = idx[j];
                    }
                }
                out_base[oh * OW + ow] = bv;
                am_base[oh * OW + ow] = nc * H * W + best;
            }
        }
    }
    std::int32_t x_id = x.id;
    return push(OpKind::max_pool2, std::move(out), requires_grad(x),
                [x_id, argmax = std::move(argmax)](Tape& t, const Node& self) {
                    if (!t.nodes_[static_cast<std::size_t>(x_id)].needs_grad) return;
                    Tensor& gin = t.grad_buf(x_id);
                    for (std::size_t i = 0; i < argmax.size(); ++i) {
                        gin.data[static_cast<std::size_t>(argmax[i])] += self.grad.data[i];
                    }
                });
}

Var Tape::add(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    require_same_shape(av, bv, "add");
    Tensor out = av;
    out.requires_grad = false;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    bool ng = requires_grad(a) || requires_grad(b);
    std::int32_t a_id = a.id, b_id = b.id;
    return push(OpKind::add, std::move(out), ng, [a_id, b_id](Tape& t, const Node& self) {
        t.accumulate(a_id, self.grad);
        t.accumulate(b_id, self.grad);
    });
}

Var Tape::scalar_mul(Var x, double s) {
    Tensor out = value(x);
    out.requires_grad = false;
    for (double& v : out.data) v *= s;
    std::int32_t x_id = x.id;
    return push(OpKind::scalar_mul, std::move(out), requires_grad(x), [x_id, s](Tape& t, const Node& self) {
        Tensor g = self.grad;
        for (double& v : g.data) v *= s;
        t.accumulate(x_id, g);
    });
}

Var Tape::clamp(Var x, double lo, double hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must be <= hi");
    const Tensor& xv = value(x);
    Tensor out = xv;
    out.requires_grad = false;
    for (double& v : out.data) v = std::min(std::max(v, lo), hi);
    std::int32_t x_id = x.id;
    return push(OpKind::clamp, std::move(out), requires_grad(x), [x_id, lo, hi](Tape& t, const Node& self) {
        const Tensor& in_v = t.nodes_[static_cast<std::size_t>(x_id)].value;
        Tensor g = self.grad;
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            const double v = in_v.data[i];
            if (v < lo || v > hi) g.data[i] = 0.0;
        }
        t.accumulate(x_id, g);
    });
}

Var Tape::reshape(Var x, std::vector<std::int64_t> new_shape) {
    Tensor out = value(x).reshaped(std::move(new_shape));
    out.requires_grad = false;
    std::int32_t x_id = x.id;
    return push(OpKind::reshape, std::move(out), requires_grad(x), [x_id](Tape& t, const Node& self) {
        const Tensor& in_v = t.nodes_[static_cast<std::size_t>(x_id)].value;
        Tensor g = self.grad.reshaped(in_v.shape);
        t.accumulate(x_id, g);
    });
}

Var Tape::softmax(Var x) {
    const Tensor& xv = value(x);
    if (xv.rank() < 1) throw std::invalid_argument("softmax: input must have rank >= 1");
    const std::int64_t K = xv.shape.back();
    const std::int64_t rows = xv.numel() / K;
    Tensor out = xv;
    out.requires_grad = false;
    for (std::int64_t r = 0; r < rows; ++r) {
        double* row = out.data.data() + r * K;
        double m = row[0];
        for (std::int64_t k = 1; k < K; ++k) m = std::max(m, row[k]);
        double z = 0.0;
        for (std::int64_t k = 0; k < K; ++k) {
            row[k] = std::exp(row[k] - m);
            z += row[k];
        }
        for (std::int64_t k = 0; k < K; ++k) row[k] /= z;
    }
    std::int32_t x_id = x.id;
    return push(OpKind::softmax, std::move(out), requires_grad(x), [x_id, K, rows](Tape& t, const Node& self) {
        Tensor g = self.grad;
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* y = self.value.data.data() + r * K;
            double* gr = g.data.data() + r * K;
            double dot = 0.0;
            for (std::int64_t k = 0; k < K; ++k) dot += gr[k] * y[k];
            for (std::int64_t k = 0; k < K; ++k) gr[k] = (gr[k] - dot) * y[k];
        }
        t.accumulate(x_id, g);
    });
}

Var Tape::cross_entropy(Var logits, std::span<const int> target_classes) {
    const Tensor& lv = value(logits);
    require_rank(lv, 2, "cross_entropy", "logits");
    const std::int64_t B = lv.shape[0], K = lv.shape[1];
    if (static_cast<std::int64_t>(target_classes.size()) != B) {
        throw std::invalid_argument("cross_entropy: " + std::to_string(target_classes.size()) +
                                    " targets for batch of " + std::to_string(B));
    }
    std::vector<int> targets(target_classes.begin(), target_classes.end());
    std::vector<double> lse(static_cast<std::size_t>(B));
    double total = 0.0;
    for (std::int64_t r = 0; r < B; ++r) {
        const int tc = targets[static_cast<std::size_t>(r)];
        if (tc < 0 || tc >= K) {
            throw std::invalid_argument("cross_entropy: target class " + std::to_string(tc) +
                                        " out of range [0, " + std::to_string(K) + ")");
        }
        const double* row = lv.data.data() + r * K;
        double m = row[0];
        for (std::int64_t k = 1; k < K; ++k) m = std::max(m, row[k]);
        double z = 0.0;
        for (std::int64_t k = 0; k < K; ++k) z += std::exp(row[k] - m);
        const double l = m + std::log(z);
        lse[static_cast<std::size_t>(r)] = l;
        total += l - row[tc];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(B));
    std::int32_t x_id = logits.id;
    return push(OpKind::cross_entropy, std::move(out), requires_grad(logits),
                [x_id, B, K, targets = std::move(targets), lse = std::move(lse)](Tape& t, const Node& self) {
                    if (!t.nodes_[static_cast<std::size_t>(x_id)].needs_grad) return;
                    const Tensor& lv = t.nodes_[static_cast<std::size_t>(x_id)].value;
                    Tensor& gx = t.grad_buf(x_id);
                    const double scale = self.grad.data[0] / static_cast<double>(B);
                    for (std::int64_t r = 0; r < B; ++r) {
                        const double* row = lv.data.data() + r * K;
                        double* g_row = gx.data.data() + r * K;
                        const double l = lse[static_cast<std::size_t>(r)];
                        for (std::int64_t k = 0; k < K; ++k) {
                            double p = std::exp(row[k] - l);
                            if (k == targets[static_cast<std::size_t>(r)]) p -= 1.0;
                            g_row[k] += scale * p;
                        }
                    }
                });
}

Var Tape::sum(Var x) {
    const Tensor& xv = value(x);
    double total = 0.0;
    for (double v : xv.data) total += v;
    std::int32_t x_id = x.id;
    return push(OpKind::sum, Tensor::scalar(total), requires_grad(x), [x_id](Tape& t, const Node& self) {
        if (!t.nodes_[static_cast<std::size_t>(x_id)].needs_grad) return;
        Tensor& gx = t.grad_buf(x_id);
        const double g = self.grad.data[0];
        for (double& v : gx.data) v += g;
    });
}

Var Tape::mean(Var x) {
    const Tensor& xv = value(x);
    double total = 0.0;
    for (double v : xv.data) total += v;
    const double inv_n = 1.0 / static_cast<double>(xv.numel());
    std::int32_t x_id = x.id;
    return push(OpKind::mean, Tensor::scalar(total * inv_n), requires_grad(x),
                [x_id, inv_n](Tape& t, const Node& self) {
                    if (!t.nodes_[static_cast<std::size_t>(x_id)].needs_grad) return;
                    Tensor& gx = t.grad_buf(x_id);
                    const double g = self.grad.data[0] * inv_n;
                    for (double& v : gx.data) v += g;
                });
}

Var Tape::weighted_sum(Var x, Tensor weights) {
    const Tensor& xv = value(x);
    require_same_shape(xv, weights, "weighted_sum");
    double total = 0.0;
    for (std::size_t i = 0; i < xv.data.size(); ++i) total += xv.data[i] * weights.data[i];
    std::int32_t x_id = x.id;
    return push(OpKind::weighted_sum, Tensor::scalar(total), requires_grad(x),
                [x_id, w = std::move(weights)](Tape& t, const Node& self) {
                    if (!t.nodes_[static_cast<std::size_t>(x_id)].needs_grad) return;
                    Tensor& gx = t.grad_buf(x_id);
                    const double g = self.grad.data[0];
                    for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += g * w.data[i];
                });
}

Var Tape::patch_gather(Var images, std::vector<PatchPlan> plans) {
    const Tensor& xv = value(images);
    require_rank(xv, 4, "patch_gather", "images");
    const std::int64_t N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    if (static_cast<std::int64_t>(plans.size()) != N) {
        throw std::invalid_argument("patch_gather: " + std::to_string(plans.size()) +
                                    " plans for batch of " + std::to_string(N));
    }
    for (const PatchPlan& p : plans) {
        const std::int64_t pp = static_cast<std::int64_t>(p.patch) * p.patch;
        if (p.patch <= 0 || p.patch > H || p.patch > W || p.row0 < 0 || p.col0 < 0 ||
            p.row0 + p.patch > H || p.col0 + p.patch > W ||
            static_cast<std::int64_t>(p.perm.size()) != pp) {
            throw std::invalid_argument("patch_gather: patch plan does not fit image " +
                                        shape_str(xv.shape));
        }
    }
    const std::int64_t P2 = static_cast<std::int64_t>(plans[0].patch) * plans[0].patch;
    for (const PatchPlan& p : plans) {
        if (static_cast<std::int64_t>(p.patch) * p.patch != P2) {
            throw std::invalid_argument("patch_gather: plans must share one patch size");
        }
    }
    Tensor out = Tensor::zeros({N, C * P2});
    for (std::int64_t n = 0; n < N; ++n) {
        const PatchPlan& p = plans[static_cast<std::size_t>(n)];
        for (std::int64_t c = 0; c < C; ++c) {
            const double* in_base = xv.data.data() + (n * C + c) * H * W;
            double* out_base = out.data.data() + n * C * P2 + c * P2;
            for (std::int64_t q = 0; q < P2; ++q) {
                const std::int32_t pos = p.perm[static_cast<std::size_t>(q)];
                const std::int64_t pr = p.row0 + pos / p.patch;
                const std::int64_t pc = p.col0 + pos % p.patch;
                out_base[q] = in_base[pr * W + pc];
            }
        }
    }
    std::int32_t x_id = images.id;
    return push(OpKind::patch_gather, std::move(out), requires_grad(images),
                [x_id, plans = std::move(plans), C, H, W, P2](Tape& t, const Node& self) {
                    if (!t.nodes_[static_cast<std::size_t>(x_id)].needs_grad) return;
                    Tensor& gin = t.grad_buf(x_id);
                    const std::int64_t N = static_cast<std::int64_t>(plans.size());
                    for (std::int64_t n = 0; n < N; ++n) {
                        const PatchPlan& p = plans[static_cast<std::size_t>(n)];
                        for (std::int64_t c = 0; c < C; ++c) {
                            double* gin_base = gin.data.data() + (n * C + c) * H * W;
                            const double* g_base = self.grad.data.data() + n * C * P2 + c * P2;
                            for (std::int64_t q = 0; q < P2; ++q) {
                                const std::int32_t pos = p.perm[static_cast<std::size_t>(q)];
                                const std::int64_t pr = p.row0 + pos / p.patch;
                                const std::int64_t pc = p.col0 + pos % p.patch;
                                gin_base[pr * W + pc] += g_base[q];
                            }
                        }
                    }
                });
}

}  // namespace calibra
