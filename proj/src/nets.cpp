#include "calibra/nets.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "calibra/io.hpp"
#include "calibra/rng.hpp"

namespace calibra {

// ===== spec plumbing =====

namespace {

const char* role_name(Role r) {
    switch (r) {
        case Role::classifier: return "classifier";
        case Role::calibrator: return "calibrator";
        case Role::pixel_disc: return "pixel_disc";
        case Role::feat_disc: return "feat_disc";
    }
    return "?";
}

const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::conv: return "conv";
        case LayerKind::pool: return "pool";
        case LayerKind::upsample: return "upsample";
        case LayerKind::flatten: return "flatten";
        case LayerKind::linear: return "linear";
    }
    return "?";
}

const char* act_name(Activation a) {
    switch (a) {
        case Activation::none: return "none";
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
    }
    return "?";
}

[[noreturn]] void spec_error(std::size_t layer, const std::string& what) {
    throw std::invalid_argument("network spec layer " + std::to_string(layer) + ": " + what);
}

}  // namespace

std::vector<std::int64_t> NetworkSpec::validate() const {
    if (input_shape.size() != 3 && input_shape.size() != 1) {
        throw std::invalid_argument("network spec: input shape must be CxHxW or F, got " +
                                    shape_str(input_shape));
    }
    if (layers.empty()) throw std::invalid_argument("network spec: no layers");
    std::vector<std::vector<std::int64_t>> outs;
    std::vector<std::int64_t> cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerDesc& L = layers[i];
        switch (L.kind) {
            case LayerKind::conv: {
                if (cur.size() != 3) spec_error(i, "conv needs CxHxW input, got " + shape_str(cur));
                if (cur[0] != L.in_dim) {
                    spec_error(i, "conv expects " + std::to_string(L.in_dim) + " channels, gets " +
                                      std::to_string(cur[0]));
                }
                if (L.kernel < 1 || L.stride < 1 || L.padding < 0 || L.out_dim < 1) {
                    spec_error(i, "malformed conv geometry");
                }
                std::int64_t oh = (cur[1] + 2 * L.padding - L.kernel) / L.stride + 1;
                std::int64_t ow = (cur[2] + 2 * L.padding - L.kernel) / L.stride + 1;
                if (cur[1] + 2 * L.padding < L.kernel || oh < 1 || ow < 1) {
                    spec_error(i, "conv output collapses on input " + shape_str(cur));
                }
                cur = {L.out_dim, oh, ow};
                break;
            }
            case LayerKind::pool: {
                if (cur.size() != 3) spec_error(i, "pool needs CxHxW input");
                if (cur[1] % 2 != 0 || cur[2] % 2 != 0) {
                    spec_error(i, "pool needs even spatial dims, got " + shape_str(cur));
                }
                cur = {cur[0], cur[1] / 2, cur[2] / 2};
                break;
            }
            case LayerKind::upsample: {
                if (cur.size() != 3) spec_error(i, "upsample needs CxHxW input");
                cur = {cur[0], cur[1] * 2, cur[2] * 2};
                break;
            }
            case LayerKind::flatten: {
                if (cur.size() != 3) spec_error(i, "flatten needs CxHxW input");
                cur = {cur[0] * cur[1] * cur[2]};
                break;
            }
            case LayerKind::linear: {
                if (cur.size() != 1) spec_error(i, "linear needs flat input, got " + shape_str(cur));
                if (cur[0] != L.in_dim) {
                    spec_error(i, "linear expects " + std::to_string(L.in_dim) + " features, gets " +
                                      std::to_string(cur[0]));
                }
                if (L.out_dim < 1) spec_error(i, "malformed linear width");
                cur = {L.out_dim};
                break;
            }
        }
        if (L.zero_init && L.kind != LayerKind::conv && L.kind != LayerKind::linear) {
            spec_error(i, "zero_init on a parameter-free layer");
        }
        if (L.skip_from >= 0) {
            if (static_cast<std::size_t>(L.skip_from) >= i) {
                spec_error(i, "skip must reference an earlier layer");
            }
            if (outs[static_cast<std::size_t>(L.skip_from)] != cur) {
                spec_error(i, "skip shape " +
                                  shape_str(outs[static_cast<std::size_t>(L.skip_from)]) +
                                  " does not match layer output " + shape_str(cur));
            }
        }
        outs.push_back(cur);
    }
    if (role == Role::classifier) {
        if (head_split < 1 || static_cast<std::size_t>(head_split) >= layers.size()) {
            throw std::invalid_argument("network spec: classifier needs a head split index");
        }
    } else if (head_split != -1) {
        throw std::invalid_argument("network spec: head split is classifier-only");
    }
    return cur;
}

std::string NetworkSpec::canonical_string() const {
    std::ostringstream os;
    os << "role=" << role_name(role) << ";input=" << shape_str(input_shape)
       << ";head=" << head_split;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerDesc& L = layers[i];
        os << ";L" << i << "=" << kind_name(L.kind);
        if (L.kind == LayerKind::conv || L.kind == LayerKind::linear) {
            os << "(" << L.in_dim << "->" << L.out_dim;
            if (L.kind == LayerKind::conv) {
                os << ",k" << L.kernel << ",s" << L.stride << ",p" << L.padding;
            }
            if (L.zero_init) os << ",zero";
            os << ")";
        }
        if (L.act != Activation::none) os << "+" << act_name(L.act);
        if (L.skip_from >= 0) os << "+skip" << L.skip_from;
    }
    return os.str();
}

std::uint64_t NetworkSpec::hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : canonical_string()) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}

// ===== spec factories =====

namespace {

LayerDesc conv_layer(std::int64_t in, std::int64_t out, int k, int s, int p, Activation act,
                     bool zero = false, int skip = -1) {
    LayerDesc L;
    L.kind = LayerKind::conv;
    L.in_dim = in;
    L.out_dim = out;
    L.kernel = k;
    L.stride = s;
    L.padding = p;
    L.act = act;
    L.zero_init = zero;
    L.skip_from = skip;
    return L;
}

LayerDesc linear_layer(std::int64_t in, std::int64_t out, Activation act, bool zero = false) {
    LayerDesc L;
    L.kind = LayerKind::linear;
    L.in_dim = in;
    L.out_dim = out;
    L.act = act;
    L.zero_init = zero;
    return L;
}

LayerDesc bare_layer(LayerKind k) {
    LayerDesc L;
    L.kind = k;
    return L;
}

}  // namespace

NetworkSpec classifier_spec_desk() {
    NetworkSpec s;
    s.role = Role::classifier;
    s.input_shape = {1, 28, 28};
    s.layers = {
        conv_layer(1, 6, 5, 1, 2, Activation::relu),
        bare_layer(LayerKind::pool),
        conv_layer(6, 12, 5, 1, 2, Activation::relu),
        bare_layer(LayerKind::pool),
        bare_layer(LayerKind::flatten),
        linear_layer(12 * 7 * 7, 64, Activation::relu),
        linear_layer(64, 10, Activation::none),
    };
    s.head_split = 6;
    s.validate();
    return s;
}

NetworkSpec calibrator_spec(const CalibratorConfig& cfg) {
    if (cfg.width < 1 || cfg.depth < 1 || cfg.in_channels < 1) {
        throw std::invalid_argument("calibrator config: width, depth and channels must be positive");
    }
    if (!(cfg.epsilon >= 0.0 && cfg.epsilon <= 2.0)) {
        throw std::invalid_argument("calibrator config: epsilon must lie in [0, 2]");
    }
    if (cfg.image_size % (std::int64_t{1} << cfg.depth) != 0) {
        throw std::invalid_argument("calibrator config: image size " +
                                    std::to_string(cfg.image_size) + " is not divisible by 2^" +
                                    std::to_string(cfg.depth));
    }
    NetworkSpec s;
    s.role = Role::calibrator;
    s.input_shape = {cfg.in_channels, cfg.image_size, cfg.image_size};
    const std::int64_t w = cfg.width;
    // Encoder: stem then stride-2 stages; decoder mirrors with upsample +
    // conv, adding the matching encoder activation back in.
    std::vector<int> level_out;  // layer index producing each resolution level
    s.layers.push_back(conv_layer(cfg.in_channels, w, 3, 1, 1, Activation::relu));
    level_out.push_back(0);
    for (int j = 1; j <= cfg.depth; ++j) {
        s.layers.push_back(conv_layer(w << (j - 1), w << j, 3, 2, 1, Activation::relu));
        level_out.push_back(static_cast<int>(s.layers.size()) - 1);
    }
    s.layers.push_back(conv_layer(w << cfg.depth, w << cfg.depth, 3, 1, 1, Activation::relu));
    for (int j = cfg.depth; j >= 1; --j) {
        s.layers.push_back(bare_layer(LayerKind::upsample));
        int skip = cfg.skips ? level_out[static_cast<std::size_t>(j - 1)] : -1;
        s.layers.push_back(
            conv_layer(w << j, w << (j - 1), 3, 1, 1, Activation::relu, false, skip));
    }
    s.layers.push_back(conv_layer(w, cfg.in_channels, 3, 1, 1, Activation::none, true));
    s.validate();
    return s;
}

NetworkSpec discriminator_spec(DiscKind kind, std::int64_t input_dim) {
    if (input_dim < 1) throw std::invalid_argument("discriminator spec: input_dim must be positive");
    NetworkSpec s;
    s.role = kind == DiscKind::pixel ? Role::pixel_disc : Role::feat_disc;
    s.input_shape = {input_dim};
    s.layers = {
        linear_layer(input_dim, 64, Activation::relu),
        // Zero-init head: a fresh discriminator scores every group 0.25.
        linear_layer(64, 4, Activation::none, true),
    };
    s.validate();
    return s;
}

NetworkSpec classifier_spec_reference_digits() {
    NetworkSpec s;
    s.role = Role::classifier;
    s.input_shape = {1, 32, 32};
    s.layers = {
        conv_layer(1, 20, 5, 1, 0, Activation::relu),
        bare_layer(LayerKind::pool),
        conv_layer(20, 50, 5, 1, 0, Activation::relu),
        bare_layer(LayerKind::pool),
        bare_layer(LayerKind::flatten),
        linear_layer(50 * 5 * 5, 2500, Activation::relu),
        linear_layer(2500, 10, Activation::none),
    };
    s.head_split = 6;
    s.validate();
    return s;
}

CalibratorConfig calibrator_config_reference_digits() {
    CalibratorConfig cfg;
    cfg.width = 24;
    cfg.depth = 2;
    cfg.in_channels = 1;
    cfg.image_size = 32;
    return cfg;
}

NetworkSpec classifier_spec_reference_seg() {
    NetworkSpec s;
    s.role = Role::classifier;
    s.input_shape = {3, 64, 64};
    s.layers = {
        conv_layer(3, 64, 3, 1, 1, Activation::relu),
        conv_layer(64, 128, 3, 2, 1, Activation::relu),
        conv_layer(128, 128, 3, 1, 1, Activation::relu),
        conv_layer(128, 256, 3, 2, 1, Activation::relu),
        conv_layer(256, 256, 3, 1, 1, Activation::relu),
        conv_layer(256, 512, 3, 2, 1, Activation::relu),
        conv_layer(512, 512, 3, 1, 1, Activation::relu),
        conv_layer(512, 512, 3, 1, 1, Activation::relu),
        conv_layer(512, 512, 3, 1, 1, Activation::relu),
        conv_layer(512, 512, 3, 1, 1, Activation::relu),
        conv_layer(512, 512, 3, 1, 1, Activation::relu),
        conv_layer(512, 512, 3, 1, 1, Activation::relu),
        conv_layer(512, 512, 3, 1, 1, Activation::relu),
        conv_layer(512, 384, 3, 1, 1, Activation::relu),
        conv_layer(384, 19, 1, 1, 0, Activation::none),
    };
    s.head_split = 14;
    s.validate();
    return s;
}

CalibratorConfig calibrator_config_reference_seg() {
    CalibratorConfig cfg;
    cfg.width = 12;
    cfg.depth = 2;
    cfg.in_channels = 3;
    cfg.image_size = 64;
    return cfg;
}

// ===== builders =====

namespace {

struct ParamPlan {
    std::string name;
    std::vector<std::int64_t> shape;
    bool zero_init;
    double init_limit;  // He-uniform half-width; 0 for bias
};

std::vector<ParamPlan> parameter_plans(const NetworkSpec& spec) {
    std::vector<ParamPlan> plans;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerDesc& L = spec.layers[i];
        const std::string base = "layer" + std::to_string(i);
        if (L.kind == LayerKind::conv) {
            const double fan_in = static_cast<double>(L.in_dim * L.kernel * L.kernel);
            plans.push_back({base + ".weight",
                             {L.out_dim, L.in_dim, L.kernel, L.kernel},
                             L.zero_init,
                             std::sqrt(6.0 / fan_in)});
            plans.push_back({base + ".bias", {L.out_dim}, L.zero_init, 0.0});
        } else if (L.kind == LayerKind::linear) {
            const double fan_in = static_cast<double>(L.in_dim);
            plans.push_back(
                {base + ".weight", {L.in_dim, L.out_dim}, L.zero_init, std::sqrt(6.0 / fan_in)});
            plans.push_back({base + ".bias", {L.out_dim}, L.zero_init, 0.0});
        }
    }
    return plans;
}

}  // namespace

ParameterSet init_parameters(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    ParameterSet ps;
    for (const ParamPlan& plan : parameter_plans(spec)) {
        Tensor t = Tensor::zeros(plan.shape);
        if (!plan.zero_init && plan.init_limit > 0.0) {
            for (double& v : t.data) v = rng.uniform(-plan.init_limit, plan.init_limit);
        }
        ps.add(plan.name, std::move(t));
    }
    return ps;
}

ParameterSet build_classifier(const NetworkSpec& spec, std::uint64_t seed) {
    if (spec.role != Role::classifier) {
        throw std::invalid_argument("build_classifier: spec role is not classifier");
    }
    return init_parameters(spec, seed);
}

ParameterSet build_calibrator(const CalibratorConfig& cfg, std::uint64_t seed) {
    return init_parameters(calibrator_spec(cfg), seed);
}

ParameterSet build_discriminator(DiscKind kind, std::int64_t input_dim, std::uint64_t seed) {
    return init_parameters(discriminator_spec(kind, input_dim), seed);
}

std::int64_t count_parameters(const ParameterSet& params) { return params.total_count(); }

// ===== forward passes =====

TapedNet tape_params(Tape& tape, const NetworkSpec& spec, const ParameterSet& ps) {
    return tape_params(tape, spec, ps, !ps.frozen);
}

TapedNet tape_params(Tape& tape, const NetworkSpec& spec, const ParameterSet& ps, bool trainable) {
    auto plans = parameter_plans(spec);
    if (plans.size() != ps.size()) {
        throw std::invalid_argument("tape_params: parameter set has " + std::to_string(ps.size()) +
                                    " tensors, spec expects " + std::to_string(plans.size()));
    }
    if (trainable && ps.frozen) {
        throw std::logic_error("tape_params: frozen parameters cannot be taped as trainable");
    }
    TapedNet net;
    net.spec = &spec;
    net.params.reserve(ps.size());
    for (std::size_t i = 0; i < plans.size(); ++i) {
        if (ps.names[i] != plans[i].name || ps.tensors[i].shape != plans[i].shape) {
            throw std::invalid_argument("tape_params: parameter '" + ps.names[i] +
                                        "' does not match spec entry '" + plans[i].name + "'");
        }
        net.params.push_back(tape.leaf(ps.tensors[i], trainable));
    }
    return net;
}

std::int64_t classifier_feature_width(const NetworkSpec& spec) {
    if (spec.role != Role::classifier) {
        throw std::invalid_argument("classifier_feature_width: spec role is not classifier");
    }
    spec.validate();
    std::vector<std::int64_t> cur = spec.input_shape;
    for (int i = 0; i < spec.head_split; ++i) {
        const LayerDesc& L = spec.layers[static_cast<std::size_t>(i)];
        switch (L.kind) {
            case LayerKind::conv:
                cur = {L.out_dim, (cur[1] + 2 * L.padding - L.kernel) / L.stride + 1,
                       (cur[2] + 2 * L.padding - L.kernel) / L.stride + 1};
                break;
            case LayerKind::pool:
                cur = {cur[0], cur[1] / 2, cur[2] / 2};
                break;
            case LayerKind::upsample:
                cur = {cur[0], cur[1] * 2, cur[2] * 2};
                break;
            case LayerKind::flatten:
                cur = {cur[0] * cur[1] * cur[2]};
                break;
            case LayerKind::linear:
                cur = {L.out_dim};
                break;
        }
    }
    std::int64_t width = 1;
    for (std::int64_t d : cur) width *= d;
    return width;
}

namespace {

Var forward_impl(Tape& t, const TapedNet& net, Var x, Var* features_out) {
    const NetworkSpec& spec = *net.spec;
    const Tensor& xv = t.value(x);
    bool shape_ok = xv.rank() == static_cast<int>(spec.input_shape.size()) + 1;
    for (std::size_t i = 0; shape_ok && i < spec.input_shape.size(); ++i) {
        shape_ok = xv.shape[i + 1] == spec.input_shape[i];
    }
    if (!shape_ok) {
        throw std::invalid_argument("net forward: input shape " + shape_str(xv.shape) +
                                    " does not match spec input " + shape_str(spec.input_shape));
    }
    const std::int64_t batch = xv.shape[0];
    std::vector<Var> outs;
    outs.reserve(spec.layers.size());
    Var cur = x;
    std::size_t pi = 0;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerDesc& L = spec.layers[i];
        if (features_out && static_cast<int>(i) == spec.head_split) *features_out = cur;
        switch (L.kind) {
            case LayerKind::conv: {
                Var w = net.params[pi++];
                Var b = net.params[pi++];
                cur = t.bias_add(t.conv2d(cur, w, L.stride, L.padding), b);
                break;
            }
            case LayerKind::pool:
                cur = t.max_pool2(cur);
                break;
            case LayerKind::upsample:
                cur = t.upsample2_nearest(cur);
                break;
            case LayerKind::flatten: {
                const Tensor& v = t.value(cur);
                cur = t.reshape(cur, {batch, v.numel() / batch});
                break;
            }
            case LayerKind::linear: {
                Var w = net.params[pi++];
                Var b = net.params[pi++];
                cur = t.linear(cur, w, b);
                break;
            }
        }
        if (L.skip_from >= 0) cur = t.add(cur, outs[static_cast<std::size_t>(L.skip_from)]);
        if (L.act == Activation::relu) cur = t.relu(cur);
        if (L.act == Activation::tanh) cur = t.tanh(cur);
        outs.push_back(cur);
    }
    return cur;
}

}  // namespace

Var net_forward(Tape& tape, const TapedNet& net, Var x) {
    return forward_impl(tape, net, x, nullptr);
}

ClassifierOut classifier_forward(Tape& tape, const TapedNet& net, Var x) {
    if (net.spec->role != Role::classifier) {
        throw std::invalid_argument("classifier_forward: net role is not classifier");
    }
    ClassifierOut out;
    out.logits = forward_impl(tape, net, x, &out.features);
    return out;
}

Var calibrate(Tape& tape, const TapedNet& calibrator, Var x, double epsilon) {
    if (calibrator.spec->role != Role::calibrator) {
        throw std::invalid_argument("calibrate: net role is not calibrator");
    }
    if (!(epsilon >= 0.0 && epsilon <= 2.0)) {
        throw std::invalid_argument("calibrate: epsilon must lie in [0, 2], got " +
                                    std::to_string(epsilon));
    }
    Var residual = tape.tanh(net_forward(tape, calibrator, x));
    return tape.clamp(tape.add(x, tape.scalar_mul(residual, epsilon)), -1.0, 1.0);
}

// ===== checkpoints =====

void save_checkpoint(const std::string& path, const NetworkSpec& spec, const ParameterSet& ps) {
    auto plans = parameter_plans(spec);
    if (plans.size() != ps.size()) {
        throw std::invalid_argument("save_checkpoint: parameter set does not match spec");
    }
    for (std::size_t i = 0; i < plans.size(); ++i) {
        if (ps.names[i] != plans[i].name || ps.tensors[i].shape != plans[i].shape) {
            throw std::invalid_argument("save_checkpoint: parameter '" + ps.names[i] +
                                        "' does not match spec entry '" + plans[i].name + "'");
        }
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint file: " + path);
    write_magic(os, "CALC");
    write_u32(os, kCheckpointFormatVersion);
    write_u32(os, static_cast<std::uint32_t>(spec.role));
    write_u64(os, spec.hash());
    write_u32(os, static_cast<std::uint32_t>(ps.size()));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        write_string(os, ps.names[i]);
        write_tensor(os, ps.tensors[i]);
    }
    if (!os) throw std::runtime_error("failed while writing checkpoint file: " + path);
}

ParameterSet load_checkpoint(const std::string& path, const NetworkSpec& expected_spec) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint file: " + path);
    const std::string ctx = "checkpoint " + path;
    read_magic(is, "CALC", ctx);
    const std::uint32_t version = read_u32(is, ctx);
    if (version != kCheckpointFormatVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                                 " in " + path);
    }
    const std::uint32_t role = read_u32(is, ctx);
    if (role != static_cast<std::uint32_t>(expected_spec.role)) {
        throw std::runtime_error("checkpoint role mismatch for " + path + ": file has " +
                                 role_name(static_cast<Role>(role)) + ", expected " +
                                 role_name(expected_spec.role));
    }
    const std::uint64_t hash = read_u64(is, ctx);
    if (hash != expected_spec.hash()) {
        throw std::runtime_error("checkpoint spec hash mismatch for " + path +
                                 ": the file was written for a different architecture");
    }
    const std::uint32_t count = read_u32(is, ctx);
    auto plans = parameter_plans(expected_spec);
    if (count != plans.size()) {
        throw std::runtime_error("corrupt checkpoint " + path + ": tensor count " +
                                 std::to_string(count) + ", expected " +
                                 std::to_string(plans.size()));
    }
    ParameterSet ps;
    for (std::size_t i = 0; i < plans.size(); ++i) {
        std::string name = read_string(is, ctx);
        Tensor t = read_tensor(is, ctx);
        if (name != plans[i].name || t.shape != plans[i].shape) {
            throw std::runtime_error("corrupt checkpoint " + path + ": tensor '" + name +
                                     "' does not match expected '" + plans[i].name + "'");
        }
        ps.add(std::move(name), std::move(t));
    }
    if (is.peek() != std::char_traits<char>::eof()) {
        throw std::runtime_error("corrupt checkpoint " + path + ": trailing bytes");
    }
    return ps;
}

}  // namespace calibra
