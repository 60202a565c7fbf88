#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "calibra/autograd.hpp"
#include "calibra/params.hpp"
#include "calibra/tensor.hpp"

namespace calibra {

// ===== network description =====

enum class Role : std::uint32_t { classifier = 0, calibrator = 1, pixel_disc = 2, feat_disc = 3 };

enum class LayerKind : std::uint8_t { conv, pool, upsample, flatten, linear };

enum class Activation : std::uint8_t { none, relu, tanh };

struct LayerDesc {
    LayerKind kind = LayerKind::conv;
    std::int64_t in_dim = 0;   // channels (conv) / features (linear)
    std::int64_t out_dim = 0;  // channels (conv) / features (linear)
    int kernel = 0;
    int stride = 1;
    int padding = 0;
    Activation act = Activation::none;
    bool zero_init = false;
    // Index of an earlier layer whose output is added to this layer's
    // pre-activation output (encoder-decoder skip connection); -1 for none.
    int skip_from = -1;
};

// Declarative layer list plus input shape. head_split (classifiers only) is
// the index of the first head layer; everything before it is the feature
// extractor, and the feature vector is the flat activation entering it.
struct NetworkSpec {
    Role role = Role::classifier;
    std::vector<std::int64_t> input_shape;  // {C,H,W} for image nets, {F} for discriminators
    std::vector<LayerDesc> layers;
    int head_split = -1;

    // Throws std::invalid_argument unless adjacent layer shapes compose and
    // role-specific constraints hold. Returns the per-sample output shape.
    std::vector<std::int64_t> validate() const;

    std::string canonical_string() const;
    std::uint64_t hash() const;  // FNV-1a of canonical_string
};

struct CalibratorConfig {
    double epsilon = 0.2;      // L-inf budget in normalized pixel units, <= 2
    std::int64_t width = 4;    // base channel count
    int depth = 1;             // number of down/up stages
    bool skips = true;
    std::int64_t in_channels = 1;
    std::int64_t image_size = 28;
};

enum class DiscKind { pixel, feature };

// ===== spec factories =====

// Desk-scale nets sized for CPU training.
NetworkSpec classifier_spec_desk();
NetworkSpec calibrator_spec(const CalibratorConfig& cfg);
NetworkSpec discriminator_spec(DiscKind kind, std::int64_t input_dim);

// Full-scale reference shapes used only for parameter accounting.
NetworkSpec classifier_spec_reference_digits();
CalibratorConfig calibrator_config_reference_digits();
NetworkSpec classifier_spec_reference_seg();
CalibratorConfig calibrator_config_reference_seg();

// ===== builders =====

ParameterSet init_parameters(const NetworkSpec& spec, std::uint64_t seed);
ParameterSet build_classifier(const NetworkSpec& spec, std::uint64_t seed);
ParameterSet build_calibrator(const CalibratorConfig& cfg, std::uint64_t seed);
ParameterSet build_discriminator(DiscKind kind, std::int64_t input_dim, std::uint64_t seed);

std::int64_t count_parameters(const ParameterSet& params);

// Flat width of the activation entering the classifier head; the feature
// discriminator's input size.
std::int64_t classifier_feature_width(const NetworkSpec& spec);

// ===== forward passes =====

// A network's parameters registered as leaves of one tape. Leaves require
// grad unless the ParameterSet is frozen.
struct TapedNet {
    const NetworkSpec* spec = nullptr;
    std::vector<Var> params;  // aligned with ParameterSet order
};

TapedNet tape_params(Tape& tape, const NetworkSpec& spec, const ParameterSet& ps);

// Same, but with the gradient decision made by the caller: the alternating
// game tapes one player's parameters as plain data while the other trains.
TapedNet tape_params(Tape& tape, const NetworkSpec& spec, const ParameterSet& ps, bool trainable);

// Runs all layers; x is N x input_shape.
Var net_forward(Tape& tape, const TapedNet& net, Var x);

struct ClassifierOut {
    Var features;  // flat activations entering the head
    Var logits;
};

ClassifierOut classifier_forward(Tape& tape, const TapedNet& net, Var x);

// clip(x + epsilon * tanh(raw_residual(x)), -1, 1). epsilon outside [0, 2]
// is rejected; epsilon == 0 renders the calibrator inert.
Var calibrate(Tape& tape, const TapedNet& calibrator, Var x, double epsilon);

// ===== checkpoints =====

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

void save_checkpoint(const std::string& path, const NetworkSpec& spec, const ParameterSet& ps);
ParameterSet load_checkpoint(const std::string& path, const NetworkSpec& expected_spec);

}  // namespace calibra
