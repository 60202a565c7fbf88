#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "calibra/autograd.hpp"
#include "calibra/rng.hpp"
#include "calibra/tensor.hpp"

namespace calibra {

enum class Domain : std::uint32_t { source = 0, target = 1 };

// Images with per-image integer labels. Label access is gated: training code
// receives target datasets with labels_visible == false and any label read
// throws, which is what the no-leakage guard tests latch onto. Evaluation
// code unlocks an explicit copy.
class DomainDataset {
public:
    Tensor images;  // N x C x H x W, all pixels in [-1, 1]
    Domain domain = Domain::source;
    bool labels_visible = true;

    DomainDataset() = default;
    DomainDataset(Tensor images, std::vector<int> labels, Domain domain, bool labels_visible);

    std::int64_t size() const { return images.shape.empty() ? 0 : images.shape[0]; }
    std::int64_t channels() const { return images.shape[1]; }
    std::int64_t height() const { return images.shape[2]; }
    std::int64_t width() const { return images.shape[3]; }

    // Throw std::logic_error unless labels_visible.
    int label(std::int64_t i) const;
    int max_label() const;

    // Evaluation entry point: same data with the label gate open.
    DomainDataset unlocked() const;

private:
    std::vector<int> labels_;

    friend void save_dataset(const std::string& path, const DomainDataset& ds);
};

// Domain shift applied to target-side renders. A kind is active when its
// knob is non-default; every shift ends with a clamp to [-1, 1].
struct ShiftConfig {
    bool contrast_inversion = false;
    double texture_amplitude = 0.0;  // additive high-frequency texture
    double texture_frequency = 0.0;  // cycles across the image
    std::vector<double> channel_bias;  // per-channel offset; empty = none
    double elastic_scale = 0.0;        // smooth warp displacement, in pixels
    std::uint64_t seed = 0;

    void validate(std::int64_t channels) const;
    bool any() const;
};

// Renders n_classes x n_per_class samples per domain: procedural stroke
// glyphs with per-sample pose jitter, the target side independently drawn
// and then shifted. Source labels are visible, target labels are not.
std::pair<DomainDataset, DomainDataset> generate_domain_pair(int n_classes,
                                                             std::int64_t n_per_class,
                                                             std::int64_t image_size,
                                                             const ShiftConfig& shift,
                                                             std::uint64_t seed);

// Affine [0,1] <-> [-1,1] pixel maps; inputs outside the stated range throw.
Tensor normalize(const Tensor& raw01);
Tensor denormalize(const Tensor& pm1);

// Random patch location plus a random spatial permutation, shared across
// channels; the pixel-discriminator view. Draw order: row, col, permutation.
PatchPlan make_patch_plan(std::int64_t height, std::int64_t width, int patch_size, Rng& rng);

// Applies a fresh plan to one C x H x W image, returning the flat C*P*P view.
Tensor sample_patch_and_shuffle(const Tensor& image, int patch_size, Rng& rng);

// One epoch: a seeded permutation of [0, n) cut into batch_size chunks, the
// short remainder kept.
std::vector<std::vector<std::int64_t>> make_batches(const DomainDataset& ds,
                                                    std::int64_t batch_size, Rng& rng);

Tensor gather_images(const DomainDataset& ds, const std::vector<std::int64_t>& indices);
std::vector<int> gather_labels(const DomainDataset& ds, const std::vector<std::int64_t>& indices);

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

void save_dataset(const std::string& path, const DomainDataset& ds);
DomainDataset load_dataset(const std::string& path);

// Worker cap for sample-parallel work: hardware concurrency, clamped by the
// CALIBRA_THREADS environment variable when set.
int thread_budget();

}  // namespace calibra
