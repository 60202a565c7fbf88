#pragma once

#include <array>
#include <span>

#include "calibra/autograd.hpp"
#include "calibra/nets.hpp"
#include "calibra/tensor.hpp"

namespace calibra {

// The four discriminator groups, encoded as class indices in this fixed
// order everywhere: raw source, raw target, calibrated source, calibrated
// target.
enum class GroupLabel : int {
    source = 0,
    target = 1,
    calibrated_source = 2,
    calibrated_target = 3,
};

inline constexpr int kNumGroups = 4;

// One homogeneous batch headed for a discriminator: images or feature
// vectors that all carry the same group label.
struct GroupBatch {
    Tensor data;
    GroupLabel label = GroupLabel::source;
};

// Mean categorical cross-entropy of classifier logits against labels; the
// supervised objective for source training.
Var source_loss(Tape& tape, Var logits, std::span<const int> labels);

// Sum over the four groups of the mean cross-entropy of that group's
// discriminator logits (B x 4) against its own group index, accumulated
// left-to-right in group order. Callers must feed calibrated groups as
// constants: this loss trains the discriminator, never the calibrator.
Var discriminator_loss(Tape& tape, const std::array<Var, kNumGroups>& group_logits);

// Sum of four mean cross-entropy terms pushing both calibrated groups, under
// both discriminators, toward the raw-source group. Accumulated in argument
// order. Gradients must reach only the calibrator: run it on a tape where
// discriminator and classifier parameters do not require grad.
Var calibrator_loss(Tape& tape, Var dfeat_cal_source, Var dfeat_cal_target, Var dpix_cal_source,
                    Var dpix_cal_target);

// Monitoring proxy for the distribution-alignment constraints: RMS gaps
// between batch-mean images and batch-mean features of (source vs calibrated
// target) and (source vs calibrated source). Never optimized.
struct AlignmentReport {
    double pixel_target_pair = 0.0;    // mean(X_s) vs mean(G_c(X_t)), pixel space
    double pixel_source_pair = 0.0;    // mean(X_s) vs mean(G_c(X_s)), pixel space
    double feature_target_pair = 0.0;  // same pairs, feature space
    double feature_source_pair = 0.0;
};

AlignmentReport alignment_diagnostic(const NetworkSpec& cls_spec, const ParameterSet& cls,
                                     const NetworkSpec& cal_spec, const ParameterSet& cal,
                                     double epsilon, const Tensor& source_batch,
                                     const Tensor& target_batch);

// The alignment unit: root-mean-square gap between the per-element means of
// two batches (first axis = batch).
double rms_mean_gap(const Tensor& a, const Tensor& b);

}  // namespace calibra
