#include "calibra/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace calibra {

namespace {

// Mean CE of one group's logits against a constant group index.
Var group_ce(Tape& tape, Var logits, int group, const char* op) {
    if (!logits.valid()) {
        throw std::invalid_argument(std::string(op) + ": missing logits for group " +
                                    std::to_string(group));
    }
    const Tensor& lv = tape.value(logits);
    if (lv.rank() != 2 || lv.shape[1] != kNumGroups) {
        throw std::invalid_argument(std::string(op) + ": group logits must be Bx4, got " +
                                    shape_str(lv.shape));
    }
    std::vector<int> targets(static_cast<std::size_t>(lv.shape[0]), group);
    return tape.cross_entropy(logits, targets);
}

}  // namespace

Var source_loss(Tape& tape, Var logits, std::span<const int> labels) {
    return tape.cross_entropy(logits, labels);
}

Var discriminator_loss(Tape& tape, const std::array<Var, kNumGroups>& group_logits) {
    Var total;
    for (int g = 0; g < kNumGroups; ++g) {
        Var ce = group_ce(tape, group_logits[static_cast<std::size_t>(g)], g, "discriminator_loss");
        total = g == 0 ? ce : tape.add(total, ce);
    }
    return total;
}

Var calibrator_loss(Tape& tape, Var dfeat_cal_source, Var dfeat_cal_target, Var dpix_cal_source,
                    Var dpix_cal_target) {
    const int toward = static_cast<int>(GroupLabel::source);
    Var total = group_ce(tape, dfeat_cal_source, toward, "calibrator_loss");
    total = tape.add(total, group_ce(tape, dfeat_cal_target, toward, "calibrator_loss"));
    total = tape.add(total, group_ce(tape, dpix_cal_source, toward, "calibrator_loss"));
    total = tape.add(total, group_ce(tape, dpix_cal_target, toward, "calibrator_loss"));
    return total;
}

double rms_mean_gap(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw std::invalid_argument("rms_mean_gap: inputs must be batched, got " +
                                    shape_str(a.shape) + " and " + shape_str(b.shape));
    }
    const std::int64_t na = a.shape[0], nb = b.shape[0];
    const std::int64_t ea = a.numel() / na;
    if (b.numel() / nb != ea) {
        throw std::invalid_argument("rms_mean_gap: per-sample shapes differ: " +
                                    shape_str(a.shape) + " vs " + shape_str(b.shape));
    }
    double acc = 0.0;
    for (std::int64_t j = 0; j < ea; ++j) {
        double ma = 0.0, mb = 0.0;
        for (std::int64_t i = 0; i < na; ++i) ma += a.data[static_cast<std::size_t>(i * ea + j)];
        for (std::int64_t i = 0; i < nb; ++i) mb += b.data[static_cast<std::size_t>(i * ea + j)];
        const double d = ma / static_cast<double>(na) - mb / static_cast<double>(nb);
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(ea));
}

AlignmentReport alignment_diagnostic(const NetworkSpec& cls_spec, const ParameterSet& cls,
                                     const NetworkSpec& cal_spec, const ParameterSet& cal,
                                     double epsilon, const Tensor& source_batch,
                                     const Tensor& target_batch) {
    if (source_batch.rank() != 4 || target_batch.rank() != 4 || source_batch.shape[0] < 1 ||
        target_batch.shape[0] < 1) {
        throw std::invalid_argument("alignment_diagnostic: batches must be non-empty NCHW");
    }
    Tape tape;
    TapedNet cls_net = tape_params(tape, cls_spec, cls);
    TapedNet cal_net = tape_params(tape, cal_spec, cal);
    Tensor src = source_batch;
    src.requires_grad = false;
    Tensor tgt = target_batch;
    tgt.requires_grad = false;
    Var xs = tape.constant(std::move(src));
    Var xt = tape.constant(std::move(tgt));
    Var cal_s = calibrate(tape, cal_net, xs, epsilon);
    Var cal_t = calibrate(tape, cal_net, xt, epsilon);

    AlignmentReport r;
    r.pixel_target_pair = rms_mean_gap(tape.value(xs), tape.value(cal_t));
    r.pixel_source_pair = rms_mean_gap(tape.value(xs), tape.value(cal_s));
    const Tensor& f_s = tape.value(classifier_forward(tape, cls_net, xs).features);
    const Tensor& f_ct = tape.value(classifier_forward(tape, cls_net, cal_t).features);
    const Tensor& f_cs = tape.value(classifier_forward(tape, cls_net, cal_s).features);
    r.feature_target_pair = rms_mean_gap(f_s, f_ct);
    r.feature_source_pair = rms_mean_gap(f_s, f_cs);
    return r;
}

}  // namespace calibra
