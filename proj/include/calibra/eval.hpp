#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "calibra/data.hpp"
#include "calibra/nets.hpp"
#include "calibra/params.hpp"
#include "calibra/tensor.hpp"

namespace calibra {

// A classifier with an optional calibration stage evaluated in front of it.
// Pointers are non-owning and must outlive the evaluation; a null calibrator
// means the classifier sees raw pixels.
struct CalibratedClassifier {
    const NetworkSpec* cls_spec = nullptr;
    const ParameterSet* cls = nullptr;
    const NetworkSpec* cal_spec = nullptr;
    const ParameterSet* cal = nullptr;
    double epsilon = 0.0;
};

// Counts with row = true class, column = predicted class.
struct ConfusionMatrix {
    std::int64_t classes = 0;
    std::vector<std::int64_t> counts;  // classes x classes, row-major

    std::int64_t at(std::int64_t true_class, std::int64_t predicted) const;
    std::int64_t& at(std::int64_t true_class, std::int64_t predicted);
    std::int64_t total() const;
    std::string to_csv() const;
};

// Predicted class per sample, in dataset order; argmax ties resolve to the
// lowest class index. Parallel over samples, result independent of workers.
std::vector<int> predict(const CalibratedClassifier& model, const DomainDataset& ds);

// Mean of [prediction == label]. The dataset must have visible labels.
double accuracy(const CalibratedClassifier& model, const DomainDataset& ds);

ConfusionMatrix confusion(const CalibratedClassifier& model, const DomainDataset& ds);

struct SegMetrics {
    double mean_iou = 0.0;   // classes absent from rows and columns excluded
    double fw_iou = 0.0;     // IoU weighted by ground-truth class frequency
    double pixel_acc = 0.0;  // trace / total
};

SegMetrics seg_metrics(const ConfusionMatrix& cm);

// Per-channel magnitude of the 2-D discrete Fourier transform, shifted so
// the zero-frequency bin sits at (H/2, W/2). Shape is preserved.
Tensor fft_spectrum(const Tensor& image);  // C x H x W

// Fraction of spectral energy outside the centered disk of radius
// cutoff_frac * min(H, W).
double high_freq_energy_ratio(const Tensor& spectrum, double cutoff_frac);

inline constexpr double kDefaultFreqCutoff = 0.25;

// Source/target accuracy with and without the calibration stage, plus the
// parameter overhead of carrying it.
struct TradeoffReport {
    double source_before = 0.0;
    double source_after = 0.0;
    double target_before = 0.0;
    double target_after = 0.0;
    std::int64_t classifier_param_count = 0;
    std::int64_t calibrator_param_count = 0;

    double source_delta() const { return source_after - source_before; }
    double target_delta() const { return target_after - target_before; }
    double param_ratio() const;

    std::string to_csv() const;
    std::string to_text() const;
};

TradeoffReport tradeoff_report(const CalibratedClassifier& model,
                               const DomainDataset& source_eval,
                               const DomainDataset& target_eval);

// Grayscale export of a 2-D tensor, min/max scaled to 8-bit levels.
void write_pgm(const std::string& path, const Tensor& image);

}  // namespace calibra
