#include "calibra/eval.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace calibra {

// ===== confusion matrix =====

namespace {

std::size_t cm_index(const ConfusionMatrix& cm, std::int64_t t, std::int64_t p) {
    if (t < 0 || t >= cm.classes || p < 0 || p >= cm.classes) {
        throw std::invalid_argument("confusion matrix index (" + std::to_string(t) + ", " +
                                    std::to_string(p) + ") out of range for " +
                                    std::to_string(cm.classes) + " classes");
    }
    return static_cast<std::size_t>(t * cm.classes + p);
}

}  // namespace

std::int64_t ConfusionMatrix::at(std::int64_t true_class, std::int64_t predicted) const {
    return counts[cm_index(*this, true_class, predicted)];
}

std::int64_t& ConfusionMatrix::at(std::int64_t true_class, std::int64_t predicted) {
    return counts[cm_index(*this, true_class, predicted)];
}

std::int64_t ConfusionMatrix::total() const {
    std::int64_t acc = 0;
    for (std::int64_t c : counts) acc += c;
    return acc;
}

std::string ConfusionMatrix::to_csv() const {
    std::ostringstream os;
    for (std::int64_t t = 0; t < classes; ++t) {
        for (std::int64_t p = 0; p < classes; ++p) {
            if (p) os << ',';
            os << at(t, p);
        }
        os << '\n';
    }
    return os.str();
}

// ===== prediction =====

namespace {

constexpr std::int64_t kEvalBatch = 64;

int argmax_lowest(const Tensor& logits, std::int64_t row) {
    const std::int64_t k = logits.shape[1];
    int best = 0;
    double best_v = logits.at2(row, 0);
    for (std::int64_t j = 1; j < k; ++j) {
        const double v = logits.at2(row, j);
        if (v > best_v) {
            best_v = v;
            best = static_cast<int>(j);
        }
    }
    return best;
}

}  // namespace

std::vector<int> predict(const CalibratedClassifier& model, const DomainDataset& ds) {
    if (model.cls_spec == nullptr || model.cls == nullptr) {
        throw std::invalid_argument("predict: no classifier supplied");
    }
    if ((model.cal_spec == nullptr) != (model.cal == nullptr)) {
        throw std::invalid_argument("predict: calibrator spec and parameters must come together");
    }
    if (ds.size() == 0) throw std::invalid_argument("predict: empty dataset");

    const std::int64_t n = ds.size();
    const std::int64_t n_batches = (n + kEvalBatch - 1) / kEvalBatch;
    std::vector<int> preds(static_cast<std::size_t>(n), 0);

    auto run_batch = [&](std::int64_t b) {
        const std::int64_t lo = b * kEvalBatch;
        const std::int64_t hi = std::min(n, lo + kEvalBatch);
        std::vector<std::int64_t> idx(static_cast<std::size_t>(hi - lo));
        for (std::int64_t i = lo; i < hi; ++i) idx[static_cast<std::size_t>(i - lo)] = i;

        Tape tape;
        TapedNet cls_net = tape_params(tape, *model.cls_spec, *model.cls);
        Var x = tape.constant(gather_images(ds, idx));
        if (model.cal_spec != nullptr) {
            TapedNet cal_net = tape_params(tape, *model.cal_spec, *model.cal);
            x = calibrate(tape, cal_net, x, model.epsilon);
        }
        const Tensor& logits = tape.value(net_forward(tape, cls_net, x));
        for (std::int64_t i = lo; i < hi; ++i) {
            preds[static_cast<std::size_t>(i)] = argmax_lowest(logits, i - lo);
        }
    };

    const int workers = std::min<int>(thread_budget(), static_cast<int>(n_batches));
    if (workers <= 1) {
        for (std::int64_t b = 0; b < n_batches; ++b) run_batch(b);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                for (std::int64_t b = w; b < n_batches; b += workers) run_batch(b);
            });
        }
        for (std::thread& t : pool) t.join();
    }
    return preds;
}

double accuracy(const CalibratedClassifier& model, const DomainDataset& ds) {
    std::vector<int> preds = predict(model, ds);
    std::int64_t hits = 0;
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        if (preds[static_cast<std::size_t>(i)] == ds.label(i)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(ds.size());
}

ConfusionMatrix confusion(const CalibratedClassifier& model, const DomainDataset& ds) {
    std::vector<int> preds = predict(model, ds);
    const std::vector<std::int64_t> out_shape = model.cls_spec->validate();
    ConfusionMatrix cm;
    cm.classes = out_shape.back();
    cm.counts.assign(static_cast<std::size_t>(cm.classes * cm.classes), 0);
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        const int label = ds.label(i);
        if (label >= cm.classes) {
            throw std::invalid_argument("confusion: label " + std::to_string(label) +
                                        " exceeds the classifier's " +
                                        std::to_string(cm.classes) + " classes");
        }
        cm.at(label, preds[static_cast<std::size_t>(i)])++;
    }
    return cm;
}

// ===== segmentation-style metrics =====

SegMetrics seg_metrics(const ConfusionMatrix& cm) {
    if (cm.classes < 2) {
        throw std::invalid_argument("seg_metrics: need at least 2 classes, got " +
                                    std::to_string(cm.classes));
    }
    const std::int64_t total = cm.total();
    if (total == 0) throw std::invalid_argument("seg_metrics: empty confusion matrix");

    SegMetrics m;
    std::int64_t present = 0;
    std::int64_t trace = 0;
    for (std::int64_t k = 0; k < cm.classes; ++k) {
        std::int64_t row = 0, col = 0;
        for (std::int64_t j = 0; j < cm.classes; ++j) {
            row += cm.at(k, j);
            col += cm.at(j, k);
        }
        trace += cm.at(k, k);
        const std::int64_t uni = row + col - cm.at(k, k);
        if (row + col == 0) continue;  // IoU undefined for absent classes
        const double iou = static_cast<double>(cm.at(k, k)) / static_cast<double>(uni);
        ++present;
        m.mean_iou += iou;
        m.fw_iou += (static_cast<double>(row) / static_cast<double>(total)) * iou;
    }
    m.mean_iou /= static_cast<double>(present);
    m.pixel_acc = static_cast<double>(trace) / static_cast<double>(total);
    return m;
}

// ===== Fourier diagnostics =====

Tensor fft_spectrum(const Tensor& image) {
    if (image.rank() != 3) {
        throw std::invalid_argument("fft_spectrum: image must be CxHxW, got " +
                                    shape_str(image.shape));
    }
    const std::int64_t C = image.shape[0], H = image.shape[1], W = image.shape[2];
    if (H < 2 || W < 2) {
        throw std::invalid_argument("fft_spectrum: degenerate image size " + shape_str(image.shape));
    }

    Tensor out = Tensor::zeros({C, H, W});
    std::vector<std::complex<double>> rows(static_cast<std::size_t>(H * W));
    for (std::int64_t c = 0; c < C; ++c) {
        const double* src = image.data.data() + c * H * W;
        // Row pass then column pass of the separable transform.
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t kx = 0; kx < W; ++kx) {
                std::complex<double> acc = 0.0;
                for (std::int64_t x = 0; x < W; ++x) {
                    const double ang = -2.0 * std::numbers::pi * static_cast<double>(kx * x) /
                                       static_cast<double>(W);
                    acc += src[y * W + x] * std::complex<double>(std::cos(ang), std::sin(ang));
                }
                rows[static_cast<std::size_t>(y * W + kx)] = acc;
            }
        }
        for (std::int64_t kx = 0; kx < W; ++kx) {
            for (std::int64_t ky = 0; ky < H; ++ky) {
                std::complex<double> acc = 0.0;
                for (std::int64_t y = 0; y < H; ++y) {
                    const double ang = -2.0 * std::numbers::pi * static_cast<double>(ky * y) /
                                       static_cast<double>(H);
                    acc += rows[static_cast<std::size_t>(y * W + kx)] *
                           std::complex<double>(std::cos(ang), std::sin(ang));
                }
                // Shift the zero-frequency bin to the center.
                const std::int64_t sy = (ky + H / 2) % H;
                const std::int64_t sx = (kx + W / 2) % W;
                out.data[static_cast<std::size_t>((c * H + sy) * W + sx)] = std::abs(acc);
            }
        }
    }
    return out;
}

double high_freq_energy_ratio(const Tensor& spectrum, double cutoff_frac) {
    if (spectrum.rank() != 3) {
        throw std::invalid_argument("high_freq_energy_ratio: spectrum must be CxHxW, got " +
                                    shape_str(spectrum.shape));
    }
    if (!(cutoff_frac > 0.0 && cutoff_frac < 1.0)) {
        throw std::invalid_argument("high_freq_energy_ratio: cutoff fraction must lie in (0, 1)");
    }
    const std::int64_t C = spectrum.shape[0], H = spectrum.shape[1], W = spectrum.shape[2];
    const double radius = cutoff_frac * static_cast<double>(std::min(H, W));
    const double cy = static_cast<double>(H / 2), cx = static_cast<double>(W / 2);
    double inside = 0.0, total = 0.0;
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t y = 0; y < H; ++y) {
            for (std::int64_t x = 0; x < W; ++x) {
                const double mag = spectrum.data[static_cast<std::size_t>((c * H + y) * W + x)];
                const double e = mag * mag;
                total += e;
                const double dy = static_cast<double>(y) - cy;
                const double dx = static_cast<double>(x) - cx;
                if (std::sqrt(dy * dy + dx * dx) <= radius) inside += e;
            }
        }
    }
    if (total == 0.0) return 0.0;  // an all-zero image has no energy anywhere
    return (total - inside) / total;
}

// ===== trade-off report =====

double TradeoffReport::param_ratio() const {
    if (classifier_param_count == 0) return 0.0;
    return static_cast<double>(calibrator_param_count) /
           static_cast<double>(classifier_param_count);
}

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace

std::string TradeoffReport::to_csv() const {
    std::ostringstream os;
    os << "source_before,source_after,source_delta,target_before,target_after,target_delta,"
          "classifier_params,calibrator_params,param_ratio\n";
    os << fmt(source_before) << ',' << fmt(source_after) << ',' << fmt(source_delta()) << ','
       << fmt(target_before) << ',' << fmt(target_after) << ',' << fmt(target_delta()) << ','
       << classifier_param_count << ',' << calibrator_param_count << ',' << fmt(param_ratio())
       << '\n';
    return os.str();
}

std::string TradeoffReport::to_text() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "trade-off report\n";
    os << "  source accuracy: " << source_before << " -> " << source_after
       << " (delta " << source_delta() << ")\n";
    os << "  target accuracy: " << target_before << " -> " << target_after
       << " (delta " << target_delta() << ")\n";
    os << "  calibrator overhead: " << calibrator_param_count << " / " << classifier_param_count
       << " parameters (" << std::setprecision(2) << 100.0 * param_ratio() << "%)\n";
    return os.str();
}

TradeoffReport tradeoff_report(const CalibratedClassifier& model, const DomainDataset& source_eval,
                               const DomainDataset& target_eval) {
    CalibratedClassifier bare = model;
    bare.cal_spec = nullptr;
    bare.cal = nullptr;
    bare.epsilon = 0.0;

    TradeoffReport r;
    r.source_before = accuracy(bare, source_eval);
    r.target_before = accuracy(bare, target_eval);
    r.source_after = model.cal_spec ? accuracy(model, source_eval) : r.source_before;
    r.target_after = model.cal_spec ? accuracy(model, target_eval) : r.target_before;
    r.classifier_param_count = model.cls->total_count();
    r.calibrator_param_count = model.cal ? model.cal->total_count() : 0;
    return r;
}

// ===== image export =====

void write_pgm(const std::string& path, const Tensor& image) {
    if (image.rank() != 2) {
        throw std::invalid_argument("write_pgm: image must be HxW, got " + shape_str(image.shape));
    }
    double lo = image.data[0], hi = image.data[0];
    for (double v : image.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi > lo ? hi - lo : 1.0;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write image file: " + path);
    os << "P5\n" << image.shape[1] << ' ' << image.shape[0] << "\n255\n";
    for (double v : image.data) {
        const double level = 255.0 * (v - lo) / span;
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(level))));
    }
    if (!os) throw std::runtime_error("failed while writing image file: " + path);
}

}  // namespace calibra
