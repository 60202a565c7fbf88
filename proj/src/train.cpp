#include "calibra/train.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "calibra/adam.hpp"
#include "calibra/eval.hpp"
#include "calibra/rng.hpp"

namespace calibra {

// ===== config and logs =====

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0)) {
        throw std::invalid_argument("train config: learning rate must be >= 0");
    }
    if (batch_size < 1 || epochs < 1 || disc_steps_per_cal_step < 1 || patch_size < 1 ||
        log_every < 1) {
        throw std::invalid_argument("train config: sizes and cadences must be positive");
    }
    if (!(epsilon >= 0.0 && epsilon <= 2.0)) {
        throw std::invalid_argument("train config: epsilon must lie in [0, 2]");
    }
}

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace

std::string RunLog::steps_csv() const {
    std::ostringstream os;
    os << "step,source_loss,feat_disc_loss,pixel_disc_loss,calibrator_loss,"
          "align_pixel_target,align_pixel_source,align_feature_target,align_feature_source\n";
    for (const StepRecord& r : steps) {
        os << r.step << ',' << fmt(r.source_loss) << ',' << fmt(r.feat_disc_loss) << ','
           << fmt(r.pixel_disc_loss) << ',' << fmt(r.calibrator_loss) << ','
           << fmt(r.alignment.pixel_target_pair) << ',' << fmt(r.alignment.pixel_source_pair)
           << ',' << fmt(r.alignment.feature_target_pair) << ','
           << fmt(r.alignment.feature_source_pair) << '\n';
    }
    return os.str();
}

std::string RunLog::epochs_csv() const {
    std::ostringstream os;
    os << "epoch,source_accuracy,pixel_disc_loss,feat_disc_loss\n";
    for (const EpochRecord& r : epochs) {
        os << r.epoch << ',' << fmt(r.source_accuracy) << ',' << fmt(r.pixel_disc_loss) << ','
           << fmt(r.feat_disc_loss) << '\n';
    }
    return os.str();
}

// ===== shared helpers =====

namespace {

std::vector<Tensor> grads_of(const Tape& tape, const TapedNet& net) {
    std::vector<Tensor> g;
    g.reserve(net.params.size());
    for (Var p : net.params) g.push_back(tape.grad(p));
    return g;
}

std::vector<PatchPlan> draw_plans(const Tensor& batch, int patch, Rng& rng) {
    std::vector<PatchPlan> plans;
    plans.reserve(static_cast<std::size_t>(batch.shape[0]));
    for (std::int64_t n = 0; n < batch.shape[0]; ++n) {
        plans.push_back(make_patch_plan(batch.shape[2], batch.shape[3], patch, rng));
    }
    return plans;
}

// Feature vectors as the discriminator sees them: one flat row per sample.
Var as_rows(Tape& tape, Var x) {
    const Tensor& v = tape.value(x);
    if (v.rank() == 2) return x;
    return tape.reshape(x, {v.shape[0], v.numel() / v.shape[0]});
}

double now_minus(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// ===== supervised source training =====

SourceTrainResult train_source(const NetworkSpec& cls_spec, ParameterSet classifier,
                               const DomainDataset& source, const TrainConfig& cfg) {
    cfg.validate();
    if (!source.labels_visible) {
        throw std::invalid_argument("train_source: source dataset must be labeled");
    }
    if (classifier.frozen) {
        throw std::invalid_argument("train_source: classifier is frozen");
    }
    const auto t0 = std::chrono::steady_clock::now();

    AdamState adam = make_adam_state(classifier, AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8});
    Rng rng(cfg.seed);
    RunLog log;
    std::int64_t step = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (const auto& batch : make_batches(source, cfg.batch_size, rng)) {
            ++step;
            Tensor xs = gather_images(source, batch);
            std::vector<int> ys = gather_labels(source, batch);

            Tape tape;
            TapedNet net = tape_params(tape, cls_spec, classifier, true);
            Var loss = source_loss(tape, net_forward(tape, net, tape.constant(std::move(xs))), ys);
            tape.backward(loss);
            adam_step(classifier, adam, grads_of(tape, net));

            if ((step - 1) % cfg.log_every == 0) {
                StepRecord r;
                r.step = step;
                r.source_loss = tape.value(loss).scalar_value();
                log.steps.push_back(r);
            }
        }
        CalibratedClassifier model{&cls_spec, &classifier, nullptr, nullptr, 0.0};
        log.epochs.push_back({epoch, accuracy(model, source)});
    }
    log.wall_seconds = now_minus(t0);
    return {std::move(classifier), std::move(log)};
}

// ===== adversarial calibration =====

AdaptationNets make_adaptation_nets(const NetworkSpec& cls_spec, const CalibratorConfig& cal_cfg,
                                    int patch_size, std::uint64_t seed) {
    if (patch_size < 1 || patch_size > cal_cfg.image_size) {
        throw std::invalid_argument("adaptation nets: patch size " + std::to_string(patch_size) +
                                    " does not fit " + std::to_string(cal_cfg.image_size) +
                                    "-pixel images");
    }
    AdaptationNets nets;
    nets.calibrator_spec = calibrator_spec(cal_cfg);
    nets.calibrator = init_parameters(nets.calibrator_spec, derive_seed(seed, 1));
    const std::int64_t pix_dim =
        cal_cfg.in_channels * static_cast<std::int64_t>(patch_size) * patch_size;
    nets.pixel_disc_spec = discriminator_spec(DiscKind::pixel, pix_dim);
    nets.pixel_disc = init_parameters(nets.pixel_disc_spec, derive_seed(seed, 2));
    nets.feat_disc_spec = discriminator_spec(DiscKind::feature, classifier_feature_width(cls_spec));
    nets.feat_disc = init_parameters(nets.feat_disc_spec, derive_seed(seed, 3));
    return nets;
}

CalibratorTrainResult train_calibrator(const NetworkSpec& cls_spec, const ParameterSet& classifier,
                                       AdaptationNets nets, const DomainDataset& source,
                                       const DomainDataset& target, const TrainConfig& cfg) {
    cfg.validate();
    if (!classifier.frozen) {
        throw std::invalid_argument("train_calibrator: classifier must arrive frozen");
    }
    if (!source.labels_visible) {
        throw std::invalid_argument("train_calibrator: source dataset must be labeled");
    }
    if (target.labels_visible) {
        throw std::invalid_argument("train_calibrator: target labels must be withheld");
    }
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t classifier_hash = classifier.content_hash();

    // Source-validation slice for snapshot selection: the class-interleaved
    // tail, so it stays balanced without consuming fresh randomness.
    const std::int64_t val_n = std::max<std::int64_t>(1, source.size() / 5);
    std::vector<std::int64_t> val_idx(static_cast<std::size_t>(val_n));
    for (std::int64_t i = 0; i < val_n; ++i) val_idx[static_cast<std::size_t>(i)] = source.size() - val_n + i;
    DomainDataset source_val(gather_images(source, val_idx), gather_labels(source, val_idx),
                             Domain::source, true);

    auto val_accuracy = [&](const ParameterSet& cal) {
        CalibratedClassifier m{&cls_spec, &classifier, &nets.calibrator_spec, &cal, cfg.epsilon};
        return accuracy(m, source_val);
    };
    const double initial_val_acc = val_accuracy(nets.calibrator);

    AdamState cal_adam = make_adam_state(nets.calibrator, AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8});
    AdamState pix_adam = make_adam_state(nets.pixel_disc, AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8});
    AdamState feat_adam = make_adam_state(nets.feat_disc, AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8});

    Rng rng(cfg.seed);
    RunLog log;
    std::int64_t step = 0;
    double last_cal_loss = 0.0;

    ParameterSet best_cal;
    int best_epoch = 0;
    std::vector<ParameterSet> epoch_snapshots;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        // Cosine learning-rate decay, floored at 10% of the base rate. The
        // adversarial game orbits its equilibrium at a radius set by the step
        // size, so shrinking the step late in the run parks every player near
        // the converged point instead of on a swing of the orbit.
        const double progress =
            cfg.epochs > 1 ? static_cast<double>(epoch - 1) / (cfg.epochs - 1) : 0.0;
        const double lr_epoch =
            cfg.learning_rate * (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * progress)));
        cal_adam.config.lr = lr_epoch;
        pix_adam.config.lr = lr_epoch;
        feat_adam.config.lr = lr_epoch;

        auto src_batches = make_batches(source, cfg.batch_size, rng);
        auto tgt_batches = make_batches(target, cfg.batch_size, rng);
        const std::size_t iters = std::min(src_batches.size(), tgt_batches.size());
        double epoch_pix_loss = 0.0;
        double epoch_feat_loss = 0.0;

        for (std::size_t it = 0; it < iters; ++it) {
            ++step;
            Tensor xs = gather_images(source, src_batches[it]);
            std::vector<int> ys = gather_labels(source, src_batches[it]);
            Tensor xt = gather_images(target, tgt_batches[it]);
            const bool log_step = (step - 1) % cfg.log_every == 0;

            // ---- discriminator update: all four groups, calibrated images
            // entering as plain data ----
            StepRecord rec;
            rec.step = step;
            {
                Tape tape;
                TapedNet cls = tape_params(tape, cls_spec, classifier);
                TapedNet cal = tape_params(tape, nets.calibrator_spec, nets.calibrator, false);
                TapedNet pixd = tape_params(tape, nets.pixel_disc_spec, nets.pixel_disc, true);
                TapedNet featd = tape_params(tape, nets.feat_disc_spec, nets.feat_disc, true);

                Var vs = tape.constant(xs);
                Var vt = tape.constant(xt);
                Var cs = calibrate(tape, cal, vs, cfg.epsilon);
                Var ct = calibrate(tape, cal, vt, cfg.epsilon);
                const std::array<Var, kNumGroups> groups = {vs, vt, cs, ct};

                std::array<Var, kNumGroups> pix_logits;
                std::array<ClassifierOut, kNumGroups> cls_out;
                std::array<Var, kNumGroups> feat_logits;
                for (int g = 0; g < kNumGroups; ++g) {
                    const auto& gv = groups[static_cast<std::size_t>(g)];
                    auto plans = draw_plans(tape.value(gv), cfg.patch_size, rng);
                    pix_logits[static_cast<std::size_t>(g)] =
                        net_forward(tape, pixd, tape.patch_gather(gv, std::move(plans)));
                    cls_out[static_cast<std::size_t>(g)] = classifier_forward(tape, cls, gv);
                    feat_logits[static_cast<std::size_t>(g)] = net_forward(
                        tape, featd, as_rows(tape, cls_out[static_cast<std::size_t>(g)].features));
                }
                Var pix_loss = discriminator_loss(tape, pix_logits);
                Var feat_loss = discriminator_loss(tape, feat_logits);
                tape.backward(tape.add(pix_loss, feat_loss));
                adam_step(nets.pixel_disc, pix_adam, grads_of(tape, pixd));
                adam_step(nets.feat_disc, feat_adam, grads_of(tape, featd));

                rec.pixel_disc_loss = tape.value(pix_loss).scalar_value();
                rec.feat_disc_loss = tape.value(feat_loss).scalar_value();
                // Monitored source health: supervised loss on calibrated
                // source images, read off this tape for free.
                rec.source_loss =
                    tape.value(source_loss(tape, cls_out[2].logits, ys)).scalar_value();
                if (log_step) {
                    rec.alignment.pixel_target_pair = rms_mean_gap(tape.value(vs), tape.value(ct));
                    rec.alignment.pixel_source_pair = rms_mean_gap(tape.value(vs), tape.value(cs));
                    const Tensor& f_s = tape.value(cls_out[0].features);
                    rec.alignment.feature_target_pair = rms_mean_gap(f_s, tape.value(cls_out[3].features));
                    rec.alignment.feature_source_pair = rms_mean_gap(f_s, tape.value(cls_out[2].features));
                }
            }

            // ---- calibrator update against the frozen discriminators ----
            if (step % cfg.disc_steps_per_cal_step == 0) {
                Tape tape;
                TapedNet cls = tape_params(tape, cls_spec, classifier);
                TapedNet cal = tape_params(tape, nets.calibrator_spec, nets.calibrator, true);
                TapedNet pixd = tape_params(tape, nets.pixel_disc_spec, nets.pixel_disc, false);
                TapedNet featd = tape_params(tape, nets.feat_disc_spec, nets.feat_disc, false);

                Var vs = tape.constant(std::move(xs));
                Var vt = tape.constant(std::move(xt));
                Var cs = calibrate(tape, cal, vs, cfg.epsilon);
                Var ct = calibrate(tape, cal, vt, cfg.epsilon);
                ClassifierOut out_cs = classifier_forward(tape, cls, cs);
                ClassifierOut out_ct = classifier_forward(tape, cls, ct);
                Var dfeat_cs = net_forward(tape, featd, as_rows(tape, out_cs.features));
                Var dfeat_ct = net_forward(tape, featd, as_rows(tape, out_ct.features));
                Var dpix_cs = net_forward(
                    tape, pixd, tape.patch_gather(cs, draw_plans(tape.value(cs), cfg.patch_size, rng)));
                Var dpix_ct = net_forward(
                    tape, pixd, tape.patch_gather(ct, draw_plans(tape.value(ct), cfg.patch_size, rng)));
                Var loss = calibrator_loss(tape, dfeat_cs, dfeat_ct, dpix_cs, dpix_ct);
                tape.backward(loss);
                adam_step(nets.calibrator, cal_adam, grads_of(tape, cal));

                last_cal_loss = tape.value(loss).scalar_value();
            }
            rec.calibrator_loss = last_cal_loss;
            epoch_pix_loss += rec.pixel_disc_loss;
            epoch_feat_loss += rec.feat_disc_loss;
            if (log_step) log.steps.push_back(rec);
        }

        // Snapshot selection. The adversarial losses drift while alignment
        // keeps improving, so they are useless as a ranking score; an epoch
        // qualifies on two gates instead and the latest qualifying epoch is
        // kept. Gate one: source-domain validation accuracy within 2 points
        // of the incoming classifier's, guarding against late-run collapse
        // without ever reading a target label. Gate two: the combined
        // discriminator loss at or above half the fully-confused level
        // (each head pays kNumGroups*ln(kNumGroups) when it cannot separate
        // the groups at all), discarding epochs where the discriminators
        // dominate outright — there the calibrator has stopped playing.
        const double epoch_acc = val_accuracy(nets.calibrator);
        const double denom = iters > 0 ? static_cast<double>(iters) : 1.0;
        const double disc_total = (epoch_pix_loss + epoch_feat_loss) / denom;
        const double confusion_floor =
            static_cast<double>(kNumGroups) * std::log(static_cast<double>(kNumGroups));
        log.epochs.push_back({epoch, epoch_acc, epoch_pix_loss / denom, epoch_feat_loss / denom});
        if (cfg.keep_epoch_snapshots) epoch_snapshots.push_back(nets.calibrator);
        if (epoch_acc >= initial_val_acc - 0.02 && disc_total >= confusion_floor) {
            best_cal = nets.calibrator;
            best_epoch = epoch;
        }
    }

    if (best_epoch > 0) {
        nets.calibrator = std::move(best_cal);
    } else {
        best_epoch = cfg.epochs;  // nothing qualified; keep the final state
    }

    if (classifier.content_hash() != classifier_hash) {
        throw std::logic_error("train_calibrator: frozen classifier was modified");
    }
    log.wall_seconds = now_minus(t0);
    return {std::move(nets), std::move(log), best_epoch, std::move(epoch_snapshots)};
}

// ===== budget sweep =====

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << "epsilon,source_accuracy,target_accuracy\n";
    for (const SweepRow& r : rows) {
        os << fmt(r.epsilon) << ',' << fmt(r.source_accuracy) << ',' << fmt(r.target_accuracy)
           << '\n';
    }
    return os.str();
}

std::vector<SweepRow> lsweep(const std::vector<double>& epsilons, const NetworkSpec& cls_spec,
                             const ParameterSet& classifier, const CalibratorConfig& cal_cfg,
                             const DomainDataset& source, const DomainDataset& target,
                             const DomainDataset& source_eval, const DomainDataset& target_eval,
                             const TrainConfig& cfg) {
    if (epsilons.size() < 2) {
        throw std::invalid_argument("lsweep: need at least 2 epsilon values");
    }
    for (double e : epsilons) {
        if (!(e >= 0.0 && e <= 2.0)) {
            throw std::invalid_argument("lsweep: epsilon " + std::to_string(e) +
                                        " outside [0, 2]");
        }
    }
    if (!source_eval.labels_visible || !target_eval.labels_visible) {
        throw std::invalid_argument("lsweep: evaluation sets must be labeled");
    }

    std::vector<SweepRow> rows(epsilons.size());
    auto run_row = [&](std::size_t i) {
        TrainConfig row_cfg = cfg;
        row_cfg.epsilon = epsilons[i];
        CalibratorConfig row_cal = cal_cfg;
        row_cal.epsilon = epsilons[i];
        // Nets are seeded exactly as a standalone adaptation run with this
        // seed would be, so the row at the configured epsilon reproduces it.
        AdaptationNets nets =
            make_adaptation_nets(cls_spec, row_cal, cfg.patch_size, derive_seed(cfg.seed, 2));
        CalibratorTrainResult result =
            train_calibrator(cls_spec, classifier, std::move(nets), source, target, row_cfg);
        CalibratedClassifier model{&cls_spec, &classifier, &result.nets.calibrator_spec,
                                   &result.nets.calibrator, epsilons[i]};
        rows[i] = {epsilons[i], accuracy(model, source_eval), accuracy(model, target_eval)};
    };

    const int workers = std::min<int>(thread_budget(), static_cast<int>(epsilons.size()));
    if (workers <= 1) {
        for (std::size_t i = 0; i < epsilons.size(); ++i) run_row(i);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t i = static_cast<std::size_t>(w); i < epsilons.size();
                     i += static_cast<std::size_t>(workers)) {
                    run_row(i);
                }
            });
        }
        for (std::thread& t : pool) t.join();
    }
    return rows;
}

}  // namespace calibra
