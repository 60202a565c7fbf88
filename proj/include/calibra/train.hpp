#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "calibra/data.hpp"
#include "calibra/losses.hpp"
#include "calibra/nets.hpp"
#include "calibra/params.hpp"

namespace calibra {

struct TrainConfig {
    double learning_rate = 1e-4;
    std::int64_t batch_size = 32;
    int epochs = 30;
    int disc_steps_per_cal_step = 1;
    double epsilon = 0.2;  // forwarded to calibrate unchanged
    int patch_size = 8;
    std::uint64_t seed = 0;
    int log_every = 10;  // steps between loss records
    // When set, adaptation training retains a copy of the calibrator at the
    // end of every epoch (CalibratorTrainResult::epoch_calibrators) so runs
    // can be dissected offline. Off by default; snapshots are never written
    // to disk by the trainer itself.
    bool keep_epoch_snapshots = false;

    void validate() const;
};

// One logged training step. Fields that a run does not produce stay zero
// (supervised source training has no discriminators, for example).
struct StepRecord {
    std::int64_t step = 0;
    double source_loss = 0.0;
    double feat_disc_loss = 0.0;
    double pixel_disc_loss = 0.0;
    double calibrator_loss = 0.0;
    AlignmentReport alignment;
};

struct EpochRecord {
    int epoch = 0;
    double source_accuracy = 0.0;   // training accuracy, or source-val accuracy
    double pixel_disc_loss = 0.0;   // epoch mean (zero for supervised runs)
    double feat_disc_loss = 0.0;    // epoch mean (zero for supervised runs)
};

// Append-only records of one run. wall_seconds is for console reporting
// only; the CSV forms carry no timing so artifacts stay byte-reproducible.
struct RunLog {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    double wall_seconds = 0.0;

    std::string steps_csv() const;
    std::string epochs_csv() const;
};

// ===== supervised source training =====

struct SourceTrainResult {
    ParameterSet classifier;
    RunLog log;
};

SourceTrainResult train_source(const NetworkSpec& cls_spec, ParameterSet classifier,
                               const DomainDataset& source, const TrainConfig& cfg);

// ===== adversarial calibration =====

// The trainable side of the adaptation game. The classifier stays outside:
// it is frozen input to the game, never part of it.
struct AdaptationNets {
    NetworkSpec calibrator_spec;
    ParameterSet calibrator;
    NetworkSpec pixel_disc_spec;
    ParameterSet pixel_disc;
    NetworkSpec feat_disc_spec;
    ParameterSet feat_disc;
};

// Fresh calibrator and discriminators sized for a classifier: the pixel
// discriminator reads shuffled patch_size patches, the feature discriminator
// reads the classifier's head input.
AdaptationNets make_adaptation_nets(const NetworkSpec& cls_spec, const CalibratorConfig& cal_cfg,
                                    int patch_size, std::uint64_t seed);

struct CalibratorTrainResult {
    AdaptationNets nets;  // trained calibrator and discriminators
    RunLog log;
    int selected_epoch = 0;  // epoch whose calibrator snapshot was kept
    // One entry per epoch when cfg.keep_epoch_snapshots is set, else empty.
    std::vector<ParameterSet> epoch_calibrators;
};

// The alternating game. Per paired batch: one discriminator update on all
// four groups (calibrated images entering as plain data), then — every
// disc_steps_per_cal_step iterations — one calibrator update against the
// frozen discriminators. The classifier must arrive frozen and is verified
// bit-identical afterwards; target labels are never read. The returned
// calibrator is the snapshot from the latest epoch that (a) keeps
// source-validation accuracy within 2 points of the starting point and
// (b) keeps the discriminators at least half-confused, falling back to the
// final state if no epoch qualifies (target labels play no part in selection).
CalibratorTrainResult train_calibrator(const NetworkSpec& cls_spec, const ParameterSet& classifier,
                                       AdaptationNets nets, const DomainDataset& source,
                                       const DomainDataset& target, const TrainConfig& cfg);

// ===== budget sweep =====

struct SweepRow {
    double epsilon = 0.0;
    double source_accuracy = 0.0;
    double target_accuracy = 0.0;
};

std::string sweep_csv(const std::vector<SweepRow>& rows);

// One independent calibrator training per budget, all sharing cfg.seed so
// the budget is the only difference; rows come back in argument order.
// Evaluation sets must be labeled. Rows may run on parallel workers.
std::vector<SweepRow> lsweep(const std::vector<double>& epsilons, const NetworkSpec& cls_spec,
                             const ParameterSet& classifier, const CalibratorConfig& cal_cfg,
                             const DomainDataset& source, const DomainDataset& target,
                             const DomainDataset& source_eval, const DomainDataset& target_eval,
                             const TrainConfig& cfg);

}  // namespace calibra
