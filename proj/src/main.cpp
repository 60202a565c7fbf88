// Command-line driver for the calibration pipeline. Every command is a pure
// function of (config file, input files, seed): artifact directories come out
// byte-identical on re-runs, and no command ever writes to its inputs.

#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "calibra/config.hpp"
#include "calibra/data.hpp"
#include "calibra/eval.hpp"
#include "calibra/nets.hpp"
#include "calibra/rng.hpp"
#include "calibra/train.hpp"

namespace {

using namespace calibra;

// ===== config -> typed settings =====

std::uint64_t resolve_seed(Config& cfg, const std::optional<std::uint64_t>& flag) {
    const std::uint64_t seed = flag ? *flag : cfg.get_uint64_or("seed", 0);
    cfg.set("seed", std::to_string(seed));  // manifest echoes the resolved value
    return seed;
}

ShiftConfig shift_from(const Config& cfg, std::uint64_t seed) {
    ShiftConfig s;
    s.contrast_inversion = cfg.get_bool_or("shift.contrast_inversion", false);
    s.texture_amplitude = cfg.get_double_or("shift.texture_amplitude", 0.0);
    s.texture_frequency = cfg.get_double_or("shift.texture_frequency", 0.0);
    s.elastic_scale = cfg.get_double_or("shift.elastic_scale", 0.0);
    if (cfg.has("shift.channel_bias")) {
        s.channel_bias = cfg.get_double_list("shift.channel_bias");
    }
    s.seed = derive_seed(seed, 1001);
    return s;
}

TrainConfig train_from(const Config& cfg, std::uint64_t seed) {
    TrainConfig t;
    t.learning_rate = cfg.get_double_or("train.learning_rate", t.learning_rate);
    t.batch_size = cfg.get_int_or("train.batch_size", t.batch_size);
    t.epochs = static_cast<int>(cfg.get_int_or("train.epochs", t.epochs));
    t.disc_steps_per_cal_step = static_cast<int>(
        cfg.get_int_or("train.disc_steps_per_cal_step", t.disc_steps_per_cal_step));
    t.epsilon = cfg.get_double_or("train.epsilon", t.epsilon);
    t.patch_size = static_cast<int>(cfg.get_int_or("train.patch_size", t.patch_size));
    t.log_every = static_cast<int>(cfg.get_int_or("train.log_every", t.log_every));
    t.seed = seed;
    t.validate();
    return t;
}

CalibratorConfig cal_from(const Config& cfg, double epsilon, const DomainDataset& ds) {
    CalibratorConfig c;
    c.epsilon = epsilon;
    c.width = cfg.get_int_or("cal.width", c.width);
    c.depth = static_cast<int>(cfg.get_int_or("cal.depth", c.depth));
    c.skips = cfg.get_bool_or("cal.skips", c.skips);
    c.in_channels = ds.channels();
    c.image_size = ds.height();
    return c;
}

double resolve_epsilon(const Config& cfg, const std::optional<double>& flag) {
    return flag ? *flag : cfg.get_double("train.epsilon");
}

void check_matches_classifier(const NetworkSpec& spec, const DomainDataset& ds,
                              const std::string& name) {
    if (ds.channels() != spec.input_shape[0] || ds.height() != spec.input_shape[1] ||
        ds.width() != spec.input_shape[2]) {
        std::ostringstream os;
        os << name << ": dataset shape " << ds.channels() << 'x' << ds.height() << 'x'
           << ds.width() << " does not match classifier input " << spec.input_shape[0] << 'x'
           << spec.input_shape[1] << 'x' << spec.input_shape[2];
        throw std::invalid_argument(os.str());
    }
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

// ===== commands =====

void cmd_gen_data(Config cfg, const std::string& out, std::uint64_t seed) {
    const int classes = static_cast<int>(cfg.get_int("data.classes"));
    const std::int64_t per_class = cfg.get_int("data.per_class");
    const std::int64_t image_size = cfg.get_int("data.image_size");
    ShiftConfig shift = shift_from(cfg, seed);

    RunManifest m;
    m.command = "gen-data";
    m.seed = seed;
    m.config = cfg;
    m.outputs.emplace_back("source", out + "/source.cald");
    m.outputs.emplace_back("target", out + "/target.cald");
    write_manifest(out, m);

    auto [source, target] = generate_domain_pair(classes, per_class, image_size, shift, seed);
    save_dataset(out + "/source.cald", source);
    save_dataset(out + "/target.cald", target);
    std::cout << "[INFO] wrote " << source.size() << " source + " << target.size()
              << " target samples (" << classes << " classes, " << image_size << "x"
              << image_size << ")\n";
}

void cmd_train_source(Config cfg, const std::string& out, std::uint64_t seed) {
    const std::string data_path = cfg.get_string("data.source");
    DomainDataset source = load_dataset(data_path);
    NetworkSpec spec = classifier_spec_desk();
    check_matches_classifier(spec, source, "train-source");
    TrainConfig tcfg = train_from(cfg, seed);

    RunManifest m;
    m.command = "train-source";
    m.seed = seed;
    m.config = cfg;
    m.inputs.emplace_back("source", data_path);
    m.outputs.emplace_back("classifier", out + "/classifier.calc");
    m.outputs.emplace_back("steps", out + "/steps.csv");
    m.outputs.emplace_back("epochs", out + "/epochs.csv");
    write_manifest(out, m);

    ParameterSet init = init_parameters(spec, derive_seed(seed, 1));
    SourceTrainResult result = train_source(spec, std::move(init), source, tcfg);

    save_checkpoint(out + "/classifier.calc", spec, result.classifier);
    write_text_file(out + "/steps.csv", result.log.steps_csv());
    write_text_file(out + "/epochs.csv", result.log.epochs_csv());
    std::cout << "[INFO] final train accuracy " << result.log.epochs.back().source_accuracy
              << " after " << result.log.epochs.size() << " epochs in " << std::fixed
              << std::setprecision(1) << result.log.wall_seconds << "s\n";
}

void cmd_train_calibrator(Config cfg, const std::string& out, std::uint64_t seed,
                          const std::string& source_ckpt, const std::optional<double>& eps_flag) {
    const std::string src_path = cfg.get_string("data.source");
    const std::string tgt_path = cfg.get_string("data.target");
    DomainDataset source = load_dataset(src_path);
    DomainDataset target = load_dataset(tgt_path);

    NetworkSpec cls_spec = classifier_spec_desk();
    check_matches_classifier(cls_spec, source, "train-calibrator");
    ParameterSet classifier = load_checkpoint(source_ckpt, cls_spec);
    classifier.freeze();
    const std::uint64_t hash_before = classifier.content_hash();

    TrainConfig tcfg = train_from(cfg, seed);
    tcfg.epsilon = eps_flag ? *eps_flag : tcfg.epsilon;
    cfg.set("train.epsilon", fmt(tcfg.epsilon));
    CalibratorConfig cal_cfg = cal_from(cfg, tcfg.epsilon, source);

    RunManifest m;
    m.command = "train-calibrator";
    m.seed = seed;
    m.config = cfg;
    m.inputs.emplace_back("source", src_path);
    m.inputs.emplace_back("target", tgt_path);
    m.inputs.emplace_back("classifier", source_ckpt);
    m.outputs.emplace_back("calibrator", out + "/calibrator.calc");
    m.outputs.emplace_back("pixel_disc", out + "/pixel_disc.calc");
    m.outputs.emplace_back("feat_disc", out + "/feat_disc.calc");
    m.outputs.emplace_back("steps", out + "/steps.csv");
    m.outputs.emplace_back("epochs", out + "/epochs.csv");
    m.outputs.emplace_back("freeze_check", out + "/freeze_check.txt");
    write_manifest(out, m);

    AdaptationNets nets =
        make_adaptation_nets(cls_spec, cal_cfg, tcfg.patch_size, derive_seed(seed, 2));
    CalibratorTrainResult result =
        train_calibrator(cls_spec, classifier, std::move(nets), source, target, tcfg);
    const std::uint64_t hash_after = classifier.content_hash();

    save_checkpoint(out + "/calibrator.calc", result.nets.calibrator_spec,
                    result.nets.calibrator);
    save_checkpoint(out + "/pixel_disc.calc", result.nets.pixel_disc_spec,
                    result.nets.pixel_disc);
    save_checkpoint(out + "/feat_disc.calc", result.nets.feat_disc_spec, result.nets.feat_disc);
    write_text_file(out + "/steps.csv", result.log.steps_csv());
    write_text_file(out + "/epochs.csv", result.log.epochs_csv());
    write_text_file(out + "/freeze_check.txt",
                    "classifier_hash_before=" + hex64(hash_before) +
                        "\nclassifier_hash_after=" + hex64(hash_after) + "\nidentical=" +
                        (hash_before == hash_after ? "true" : "false") + "\n");
    std::cout << "[INFO] kept calibrator from epoch " << result.selected_epoch << " of "
              << tcfg.epochs << "; trained in " << std::fixed << std::setprecision(1)
              << result.log.wall_seconds << "s\n";
}

void cmd_eval(Config cfg, const std::string& out, const std::string& source_ckpt,
              const std::string& calibrator_ckpt, const std::optional<double>& eps_flag) {
    const std::string src_path = cfg.get_string("data.source_eval");
    const std::string tgt_path = cfg.get_string("data.target_eval");
    DomainDataset source_eval = load_dataset(src_path).unlocked();
    DomainDataset target_eval = load_dataset(tgt_path).unlocked();

    NetworkSpec cls_spec = classifier_spec_desk();
    check_matches_classifier(cls_spec, source_eval, "eval");
    ParameterSet classifier = load_checkpoint(source_ckpt, cls_spec);

    NetworkSpec cal_spec;
    ParameterSet calibrator;
    CalibratedClassifier model{&cls_spec, &classifier, nullptr, nullptr, 0.0};
    if (!calibrator_ckpt.empty()) {
        const double epsilon = resolve_epsilon(cfg, eps_flag);
        cfg.set("train.epsilon", fmt(epsilon));
        cal_spec = calibrator_spec(cal_from(cfg, epsilon, source_eval));
        calibrator = load_checkpoint(calibrator_ckpt, cal_spec);
        model.cal_spec = &cal_spec;
        model.cal = &calibrator;
        model.epsilon = epsilon;
    }

    RunManifest m;
    m.command = "eval";
    m.seed = 0;
    m.config = cfg;
    m.inputs.emplace_back("source_eval", src_path);
    m.inputs.emplace_back("target_eval", tgt_path);
    m.inputs.emplace_back("classifier", source_ckpt);
    if (!calibrator_ckpt.empty()) m.inputs.emplace_back("calibrator", calibrator_ckpt);
    m.outputs.emplace_back("tradeoff_csv", out + "/tradeoff.csv");
    m.outputs.emplace_back("tradeoff_txt", out + "/tradeoff.txt");
    m.outputs.emplace_back("confusion_source", out + "/confusion_source.csv");
    m.outputs.emplace_back("confusion_target", out + "/confusion_target.csv");
    write_manifest(out, m);

    TradeoffReport report = tradeoff_report(model, source_eval, target_eval);
    write_text_file(out + "/tradeoff.csv", report.to_csv());
    write_text_file(out + "/tradeoff.txt", report.to_text());
    write_text_file(out + "/confusion_source.csv", confusion(model, source_eval).to_csv());
    write_text_file(out + "/confusion_target.csv", confusion(model, target_eval).to_csv());
    std::cout << report.to_text();
}

void cmd_lsweep(Config cfg, const std::string& out, std::uint64_t seed,
                const std::string& source_ckpt, std::vector<double> epsilons) {
    if (epsilons.empty()) epsilons = cfg.get_double_list("sweep.epsilons");
    const std::string src_path = cfg.get_string("data.source");
    const std::string tgt_path = cfg.get_string("data.target");
    const std::string src_eval_path = cfg.get_string("data.source_eval");
    const std::string tgt_eval_path = cfg.get_string("data.target_eval");
    DomainDataset source = load_dataset(src_path);
    DomainDataset target = load_dataset(tgt_path);
    DomainDataset source_eval = load_dataset(src_eval_path).unlocked();
    DomainDataset target_eval = load_dataset(tgt_eval_path).unlocked();

    NetworkSpec cls_spec = classifier_spec_desk();
    check_matches_classifier(cls_spec, source, "lsweep");
    ParameterSet classifier = load_checkpoint(source_ckpt, cls_spec);
    classifier.freeze();

    TrainConfig tcfg = train_from(cfg, seed);
    CalibratorConfig cal_cfg = cal_from(cfg, tcfg.epsilon, source);
    {
        std::string joined;
        for (std::size_t i = 0; i < epsilons.size(); ++i) {
            joined += (i ? "," : "") + fmt(epsilons[i]);
        }
        cfg.set("sweep.epsilons", joined);
    }

    RunManifest m;
    m.command = "lsweep";
    m.seed = seed;
    m.config = cfg;
    m.inputs.emplace_back("source", src_path);
    m.inputs.emplace_back("target", tgt_path);
    m.inputs.emplace_back("source_eval", src_eval_path);
    m.inputs.emplace_back("target_eval", tgt_eval_path);
    m.inputs.emplace_back("classifier", source_ckpt);
    m.outputs.emplace_back("sweep", out + "/sweep.csv");
    write_manifest(out, m);

    std::vector<SweepRow> rows = lsweep(epsilons, cls_spec, classifier, cal_cfg, source, target,
                                        source_eval, target_eval, tcfg);
    write_text_file(out + "/sweep.csv", sweep_csv(rows));
    std::cout << "[INFO] epsilon  source_acc  target_acc\n";
    for (const SweepRow& r : rows) {
        std::cout << "[INFO] " << std::setw(7) << r.epsilon << "  " << std::setw(10)
                  << r.source_accuracy << "  " << std::setw(10) << r.target_accuracy << "\n";
    }
}

void cmd_fft(Config cfg, const std::string& out, const std::string& calibrator_ckpt,
             const std::optional<double>& eps_flag, const std::optional<double>& cutoff_flag) {
    const std::string data_path = cfg.get_string("fft.dataset");
    DomainDataset ds = load_dataset(data_path);
    const double cutoff =
        cutoff_flag ? *cutoff_flag : cfg.get_double_or("fft.cutoff", kDefaultFreqCutoff);
    cfg.set("fft.cutoff", fmt(cutoff));
    const std::int64_t n = std::min<std::int64_t>(cfg.get_int_or("fft.max_images", 16),
                                                  ds.size());
    if (n < 1) throw std::invalid_argument("fft: dataset is empty");

    NetworkSpec cal_spec;
    ParameterSet calibrator;
    double epsilon = 0.0;
    if (!calibrator_ckpt.empty()) {
        epsilon = resolve_epsilon(cfg, eps_flag);
        cfg.set("train.epsilon", fmt(epsilon));
        cal_spec = calibrator_spec(cal_from(cfg, epsilon, ds));
        calibrator = load_checkpoint(calibrator_ckpt, cal_spec);
    }

    RunManifest m;
    m.command = "fft";
    m.seed = 0;
    m.config = cfg;
    m.inputs.emplace_back("dataset", data_path);
    if (!calibrator_ckpt.empty()) m.inputs.emplace_back("calibrator", calibrator_ckpt);
    m.outputs.emplace_back("report", out + "/fft_report.csv");
    m.outputs.emplace_back("spectrum_uncalibrated", out + "/spectrum_uncalibrated.pgm");
    m.outputs.emplace_back("spectrum_calibrated", out + "/spectrum_calibrated.pgm");
    write_manifest(out, m);

    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    Tensor raw = gather_images(ds, idx);
    Tensor cal = raw;
    if (!calibrator_ckpt.empty()) {
        Tape tape;
        TapedNet net = tape_params(tape, cal_spec, calibrator, false);
        cal = tape.value(calibrate(tape, net, tape.constant(raw), epsilon));
    }

    auto one_image = [](const Tensor& batch, std::int64_t i) {
        Tensor img = Tensor::zeros({batch.shape[1], batch.shape[2], batch.shape[3]});
        const std::int64_t per = img.numel();
        for (std::int64_t j = 0; j < per; ++j) img.data[j] = batch.data[i * per + j];
        return img;
    };
    auto log_view = [](const Tensor& spectrum) {
        // Channel 0, log-compressed so the DC spike does not flatten the rest.
        Tensor img = Tensor::zeros({spectrum.shape[1], spectrum.shape[2]});
        for (std::int64_t j = 0; j < img.numel(); ++j) {
            img.data[j] = std::log1p(spectrum.data[j]);
        }
        return img;
    };

    std::ostringstream csv;
    csv << "image,ratio_uncalibrated,ratio_calibrated\n";
    double mean_before = 0.0;
    double mean_after = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        Tensor spec_before = fft_spectrum(one_image(raw, i));
        const double before = high_freq_energy_ratio(spec_before, cutoff);
        double after = before;
        Tensor spec_after = spec_before;
        if (!calibrator_ckpt.empty()) {
            spec_after = fft_spectrum(one_image(cal, i));
            after = high_freq_energy_ratio(spec_after, cutoff);
        }
        if (i == 0) {
            write_pgm(out + "/spectrum_uncalibrated.pgm", log_view(spec_before));
            write_pgm(out + "/spectrum_calibrated.pgm", log_view(spec_after));
        }
        mean_before += before;
        mean_after += after;
        csv << i << ',' << fmt(before) << ',' << fmt(after) << '\n';
    }
    mean_before /= static_cast<double>(n);
    mean_after /= static_cast<double>(n);
    csv << "mean," << fmt(mean_before) << ',' << fmt(mean_after) << '\n';
    write_text_file(out + "/fft_report.csv", csv.str());
    std::cout << "[INFO] high-frequency energy ratio over " << n << " images: " << mean_before
              << " uncalibrated, " << mean_after << " calibrated (cutoff " << cutoff << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adversarial input-calibration pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::string source_ckpt;
    std::string calibrator_ckpt;
    std::optional<std::uint64_t> seed_flag;
    std::optional<double> epsilon_flag;
    std::optional<double> cutoff_flag;
    std::vector<double> epsilons_flag;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "key=value config file")->required();
        sub->add_option("--out", out_dir, "artifact directory")->required();
        return sub;
    };
    auto add_seed = [&](CLI::App* sub) {
        sub->add_option("--seed", seed_flag, "overrides the config seed");
    };

    CLI::App* gen = add_common(app.add_subcommand("gen-data", "render a source/target pair"));
    add_seed(gen);

    CLI::App* ts =
        add_common(app.add_subcommand("train-source", "supervised classifier training"));
    add_seed(ts);

    CLI::App* tc = add_common(
        app.add_subcommand("train-calibrator", "adversarial calibration against a frozen classifier"));
    add_seed(tc);
    tc->add_option("--source-ckpt", source_ckpt, "classifier checkpoint")->required();
    tc->add_option("--epsilon", epsilon_flag, "overrides train.epsilon");

    CLI::App* ev = add_common(app.add_subcommand("eval", "accuracy trade-off report"));
    ev->add_option("--source-ckpt", source_ckpt, "classifier checkpoint")->required();
    ev->add_option("--calibrator-ckpt", calibrator_ckpt, "calibrator checkpoint (optional)");
    ev->add_option("--epsilon", epsilon_flag, "residual budget used at inference");

    CLI::App* sw = add_common(app.add_subcommand("lsweep", "budget sweep over epsilon values"));
    add_seed(sw);
    sw->add_option("--source-ckpt", source_ckpt, "classifier checkpoint")->required();
    sw->add_option("--epsilons", epsilons_flag, "comma-separated epsilon list")
        ->delimiter(',');

    CLI::App* ff =
        add_common(app.add_subcommand("fft", "frequency diagnostic, calibrated vs raw"));
    ff->add_option("--calibrator-ckpt", calibrator_ckpt, "calibrator checkpoint (optional)");
    ff->add_option("--epsilon", epsilon_flag, "residual budget used at inference");
    ff->add_option("--cutoff", cutoff_flag, "high-frequency cutoff fraction");

    CLI11_PARSE(app, argc, argv);

    try {
        Config cfg = Config::from_file(config_path);
        if (gen->parsed()) {
            const std::uint64_t seed = resolve_seed(cfg, seed_flag);
            cmd_gen_data(std::move(cfg), out_dir, seed);
        } else if (ts->parsed()) {
            const std::uint64_t seed = resolve_seed(cfg, seed_flag);
            cmd_train_source(std::move(cfg), out_dir, seed);
        } else if (tc->parsed()) {
            const std::uint64_t seed = resolve_seed(cfg, seed_flag);
            cmd_train_calibrator(std::move(cfg), out_dir, seed, source_ckpt, epsilon_flag);
        } else if (ev->parsed()) {
            cmd_eval(std::move(cfg), out_dir, source_ckpt, calibrator_ckpt, epsilon_flag);
        } else if (sw->parsed()) {
            const std::uint64_t seed = resolve_seed(cfg, seed_flag);
            cmd_lsweep(std::move(cfg), out_dir, seed, source_ckpt, epsilons_flag);
        } else if (ff->parsed()) {
            cmd_fft(std::move(cfg), out_dir, calibrator_ckpt, epsilon_flag, cutoff_flag);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
