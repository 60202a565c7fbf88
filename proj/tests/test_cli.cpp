#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>

#include "calibra/config.hpp"
#include "calibra/data.hpp"
#include "calibra/nets.hpp"

using namespace calibra;

namespace {

std::string binary() {
    if (const char* env = std::getenv("CALIBRA_BIN")) return env;
    return "./calibra";  // manual runs from the build directory
}

int run(const std::string& args, const std::string& stderr_file = "/dev/null") {
    const std::string cmd = binary() + " " + args + " >/dev/null 2>" + stderr_file;
    int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -2;
}

bool same_bytes(const std::string& a, const std::string& b) {
    return read_text_file(a) == read_text_file(b);
}

// One tiny rendered pair plus a briefly trained classifier, built once and
// shared by every test below.
struct Pipeline {
    std::string root;
    std::string cfg;   // config file path
    std::string data;  // gen-data artifacts
    std::string cls;   // train-source artifacts

    Pipeline() {
        root = (std::filesystem::temp_directory_path() /
                ("calibra_cli_" + std::to_string(::getpid())))
                   .string();
        std::filesystem::create_directories(root);
        data = root + "/data";
        cls = root + "/cls";
        cfg = root + "/run.cfg";
        write_text_file(cfg,
                        "data.classes=10\n"
                        "data.per_class=2\n"
                        "data.image_size=28\n"
                        "shift.contrast_inversion=true\n"
                        "data.source=" + data + "/source.cald\n"
                        "data.target=" + data + "/target.cald\n"
                        "data.source_eval=" + data + "/source.cald\n"
                        "data.target_eval=" + data + "/target.cald\n"
                        "train.learning_rate=1e-3\n"
                        "train.batch_size=16\n"
                        "train.epochs=2\n"
                        "train.log_every=1\n"
                        "train.epsilon=0.2\n"
                        "train.patch_size=8\n"
                        "cal.width=2\n"
                        "fft.dataset=" + data + "/target.cald\n"
                        "fft.max_images=3\n"
                        "seed=5\n");
        REQUIRE(run("gen-data --config " + cfg + " --out " + data) == 0);
        REQUIRE(run("train-source --config " + cfg + " --out " + cls) == 0);
    }
    ~Pipeline() { std::filesystem::remove_all(root); }
};

Pipeline& pipeline() {
    static Pipeline p;
    return p;
}

}  // namespace

// ===== data generation =====

TEST_CASE("gen-data is byte-identical across re-runs and honors the config") {
    Pipeline& p = pipeline();
    const std::string again = p.root + "/data_again";
    REQUIRE(run("gen-data --config " + p.cfg + " --out " + again) == 0);
    CHECK(same_bytes(p.data + "/source.cald", again + "/source.cald"));
    CHECK(same_bytes(p.data + "/target.cald", again + "/target.cald"));
    CHECK(same_bytes(p.data + "/manifest.txt", again + "/manifest.txt") == false);  // paths differ

    DomainDataset source = load_dataset(p.data + "/source.cald");
    CHECK(source.size() == 20);  // 10 classes x 2 per class
    CHECK(source.height() == 28);
    CHECK(source.labels_visible);
    DomainDataset target = load_dataset(p.data + "/target.cald");
    CHECK(!target.labels_visible);

    // A different seed moves the pixels.
    const std::string other = p.root + "/data_other";
    REQUIRE(run("gen-data --config " + p.cfg + " --out " + other + " --seed 6") == 0);
    CHECK(!same_bytes(p.data + "/source.cald", other + "/source.cald"));
}

TEST_CASE("missing config keys fail with the key named") {
    Pipeline& p = pipeline();
    const std::string broken = p.root + "/broken.cfg";
    write_text_file(broken, "data.per_class=2\ndata.image_size=28\n");
    const std::string err = p.root + "/stderr.txt";
    CHECK(run("gen-data --config " + broken + " --out " + p.root + "/x", err) != 0);
    CHECK(read_text_file(err).find("missing config key: data.classes") != std::string::npos);
}

TEST_CASE("bad flags and absent files exit nonzero with a one-line cause") {
    Pipeline& p = pipeline();
    const std::string err = p.root + "/stderr2.txt";
    CHECK(run("no-such-command --config " + p.cfg + " --out " + p.root + "/x", err) != 0);
    CHECK(run("gen-data --out " + p.root + "/x", err) != 0);  // --config is required
    CHECK(run("train-source --config " + p.cfg + " --out " + p.root + "/x --seed -3", err) != 0);
    CHECK(run("eval --config " + p.cfg + " --out " + p.root + "/x --source-ckpt " + p.root +
                  "/absent.calc",
              err) != 0);
    const std::string cause = read_text_file(err);
    CHECK(std::count(cause.begin(), cause.end(), '\n') == 1);
}

// ===== training commands =====

TEST_CASE("train-source emits checkpoint, logs, and a manifest that came first") {
    Pipeline& p = pipeline();
    CHECK(std::filesystem::exists(p.cls + "/classifier.calc"));
    CHECK(std::filesystem::exists(p.cls + "/manifest.txt"));

    const std::string steps = read_text_file(p.cls + "/steps.csv");
    CHECK(steps.rfind("step,source_loss,feat_disc_loss,pixel_disc_loss,calibrator_loss,"
                      "align_pixel_target,align_pixel_source,align_feature_target,"
                      "align_feature_source\n",
                      0) == 0);
    CHECK(read_text_file(p.cls + "/epochs.csv")
              .rfind("epoch,source_accuracy,pixel_disc_loss,feat_disc_loss\n", 0) == 0);

    const std::string manifest = read_text_file(p.cls + "/manifest.txt");
    CHECK(manifest.find("command=train-source") != std::string::npos);
    CHECK(manifest.find("seed=5") != std::string::npos);
    CHECK(manifest.find("config.train.epochs=2") != std::string::npos);

    // The checkpoint loads against the declared architecture.
    CHECK_NOTHROW(load_checkpoint(p.cls + "/classifier.calc", classifier_spec_desk()));
}

TEST_CASE("train-calibrator freezes the classifier and re-runs bit-identically") {
    Pipeline& p = pipeline();
    const std::string cal_a = p.root + "/cal_a";
    const std::string cal_b = p.root + "/cal_b";
    const std::string base = " --config " + p.cfg + " --source-ckpt " + p.cls +
                             "/classifier.calc";
    const std::string before = read_text_file(p.cls + "/classifier.calc");
    REQUIRE(run("train-calibrator" + base + " --out " + cal_a) == 0);
    REQUIRE(run("train-calibrator" + base + " --out " + cal_b) == 0);

    // Inputs were never mutated, outputs are reproducible.
    CHECK(read_text_file(p.cls + "/classifier.calc") == before);
    CHECK(same_bytes(cal_a + "/calibrator.calc", cal_b + "/calibrator.calc"));
    CHECK(same_bytes(cal_a + "/pixel_disc.calc", cal_b + "/pixel_disc.calc"));
    CHECK(same_bytes(cal_a + "/feat_disc.calc", cal_b + "/feat_disc.calc"));
    CHECK(same_bytes(cal_a + "/steps.csv", cal_b + "/steps.csv"));

    const std::string freeze = read_text_file(cal_a + "/freeze_check.txt");
    CHECK(freeze.find("classifier_hash_before=") != std::string::npos);
    CHECK(freeze.find("identical=true") != std::string::npos);

    // A calibrator checkpoint is not a classifier.
    const std::string err = p.root + "/stderr3.txt";
    CHECK(run("eval --config " + p.cfg + " --out " + p.root + "/x --source-ckpt " + cal_a +
                  "/calibrator.calc",
              err) != 0);
    CHECK(read_text_file(err).find("role") != std::string::npos);
}

// ===== evaluation commands =====

TEST_CASE("eval with an identity calibrator reproduces source-only numbers exactly") {
    Pipeline& p = pipeline();

    // Bare run: no calibrator at all.
    const std::string bare = p.root + "/eval_bare";
    REQUIRE(run("eval --config " + p.cfg + " --out " + bare + " --source-ckpt " + p.cls +
                "/classifier.calc") == 0);

    // A freshly built calibrator is the exact identity.
    CalibratorConfig cal_cfg;
    cal_cfg.width = 2;
    ParameterSet identity = build_calibrator(cal_cfg, 123);
    const std::string ckpt = p.root + "/identity.calc";
    save_checkpoint(ckpt, calibrator_spec(cal_cfg), identity);

    const std::string with_cal = p.root + "/eval_identity";
    REQUIRE(run("eval --config " + p.cfg + " --out " + with_cal + " --source-ckpt " + p.cls +
                "/classifier.calc --calibrator-ckpt " + ckpt + " --epsilon 0.2") == 0);

    // Accuracy columns agree exactly; only the parameter accounting differs.
    auto row = [](const std::string& dir) {
        const std::string csv = read_text_file(dir + "/tradeoff.csv");
        const std::size_t nl = csv.find('\n');
        std::string data_row = csv.substr(nl + 1);
        std::size_t comma = 0;
        for (int i = 0; i < 6; ++i) comma = data_row.find(',', comma) + 1;
        return data_row.substr(0, comma);  // first 6 columns
    };
    CHECK(row(bare) == row(with_cal));
    CHECK(read_text_file(bare + "/tradeoff.csv") != read_text_file(with_cal + "/tradeoff.csv"));

    CHECK(std::filesystem::exists(bare + "/confusion_source.csv"));
    CHECK(std::filesystem::exists(bare + "/confusion_target.csv"));
    const std::string text = read_text_file(bare + "/tradeoff.txt");
    CHECK(text.find("trade-off report") != std::string::npos);
}

TEST_CASE("lsweep writes one row per epsilon in argument order") {
    Pipeline& p = pipeline();
    const std::string out = p.root + "/sweep";
    REQUIRE(run("lsweep --config " + p.cfg + " --out " + out + " --source-ckpt " + p.cls +
                "/classifier.calc --epsilons 0,0.2") == 0);
    const std::string csv = read_text_file(out + "/sweep.csv");
    CHECK(csv.rfind("epsilon,source_accuracy,target_accuracy\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(csv.find("\n0,") != std::string::npos);  // the zero row survives verbatim
}

TEST_CASE("fft reports per-image ratios plus a mean row and writes spectra") {
    Pipeline& p = pipeline();
    const std::string out = p.root + "/fft";
    REQUIRE(run("fft --config " + p.cfg + " --out " + out) == 0);
    const std::string csv = read_text_file(out + "/fft_report.csv");
    CHECK(csv.rfind("image,ratio_uncalibrated,ratio_calibrated\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);  // header + 3 images + mean
    CHECK(csv.find("mean,") != std::string::npos);

    // Without a calibrator both columns match row by row.
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        const std::size_t c1 = line.find(',');
        const std::size_t c2 = line.find(',', c1 + 1);
        CHECK(line.substr(c1 + 1, c2 - c1 - 1) == line.substr(c2 + 1));
    }

    const std::string pgm = read_text_file(out + "/spectrum_uncalibrated.pgm");
    CHECK(pgm.rfind("P5\n28 28\n255\n", 0) == 0);
    CHECK(std::filesystem::exists(out + "/spectrum_calibrated.pgm"));
}
