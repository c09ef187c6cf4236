#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "wsclip/config.hpp"

// Drives the built binary end to end through a scratch directory.

namespace fs = std::filesystem;

namespace {

const std::string kBin = WSCLIP_BIN;

struct Invocation {
    int exit_code;
    std::string out;
    std::string err;
};

Invocation run_cli(const std::string& args, const fs::path& dir) {
    const std::string out_file = (dir / "stdout.txt").string();
    const std::string err_file = (dir / "stderr.txt").string();
    const std::string cmd = kBin + " " + args + " > " + out_file + " 2> " + err_file;
    const int status = std::system(cmd.c_str());
    Invocation inv;
    inv.exit_code = WEXITSTATUS(status);
    inv.out = wsclip::read_text_file(out_file);
    inv.err = wsclip::read_text_file(err_file);
    return inv;
}

fs::path scratch(const std::string& tag) {
    fs::path dir = fs::temp_directory_path() / ("wsclip_cli_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write(const fs::path& p, const std::string& text) {
    wsclip::write_text_file(p.string(), text);
}

const char* kTinyCorpusCfg = R"(
image_size = 16
classes = 10
colors = 8
train_samples = 60
val_samples = 10
test_samples = 20
hard_test_samples = 10
seed = 5
)";

const char* kTinyTrainCfg = R"(
model.vision.layers = 1
model.vision.width = 16
model.vision.heads = 4
model.vision.patch_size = 4
model.vision.resolution = 16
model.vision.projection_dim = 16
model.vision.norm = rms
model.text.layers = 1
model.text.width = 16
model.text.heads = 4
model.text.vocab_size = 75
model.text.context_length = 16
model.text.projection_dim = 16
model.temperature = 0.05
stage.samples = 16
stage.batch = 8
stage.warmup = 1
)";

}  // namespace

TEST_CASE("unknown subcommands and flags exit with code 2") {
    auto dir = scratch("usage");
    CHECK(run_cli("frobnicate", dir).exit_code == 2);
    CHECK(run_cli("count --no-such-flag", dir).exit_code == 2);
    fs::remove_all(dir);
}

TEST_CASE("count preset prints the reference parameter total and the default dump") {
    auto dir = scratch("count");
    Invocation inv = run_cli("count --preset reference-text", dir);
    CHECK(inv.exit_code == 0);
    CHECK(inv.out.find("parameters = 694332160") != std::string::npos);
    CHECK(inv.out.find("defaults.vision_peak_lr = 4e-4") != std::string::npos);
    CHECK(inv.out.find("defaults.text_peak_lr = 4e-5") != std::string::npos);
    CHECK(inv.out.find("defaults.vision_layer_decay = 0.9") != std::string::npos);
    CHECK(inv.out.find("defaults.text_layer_decay = 0.75") != std::string::npos);
    CHECK(inv.out.find("defaults.temperature = 0.01") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("gen-data, train-clip, eval, distill, cycle, report wire together") {
    auto dir = scratch("pipeline");
    write(dir / "corpus.cfg", kTinyCorpusCfg);
    Invocation gen = run_cli("gen-data --config " + (dir / "corpus.cfg").string() + " --out " +
                                 (dir / "corpus").string(),
                             dir);
    REQUIRE(gen.exit_code == 0);
    CHECK(fs::exists(dir / "corpus" / "train.bin"));
    CHECK(fs::exists(dir / "corpus" / "test.tsv"));
    CHECK(fs::exists(dir / "corpus" / "vocab.txt"));

    write(dir / "train.cfg", kTinyTrainCfg);
    Invocation train = run_cli("train-clip --corpus " + (dir / "corpus").string() + " --config " +
                                   (dir / "train.cfg").string() + " --out " +
                                   (dir / "clip.ckpt").string() + " --seed 3",
                               dir);
    REQUIRE(train.exit_code == 0);
    CHECK(train.out.find("stage.vision_peak_lr = 4e-4") != std::string::npos);
    CHECK(fs::exists(dir / "clip.ckpt"));

    // eval twice: byte-identical reports
    Invocation ev1 = run_cli("eval --ckpt " + (dir / "clip.ckpt").string() + " --corpus " +
                                 (dir / "corpus").string() + " --out " + (dir / "ev1").string() +
                                 " --seed 9",
                             dir);
    REQUIRE(ev1.exit_code == 0);
    Invocation ev2 = run_cli("eval --ckpt " + (dir / "clip.ckpt").string() + " --corpus " +
                                 (dir / "corpus").string() + " --out " + (dir / "ev2").string() +
                                 " --seed 9",
                             dir);
    REQUIRE(ev2.exit_code == 0);
    CHECK(wsclip::read_text_file((dir / "ev1" / "report.txt").string()) ==
          wsclip::read_text_file((dir / "ev2" / "report.txt").string()));
    CHECK(wsclip::read_text_file((dir / "ev1" / "report.csv").string()) ==
          wsclip::read_text_file((dir / "ev2" / "report.csv").string()));

    // distill a slightly wider student from the trained checkpoint
    write(dir / "distill.cfg", R"(
student.layers = 1
student.width = 24
student.heads = 4
student.patch_size = 4
student.resolution = 16
student.projection_dim = 16
student.norm = rms
stage.samples = 16
stage.batch = 8
stage.warmup = 1
)");
    Invocation dist = run_cli("distill --teacher " + (dir / "clip.ckpt").string() + " --corpus " +
                                  (dir / "corpus").string() + " --config " +
                                  (dir / "distill.cfg").string() + " --out " +
                                  (dir / "student.ckpt").string(),
                              dir);
    REQUIRE(dist.exit_code == 0);
    CHECK(fs::exists(dir / "student.ckpt"));

    // a small cycle plan, then the report view over its lineage
    write(dir / "plan.cfg", R"(
seed = 4
corpus = )" + (dir / "corpus").string() +
                                R"(
out = )" + (dir / "run").string() +
                                R"(
seed.vision.layers = 1
seed.vision.width = 12
seed.vision.heads = 4
seed.vision.patch_size = 4
seed.vision.resolution = 16
seed.vision.projection_dim = 12
seed.vision.norm = rms
seed.text.layers = 1
seed.text.width = 12
seed.text.heads = 4
seed.text.vocab_size = 75
seed.text.context_length = 16
seed.text.projection_dim = 12
seed.temperature = 0.05
seed.stage.samples = 16
seed.stage.batch = 8
seed.stage.warmup = 1
generations = 1
gen.0.student.layers = 1
gen.0.student.width = 16
gen.0.student.heads = 4
gen.0.student.patch_size = 4
gen.0.student.resolution = 16
gen.0.student.projection_dim = 12
gen.0.student.norm = rms
gen.0.distill.samples = 16
gen.0.distill.batch = 8
gen.0.distill.warmup = 1
gen.0.clip.samples = 32
gen.0.clip.batch = 8
gen.0.clip.warmup = 1
)");
    Invocation cyc = run_cli("cycle --config " + (dir / "plan.cfg").string(), dir);
    REQUIRE(cyc.exit_code == 0);
    CHECK(fs::exists(dir / "run" / "lineage.txt"));
    CHECK(fs::exists(dir / "run" / "gen0" / "clip.ckpt"));

    Invocation rep = run_cli("report --lineage " + (dir / "run" / "lineage.txt").string() +
                                 " --out " + (dir / "curve.csv").string(),
                             dir);
    REQUIRE(rep.exit_code == 0);
    const std::string csv = wsclip::read_text_file((dir / "curve.csv").string());
    CHECK(csv.find("generation,name,vision_params") != std::string::npos);
    CHECK(csv.find("gen0") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("a malformed cycle plan exits 2 and names the failing key") {
    auto dir = scratch("badplan");
    // missing required plan keys are named
    write(dir / "plan.cfg", "corpus = /nowhere\ngenerations = 1\n");
    Invocation inv = run_cli("cycle --config " + (dir / "plan.cfg").string(), dir);
    CHECK(inv.exit_code == 2);
    CHECK(inv.err.find("error[config]") != std::string::npos);
    CHECK(inv.err.find("seed.vision.layers") != std::string::npos);

    // unknown keys are named too
    write(dir / "plan2.cfg", R"(
corpus = /nowhere
out = /nowhere_out
seed.vision.layers = 1
seed.vision.width = 12
seed.vision.heads = 4
seed.vision.patch_size = 4
seed.vision.resolution = 16
seed.vision.projection_dim = 12
seed.text.layers = 1
seed.text.width = 12
seed.text.heads = 4
seed.text.vocab_size = 75
seed.text.context_length = 16
seed.text.projection_dim = 12
seed.stage.samples = 16
seed.stage.batch = 8
generations = 1
gen.0.student.layers = 1
gen.0.student.width = 16
gen.0.student.heads = 4
gen.0.student.patch_size = 4
gen.0.student.resolution = 16
gen.0.student.projection_dim = 12
gen.0.distill.samples = 16
gen.0.clip.samples = 32
gen.0.bogus_knob = 7
)");
    Invocation inv2 = run_cli("cycle --config " + (dir / "plan2.cfg").string(), dir);
    CHECK(inv2.exit_code == 2);
    CHECK(inv2.err.find("gen.0.bogus_knob") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("eval on a truncated checkpoint reports an integrity error") {
    auto dir = scratch("badckpt");
    write(dir / "corpus.cfg", kTinyCorpusCfg);
    REQUIRE(run_cli("gen-data --config " + (dir / "corpus.cfg").string() + " --out " +
                        (dir / "corpus").string(),
                    dir)
                .exit_code == 0);
    write(dir / "train.cfg", kTinyTrainCfg);
    REQUIRE(run_cli("train-clip --corpus " + (dir / "corpus").string() + " --config " +
                        (dir / "train.cfg").string() + " --out " + (dir / "clip.ckpt").string(),
                    dir)
                .exit_code == 0);
    fs::resize_file(dir / "clip.ckpt", fs::file_size(dir / "clip.ckpt") - 33);
    Invocation inv = run_cli("eval --ckpt " + (dir / "clip.ckpt").string() + " --corpus " +
                                 (dir / "corpus").string() + " --out " + (dir / "ev").string(),
                             dir);
    CHECK(inv.exit_code == 1);
    CHECK(inv.err.find("error[integrity]") != std::string::npos);
    fs::remove_all(dir);
}
