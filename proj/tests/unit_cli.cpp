#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "trajprune/cli.hpp"
#include "trajprune/denoiser.hpp"
#include "trajprune/pipeline.hpp"
#include "trajprune/schedule.hpp"
#include "trajprune/textio.hpp"
#include "trajprune/trajectory.hpp"

using namespace trajprune;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code;
    std::string out;
    std::string err;
};

CliResult run_capture(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.push_back("trajprune");
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    auto* old_out = std::cout.rdbuf(out.rdbuf());
    auto* old_err = std::cerr.rdbuf(err.rdbuf());
    int code = run_cli(static_cast<int>(argv.size()), argv.data());
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    return {code, out.str(), err.str()};
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("trajprune-cli-test-" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string sub(const std::string& name) const { return (path / name).string(); }
};

// Model flags small enough that training and pruning stay in milliseconds.
std::vector<std::string> tiny_model_flags() {
    return {"--image-size", "4",  "--patch",      "2", "--d-model",  "8",
            "--n-heads",    "2",  "--n-blocks",   "1", "--mlp-hidden", "8",
            "--n-classes",  "2",  "--train-size", "8", "--heldout-size", "4"};
}

std::vector<std::string> cat(std::vector<std::string> a,
                             const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

}  // namespace

TEST_CASE("analyze writes the frozen default plan and is byte-reproducible") {
    TempDir tmp;
    CliResult r = run_capture({"analyze", "--out-dir", tmp.sub("a")});
    CHECK(r.code == 0);
    CHECK(r.out.find("dividers 581 109\n") != std::string::npos);

    StagePlan plan = parse_plan(slurp_file(tmp.sub("a") + "/plan.txt"));
    CHECK(plan.divider1 == 581);
    CHECK(plan.divider2 == 109);

    // The plan on disk carries exactly the library allocation.
    NoiseSchedule s = default_schedule(ScheduleFamily::linear);
    StagePlan want = run_divide(s, ScoreSettings{}, 0.3, Weighting::per_stage_uniform);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(plan.sparsity[i] == want.sparsity[i]);

    std::string header = split(slurp_file(tmp.sub("a") + "/curves.csv"), '\n')[0];
    CHECK(header == "t,grad,log_snr,score,mse,snr");

    CliResult again = run_capture({"analyze", "--out-dir", tmp.sub("b")});
    CHECK(again.code == 0);
    CHECK(slurp_file(tmp.sub("a") + "/curves.csv") ==
          slurp_file(tmp.sub("b") + "/curves.csv"));
    CHECK(slurp_file(tmp.sub("a") + "/plan.txt") ==
          slurp_file(tmp.sub("b") + "/plan.txt"));
}

TEST_CASE("analyze with zero snr weight reduces the score to the gradient column") {
    TempDir tmp;
    CliResult r = run_capture({"analyze", "--out-dir", tmp.sub("z"), "--lambda", "0"});
    CHECK(r.code == 0);
    auto lines = split(slurp_file(tmp.sub("z") + "/curves.csv"), '\n');
    REQUIRE(lines.size() > 1000);
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) continue;
        auto cols = split(lines[i], ',');
        REQUIRE(cols.size() == 6);
        CHECK(cols[3] == cols[1]);  // score == grad, including the blank at t=1
    }
}

TEST_CASE("analyze exit codes distinguish degenerate curves from bad parameters") {
    TempDir tmp;
    // A huge snr weight makes the score monotone: the above-threshold run
    // touches the trajectory end, which is a degenerate division.
    CliResult degen =
        run_capture({"analyze", "--out-dir", tmp.sub("d"), "--lambda", "100"});
    CHECK(degen.code == 3);
    CHECK(degen.err.find("error:") != std::string::npos);

    CHECK(run_capture({"analyze", "--out-dir", tmp.sub("e"), "--M", "1.5"}).code == 2);
    CHECK(run_capture({"analyze", "--out-dir", tmp.sub("f"), "--family", "bogus"})
              .code == 2);
    CHECK(run_capture({"analyze", "--no-such-flag"}).code == 2);
    CHECK(run_capture({}).code == 2);
    // Aggregate beyond the plain-mean ceiling (0.9 + 0 + 0.9) / 3.
    CHECK(run_capture({"analyze", "--out-dir", tmp.sub("g"), "--aggregate", "0.65"})
              .code == 2);
}

TEST_CASE("options can come from a config file") {
    TempDir tmp;
    spit_file(tmp.sub("run.ini"), "[analyze]\nM=0.7\n");
    CliResult r = run_capture(
        {"--config", tmp.sub("run.ini"), "analyze", "--out-dir", tmp.sub("c")});
    CHECK(r.code == 0);
    CHECK(r.out.find("dividers 516 147\n") != std::string::npos);
    // Command-line flags override file values.
    CliResult over = run_capture({"--config", tmp.sub("run.ini"), "analyze",
                                  "--out-dir", tmp.sub("o"), "--M", "0.55"});
    CHECK(over.code == 0);
    CHECK(over.out.find("dividers 581 109\n") != std::string::npos);
    CHECK(run_capture({"--config", tmp.sub("absent.ini"), "analyze"}).code == 2);
}

TEST_CASE("train, prune, sample and eval chain through the command line") {
    TempDir tmp;

    CliResult tr = run_capture(cat({"train", "--seed", "7", "--out-dir",
                                    tmp.sub("dense"), "--epochs", "2",
                                    "--batch-size", "8"},
                                   tiny_model_flags()));
    REQUIRE(tr.code == 0);
    CHECK(tr.out.find("final_train_loss ") != std::string::npos);
    CHECK(tr.out.find("heldout_loss ") != std::string::npos);
    std::string ckpt = tmp.sub("dense") + "/model.ckpt";
    REQUIRE(fs::exists(ckpt));
    DenoiserModel trained = load_checkpoint(ckpt);
    CHECK(trained.cfg.d_model == 8);
    CHECK(trained.cfg.n_blocks == 1);
    auto loss_lines = split(trim(slurp_file(tmp.sub("dense") + "/loss.csv")), '\n');
    REQUIRE(loss_lines.size() == 3);  // header + 2 epochs
    CHECK(loss_lines[0] == "epoch,mean_loss");

    CliResult pr = run_capture(cat({"prune", "--seed", "7", "--out-dir",
                                    tmp.sub("mosaic"), "--checkpoint", ckpt,
                                    "--preset", "dit-0.30", "--n-calib", "16"},
                                   tiny_model_flags()));
    REQUIRE(pr.code == 0);
    CHECK(pr.out.find("dividers 900 450\n") != std::string::npos);
    CHECK(pr.out.find("sparsities 0.6 0.04 0.1\n") != std::string::npos);
    for (const char* f : {"dense.ckpt", "plan.txt", "stage1.ckpt", "stage2.ckpt",
                          "stage3.ckpt", "masks.txt", "calib_stage1.txt",
                          "calib_stage2.txt", "calib_stage3.txt"})
        CHECK(fs::exists(fs::path(tmp.sub("mosaic")) / f));

    // Preset sparsities against 2 heads and 8 neurons floor to: stage 1
    // loses 1 head and 4 neurons, stages 2 and 3 lose nothing.
    MosaicModel mosaic = load_mosaic(tmp.sub("mosaic"));
    CHECK(mosaic.stages[0].layers.at({0, LayerKind::attn_out_proj}).mask.pruned.size()
          == 1);
    CHECK(mosaic.stages[0].layers.at({0, LayerKind::mlp_down_proj}).mask.pruned.size()
          == 4);
    for (int stage : {1, 2})
        for (const auto& [id, rep] :
             mosaic.stages[static_cast<std::size_t>(stage)].layers)
            CHECK(rep.mask.pruned.empty());

    auto sample_args = [&](const std::string& dir) {
        return cat({"sample", "--seed", "7", "--out-dir", dir, "--mosaic",
                    tmp.sub("mosaic"), "--n-samples", "2", "--steps", "5"},
                   tiny_model_flags());
    };
    REQUIRE(run_capture(sample_args(tmp.sub("s1"))).code == 0);
    REQUIRE(run_capture(sample_args(tmp.sub("s2"))).code == 0);
    CHECK(slurp_file(tmp.sub("s1") + "/samples.csv") ==
          slurp_file(tmp.sub("s2") + "/samples.csv"));
    auto sample_lines = split(trim(slurp_file(tmp.sub("s1") + "/samples.csv")), '\n');
    REQUIRE(sample_lines.size() == 3);
    CHECK(sample_lines[0].rfind("sample,label,px0,", 0) == 0);
    CHECK(split(sample_lines[1], ',').size() == 2 + 16);

    CliResult sd = run_capture(cat({"sample", "--seed", "9", "--out-dir",
                                    tmp.sub("s3"), "--checkpoint", ckpt,
                                    "--n-samples", "1", "--steps", "5", "--label",
                                    "1"},
                                   tiny_model_flags()));
    REQUIRE(sd.code == 0);
    auto dense_lines = split(trim(slurp_file(tmp.sub("s3") + "/samples.csv")), '\n');
    REQUIRE(dense_lines.size() == 2);
    CHECK(split(dense_lines[1], ',')[1] == "1");

    CliResult ev = run_capture(cat({"eval", "--seed", "7", "--out-dir",
                                    tmp.sub("eval"), "--mosaic", tmp.sub("mosaic"),
                                    "--n-eval", "2", "--steps", "5", "--workers",
                                    "2"},
                                   tiny_model_flags()));
    REQUIRE(ev.code == 0);
    CHECK(ev.out.find("divergence_mean ") != std::string::npos);
    CHECK(ev.out.find("macs_mosaic ") != std::string::npos);
    std::string report = slurp_file(tmp.sub("eval") + "/report.txt");
    CHECK(report.find("pairs 2\n") != std::string::npos);
    CHECK(report.find("stage1_realized_sparsity 0.5\n") != std::string::npos);

    // Only stage 1 was pruned and the 5-step grid visits it at t = 1000,
    // so mosaic and dense genuinely diverge.
    auto row = split(split(trim(slurp_file(tmp.sub("eval") + "/report.csv")), '\n')[1],
                     ',');
    CHECK(parse_double(row[1], "divergence") > 0.0);

    CliResult evb = run_capture(cat({"eval", "--seed", "7", "--out-dir",
                                     tmp.sub("evalb"), "--mosaic", tmp.sub("mosaic"),
                                     "--n-eval", "2", "--steps", "5", "--baseline",
                                     "uniform", "--n-calib", "8"},
                                    tiny_model_flags()));
    REQUIRE(evb.code == 0);
    auto csv_lines = split(trim(slurp_file(tmp.sub("evalb") + "/report.csv")), '\n');
    REQUIRE(csv_lines.size() == 3);
    CHECK(split(csv_lines[1], ',')[0] == "mosaic");
    CHECK(split(csv_lines[2], ',')[0] == "uniform");
}

TEST_CASE("subcommands refuse to run without their required inputs") {
    TempDir tmp;
    CliResult pr = run_capture({"prune", "--out-dir", tmp.sub("x")});
    CHECK(pr.code == 2);
    CHECK(pr.err.find("--checkpoint") != std::string::npos);
    CHECK(run_capture({"sample", "--out-dir", tmp.sub("y")}).code == 2);
    CHECK(run_capture({"eval", "--out-dir", tmp.sub("z")}).code == 2);
    CHECK(run_capture({"sample", "--checkpoint", tmp.sub("missing.ckpt")}).code == 2);
}
