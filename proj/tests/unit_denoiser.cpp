#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "trajprune/denoiser.hpp"
#include "trajprune/errors.hpp"
#include "trajprune/textio.hpp"

using namespace trajprune;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

DenoiserConfig tiny_config() {
    DenoiserConfig cfg;
    cfg.image_size = 4;
    cfg.channels = 1;
    cfg.patch = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_blocks = 2;
    cfg.mlp_hidden = 8;
    cfg.n_classes = 2;
    return cfg;
}

VectorXd random_input(const DenoiserConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    VectorXd x(cfg.data_dim());
    for (int i = 0; i < x.size(); ++i) x(i) = gauss(rng);
    return x;
}

struct RecordingCapture : ActivationCapture {
    std::vector<LayerId> layers;
    std::vector<MatrixXd> rows;
    void on_activations(const LayerId& layer, const MatrixXd& r) override {
        layers.push_back(layer);
        rows.push_back(r);
    }
};

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("trajprune-denoiser-test-" + std::to_string(::getpid()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

bool models_equal(const DenoiserModel& a, const DenoiserModel& b) {
    bool equal = true;
    visit_params(a, [&](const std::string& name, const auto& ta) {
        visit_params(b, [&](const std::string& nb, const auto& tb) {
            if (name != nb) return;
            if (ta.rows() != tb.rows() || ta.cols() != tb.cols())
                equal = false;
            else if ((ta - tb).cwiseAbs().maxCoeff() != 0.0)
                equal = false;
        });
    });
    return equal;
}

}  // namespace

TEST_CASE("config validation rejects each inconsistent field") {
    DenoiserConfig ok = tiny_config();
    CHECK_NOTHROW(ok.validate());
    CHECK(ok.tokens() == 4);
    CHECK(ok.patch_dim() == 4);
    CHECK(ok.head_dim() == 4);
    CHECK(ok.data_dim() == 16);
    CHECK(ok.null_class() == 2);

    auto broken = [&](auto mutate) {
        DenoiserConfig c = tiny_config();
        mutate(c);
        CHECK_THROWS_AS(c.validate(), ParamError);
    };
    broken([](DenoiserConfig& c) { c.image_size = 0; });
    broken([](DenoiserConfig& c) { c.patch = 3; });      // does not divide image_size
    broken([](DenoiserConfig& c) { c.d_model = 7; });    // odd
    broken([](DenoiserConfig& c) { c.n_heads = 3; });    // does not divide d_model
    broken([](DenoiserConfig& c) { c.n_blocks = 0; });
    broken([](DenoiserConfig& c) { c.mlp_hidden = 0; });
    broken([](DenoiserConfig& c) { c.n_classes = 0; });
}

TEST_CASE("init is seed-deterministic and starts with a zero head") {
    DenoiserConfig cfg = tiny_config();
    DenoiserModel a = DenoiserModel::init(cfg, 42);
    DenoiserModel b = DenoiserModel::init(cfg, 42);
    DenoiserModel c = DenoiserModel::init(cfg, 43);
    CHECK(models_equal(a, b));
    CHECK(!models_equal(a, c));

    CHECK(a.head.cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.head_b.cwiseAbs().maxCoeff() == 0.0);
    // Body weights are genuinely random.
    CHECK(a.blocks[0].attn.wq.cwiseAbs().maxCoeff() > 0.0);

    // Zero head means the untrained model predicts exactly zero noise.
    VectorXd out = a.forward(random_input(cfg, 1), 500, 0);
    REQUIRE(out.size() == cfg.data_dim());
    CHECK(out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("zeros produces correctly shaped all-zero buffers") {
    DenoiserConfig cfg = tiny_config();
    DenoiserModel z = DenoiserModel::zeros(cfg);
    CHECK(z.patch_embed.rows() == cfg.d_model);
    CHECK(z.patch_embed.cols() == cfg.patch_dim());
    CHECK(z.pos_embed.rows() == cfg.tokens());
    CHECK(z.class_embed.rows() == cfg.n_classes + 1);
    CHECK(z.blocks.size() == static_cast<std::size_t>(cfg.n_blocks));
    CHECK(z.blocks[0].mlp.up.rows() == cfg.mlp_hidden);
    CHECK(z.head.rows() == cfg.patch_dim());
    double total = 0.0;
    visit_params(z, [&](const std::string&, const auto& t) {
        total += t.cwiseAbs().sum();
    });
    CHECK(total == 0.0);
}

TEST_CASE("forward is a pure deterministic function of its arguments") {
    DenoiserConfig cfg = tiny_config();
    DenoiserModel m = DenoiserModel::init(cfg, 7);
    // Give the head real weights so outputs are non-trivial.
    m.head = MatrixXd::Random(cfg.patch_dim(), cfg.d_model) * 0.3;

    VectorXd x = random_input(cfg, 2);
    VectorXd y1 = m.forward(x, 500, 0);
    VectorXd y2 = m.forward(x, 500, 0);
    CHECK((y1 - y2).cwiseAbs().maxCoeff() == 0.0);
    CHECK(y1.cwiseAbs().maxCoeff() > 0.0);

    // Output responds to every conditioning channel.
    CHECK((m.forward(x, 501, 0) - y1).cwiseAbs().maxCoeff() > 0.0);
    CHECK((m.forward(x, 500, 1) - y1).cwiseAbs().maxCoeff() > 0.0);
    CHECK((m.forward(x, 500, cfg.null_class()) - y1).cwiseAbs().maxCoeff() > 0.0);
    CHECK((m.forward(random_input(cfg, 3), 500, 0) - y1).cwiseAbs().maxCoeff() > 0.0);

    CHECK_THROWS_AS(m.forward(VectorXd::Zero(7), 500, 0), ParamError);
    CHECK_THROWS_AS(m.forward(x, 0, 0), ParamError);
    CHECK_THROWS_AS(m.forward(x, 500, -1), ParamError);
    CHECK_THROWS_AS(m.forward(x, 500, cfg.null_class() + 1), ParamError);
}

TEST_CASE("capture hook sees the residual-write inputs of every block in order") {
    DenoiserConfig cfg = tiny_config();
    DenoiserModel m = DenoiserModel::init(cfg, 9);
    VectorXd x = random_input(cfg, 4);

    RecordingCapture cap;
    ForwardTrace trace;
    m.forward(x, 300, 1, &cap, &trace);

    REQUIRE(cap.layers.size() == static_cast<std::size_t>(2 * cfg.n_blocks));
    for (int b = 0; b < cfg.n_blocks; ++b) {
        const LayerId& attn_id = cap.layers[static_cast<std::size_t>(2 * b)];
        const LayerId& mlp_id = cap.layers[static_cast<std::size_t>(2 * b + 1)];
        CHECK(attn_id.block == b);
        CHECK(attn_id.kind == LayerKind::attn_out_proj);
        CHECK(mlp_id.block == b);
        CHECK(mlp_id.kind == LayerKind::mlp_down_proj);

        const MatrixXd& attn_rows = cap.rows[static_cast<std::size_t>(2 * b)];
        const MatrixXd& mlp_rows = cap.rows[static_cast<std::size_t>(2 * b + 1)];
        CHECK(attn_rows.rows() == cfg.tokens());
        CHECK(attn_rows.cols() == cfg.d_model);
        CHECK(mlp_rows.rows() == cfg.tokens());
        CHECK(mlp_rows.cols() == cfg.mlp_hidden);

        // Captured rows are exactly the trace intermediates feeding wo / down.
        const BlockTrace& bt = trace.blocks[static_cast<std::size_t>(b)];
        CHECK((attn_rows - bt.attn_concat).cwiseAbs().maxCoeff() == 0.0);
        CHECK((mlp_rows - bt.mlp_act).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("forward trace holds every intermediate with consistent shapes") {
    DenoiserConfig cfg = tiny_config();
    DenoiserModel m = DenoiserModel::init(cfg, 11);
    ForwardTrace trace;
    m.forward(random_input(cfg, 5), 200, 0, nullptr, &trace);

    CHECK(trace.patches.rows() == cfg.tokens());
    CHECK(trace.patches.cols() == cfg.patch_dim());
    CHECK(trace.t_emb.size() == cfg.d_model);
    CHECK(trace.time_act.size() == cfg.d_model);
    CHECK(trace.cond.size() == cfg.d_model);
    CHECK(trace.h0.rows() == cfg.tokens());
    REQUIRE(trace.blocks.size() == static_cast<std::size_t>(cfg.n_blocks));
    for (const BlockTrace& bt : trace.blocks) {
        CHECK(bt.h_in.rows() == cfg.tokens());
        CHECK(bt.q.cols() == cfg.d_model);
        REQUIRE(bt.probs.size() == static_cast<std::size_t>(cfg.n_heads));
        for (const MatrixXd& p : bt.probs) {
            CHECK(p.rows() == cfg.tokens());
            CHECK(p.cols() == cfg.tokens());
            // Rows are softmax distributions.
            for (int i = 0; i < p.rows(); ++i) {
                CHECK(p.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
                CHECK(p.row(i).minCoeff() > 0.0);
            }
        }
        CHECK(bt.mlp_pre.cols() == cfg.mlp_hidden);
        CHECK(bt.ln1.inv_std.size() == cfg.tokens());
    }
    CHECK(trace.h_final.rows() == cfg.tokens());
    CHECK(trace.lnf.xhat.rows() == cfg.tokens());
}

TEST_CASE("layer names are stable identifiers") {
    CHECK(layer_name({0, LayerKind::attn_out_proj}) == "block0.attn_out_proj");
    CHECK(layer_name({3, LayerKind::mlp_down_proj}) == "block3.mlp_down_proj");
}

TEST_CASE("checkpoint round trip is exact at float32 resolution") {
    TempDir tmp;
    DenoiserConfig cfg = tiny_config();
    DenoiserModel m = DenoiserModel::init(cfg, 13);
    std::string path = tmp.file("model.ckpt");
    save_checkpoint(m, path);
    DenoiserModel back = load_checkpoint(path);

    CHECK(back.cfg == cfg);
    // Loaded values equal the float32 cast of the originals, bit for bit.
    visit_params(m, [&](const std::string& name, const auto& orig) {
        visit_params(back, [&](const std::string& nb, const auto& got) {
            if (name != nb) return;
            REQUIRE(orig.rows() == got.rows());
            REQUIRE(orig.cols() == got.cols());
            for (Eigen::Index r = 0; r < orig.rows(); ++r)
                for (Eigen::Index c = 0; c < orig.cols(); ++c)
                    CHECK(got(r, c) == static_cast<double>(static_cast<float>(orig(r, c))));
        });
    });

    // A second save of the loaded model reproduces the file byte for byte.
    std::string path2 = tmp.file("model2.ckpt");
    save_checkpoint(back, path2);
    CHECK(slurp_file(path) == slurp_file(path2));
}

TEST_CASE("checkpoint loader rejects malformed files") {
    TempDir tmp;
    DenoiserModel m = DenoiserModel::init(tiny_config(), 17);
    std::string path = tmp.file("good.ckpt");
    save_checkpoint(m, path);
    std::string blob = slurp_file(path);

    auto write_and_try = [&](const std::string& name, const std::string& content) {
        std::string p = tmp.file(name);
        spit_file(p, content);
        CHECK_THROWS_AS(load_checkpoint(p), ParamError);
    };

    write_and_try("magic.ckpt", "other format v9\n" + blob.substr(blob.find('\n') + 1));
    write_and_try("truncated.ckpt", blob.substr(0, blob.size() / 2));
    write_and_try("empty.ckpt", "");
    // Corrupting the payload size line breaks the byte accounting.
    std::string resized = blob;
    auto pos = resized.find("payload ");
    REQUIRE(pos != std::string::npos);
    resized.replace(pos, resized.find('\n', pos) - pos, "payload 12");
    write_and_try("resized.ckpt", resized);
    CHECK_THROWS_AS(load_checkpoint(tmp.file("missing.ckpt")), ParamError);
}

TEST_CASE("blob dataset is normalized, labeled, and seed-deterministic") {
    DenoiserConfig cfg = tiny_config();
    auto data = make_blob_dataset(cfg, 64, 99);
    REQUIRE(data.size() == 64);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const ToyImage& im = data[i];
        CHECK(im.label == static_cast<int>(i) % cfg.n_classes);
        REQUIRE(im.pixels.size() == cfg.data_dim());
        CHECK(im.pixels.mean() == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
        double var = im.pixels.array().square().mean();
        CHECK(var == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(measure_signal_power(data) == doctest::Approx(1.0).epsilon(1e-9));

    auto again = make_blob_dataset(cfg, 64, 99);
    for (std::size_t i = 0; i < data.size(); ++i)
        CHECK((data[i].pixels - again[i].pixels).cwiseAbs().maxCoeff() == 0.0);
    auto other = make_blob_dataset(cfg, 64, 100);
    CHECK((data[0].pixels - other[0].pixels).cwiseAbs().maxCoeff() > 0.0);

    // Class-conditional structure: the two class-mean images disagree.
    VectorXd mean0 = VectorXd::Zero(cfg.data_dim());
    VectorXd mean1 = VectorXd::Zero(cfg.data_dim());
    int n0 = 0, n1 = 0;
    for (const auto& im : data) {
        if (im.label == 0) {
            mean0 += im.pixels;
            ++n0;
        } else {
            mean1 += im.pixels;
            ++n1;
        }
    }
    mean0 /= n0;
    mean1 /= n1;
    CHECK((mean0 - mean1).norm() > 1.0);

    CHECK(make_blob_dataset(cfg, 0, 1).empty());
    CHECK_THROWS_AS(make_blob_dataset(cfg, -1, 1), ParamError);
    CHECK_THROWS_AS(measure_signal_power({}), ParamError);
}

TEST_CASE("visit_params walks tensors in a fixed, complete order") {
    DenoiserConfig cfg = tiny_config();
    DenoiserModel m = DenoiserModel::init(cfg, 19);
    std::vector<std::string> names;
    long total_elems = 0;
    visit_params(m, [&](const std::string& name, const auto& t) {
        names.push_back(name);
        total_elems += t.rows() * t.cols();
    });
    REQUIRE(names.size() == static_cast<std::size_t>(8 + 16 * cfg.n_blocks + 4));
    CHECK(names.front() == "patch_embed.weight");
    CHECK(names[8] == "block0.ln1.gain");
    CHECK(names.back() == "head.bias");
    CHECK(total_elems > 0);

    // Identical order on every visit, mutable or const.
    std::vector<std::string> again;
    const DenoiserModel& cm = m;
    visit_params(cm, [&](const std::string& name, const auto&) {
        again.push_back(name);
    });
    CHECK(again == names);
}

TEST_CASE("gelu matches the exact erf form and its derivative") {
    CHECK(gelu(0.0) == 0.0);
    CHECK(gelu(1.0) == doctest::Approx(0.8413447460685429).epsilon(1e-14));
    CHECK(gelu(-1.0) == doctest::Approx(-0.15865525393145707).epsilon(1e-12));
    CHECK(gelu(10.0) == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(std::abs(gelu(-10.0)) < 1e-12);

    for (double x : {-2.5, -1.0, -0.3, 0.0, 0.4, 1.7, 3.0}) {
        double h = 1e-6;
        double fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
        CHECK(gelu_grad(x) == doctest::Approx(fd).epsilon(1e-7));
    }
}
