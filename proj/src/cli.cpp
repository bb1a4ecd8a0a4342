#include "trajprune/cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "trajprune/errors.hpp"
#include "trajprune/pipeline.hpp"
#include "trajprune/rng.hpp"
#include "trajprune/textio.hpp"
#include "trajprune/train.hpp"

namespace trajprune {

namespace fs = std::filesystem;

namespace {

struct RunConfig {
    // schedule
    std::string family = "linear";
    int horizon = 1000;
    double beta_start = 0.0;  // 0 = family default
    double beta_end = 0.0;
    // score
    double lambda = 0.01;
    double threshold_m = 0.55;
    double signal_power = 1.0;
    double noise_power = 1.0;
    double signal_dim = 0.0;  // 0 = auto (family convention or model dim)
    double aggregate = 0.3;
    std::string weighting = "per_stage_uniform";
    double s_max = 0.9;
    std::string preset;
    // model
    int image_size = 8;
    int channels = 1;
    int patch = 2;
    int d_model = 64;
    int n_heads = 4;
    int n_blocks = 4;
    int mlp_hidden = 256;
    int n_classes = 2;
    // training and data
    int epochs = 30;
    int batch_size = 32;
    double lr = 1e-3;
    double p_uncond = 0.1;
    int train_size = 256;
    int heldout_size = 64;
    // calibration and pruning
    int n_calib = 1024;
    bool cfg_enabled = true;
    double damping = 1e-2;
    // sampling and evaluation
    std::string sampler = "ddim";
    int steps = 20;
    double cfg_scale = 1.0;
    int n_samples = 8;
    int n_eval = 64;
    int label = -1;  // -1 cycles through classes
    std::string baseline;
    // io
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    int workers = 1;
    std::string checkpoint;
    std::string mosaic_dir;
};

NoiseSchedule schedule_from(const RunConfig& rc) {
    ScheduleFamily fam = parse_family(rc.family);
    if (rc.beta_start == 0.0 && rc.beta_end == 0.0)
        return default_schedule(fam, rc.horizon);
    return build_schedule(fam, rc.horizon, rc.beta_start, rc.beta_end);
}

DenoiserConfig model_config_from(const RunConfig& rc) {
    DenoiserConfig cfg;
    cfg.image_size = rc.image_size;
    cfg.channels = rc.channels;
    cfg.patch = rc.patch;
    cfg.d_model = rc.d_model;
    cfg.n_heads = rc.n_heads;
    cfg.n_blocks = rc.n_blocks;
    cfg.mlp_hidden = rc.mlp_hidden;
    cfg.n_classes = rc.n_classes;
    cfg.validate();
    return cfg;
}

// With no explicit override the score's dimension factor follows the latents
// the schedule convention targets: 4096 for the linear family, 65536 for
// scaled_linear. Model-aware paths use the model's own data dimension.
double resolve_signal_dim(const RunConfig& rc, const DenoiserConfig* model_cfg) {
    if (rc.signal_dim > 0.0) return rc.signal_dim;
    if (model_cfg) return static_cast<double>(model_cfg->data_dim());
    return parse_family(rc.family) == ScheduleFamily::linear ? 4096.0 : 65536.0;
}

ScoreSettings score_settings_from(const RunConfig& rc,
                                  const DenoiserConfig* model_cfg) {
    ScoreSettings s;
    s.lambda = rc.lambda;
    s.threshold_m = rc.threshold_m;
    s.powers = {rc.signal_power, rc.noise_power};
    s.signal_dim = resolve_signal_dim(rc, model_cfg);
    return s;
}

SamplerConfig sampler_from(const RunConfig& rc) {
    SamplerConfig sc;
    sc.kind = parse_sampler(rc.sampler);
    sc.steps = rc.steps;
    sc.cfg_scale = rc.cfg_scale;
    return sc;
}

StagePlan plan_from(const RunConfig& rc, const NoiseSchedule& schedule,
                    const DenoiserConfig* model_cfg) {
    ScoreSettings settings = score_settings_from(rc, model_cfg);
    Weighting weighting = parse_weighting(rc.weighting);
    if (rc.preset.empty()) {
        ScoreCurve curve = score_curve(schedule, settings.lambda, settings.powers,
                                       settings.signal_dim);
        StagePlan plan = make_plan(curve, settings.threshold_m);
        return allocate_sparsity(plan, curve, rc.aggregate, weighting, rc.s_max);
    }
    // Preset form: family-aggregate, e.g. dit-0.30.
    auto dash = rc.preset.rfind('-');
    if (dash == std::string::npos)
        throw ParamError("preset must look like dit-0.30 or sdxl-0.15");
    const AllocationRow& row = AllocationTable::builtin().lookup(
        rc.preset.substr(0, dash),
        parse_double(rc.preset.substr(dash + 1), "preset aggregate"));
    if (row.divider1 >= schedule.horizon)
        throw ParamError("preset dividers need horizon > " +
                         std::to_string(row.divider1));
    StagePlan plan;
    plan.horizon = schedule.horizon;
    plan.divider1 = row.divider1;
    plan.divider2 = row.divider2;
    plan.threshold_fraction = rc.threshold_m;
    plan.lambda = rc.lambda;
    plan.target_aggregate = row.aggregate;
    plan.weighting = weighting;
    plan.sparsity = row.sparsity;
    return plan;
}

std::vector<ToyImage> dataset_from(const RunConfig& rc, const DenoiserConfig& cfg) {
    return make_blob_dataset(cfg, rc.train_size + rc.heldout_size, rc.seed);
}

std::vector<ToyImage> train_split(std::vector<ToyImage> all, const RunConfig& rc) {
    all.resize(static_cast<std::size_t>(rc.train_size));
    return all;
}

std::vector<ToyImage> heldout_split(std::vector<ToyImage> all, const RunConfig& rc) {
    all.erase(all.begin(), all.begin() + rc.train_size);
    return all;
}

int cmd_analyze(const RunConfig& rc) {
    NoiseSchedule schedule = schedule_from(rc);
    ScoreSettings settings = score_settings_from(rc, nullptr);
    ScoreCurve curve = score_curve(schedule, settings.lambda, settings.powers,
                                   settings.signal_dim);
    StagePlan plan = make_plan(curve, settings.threshold_m);
    plan = allocate_sparsity(plan, curve, rc.aggregate, parse_weighting(rc.weighting),
                             rc.s_max);

    fs::create_directories(rc.out_dir);
    std::ostringstream curves;
    write_curves_csv(curves, schedule, curve, settings.powers);
    spit_file((fs::path(rc.out_dir) / "curves.csv").string(), curves.str());
    spit_file((fs::path(rc.out_dir) / "plan.txt").string(), plan_to_text(plan));

    std::cout << "dividers " << plan.divider1 << ' ' << plan.divider2 << '\n'
              << "sparsities " << format_double(plan.sparsity[0]) << ' '
              << format_double(plan.sparsity[1]) << ' '
              << format_double(plan.sparsity[2]) << '\n'
              << "wrote " << rc.out_dir << "/curves.csv and plan.txt\n";
    return 0;
}

int cmd_train(const RunConfig& rc) {
    DenoiserConfig cfg = model_config_from(rc);
    NoiseSchedule schedule = schedule_from(rc);
    auto all = dataset_from(rc, cfg);
    auto train_set = train_split(all, rc);
    auto heldout = heldout_split(std::move(all), rc);

    DenoiserModel model = DenoiserModel::init(cfg, rc.seed);
    TrainConfig tc;
    tc.epochs = rc.epochs;
    tc.batch_size = rc.batch_size;
    tc.lr = rc.lr;
    tc.p_uncond = rc.p_uncond;
    tc.seed = rc.seed;
    TrainLog log = train(model, train_set, schedule, tc);

    fs::create_directories(rc.out_dir);
    save_checkpoint(model, (fs::path(rc.out_dir) / "model.ckpt").string());
    std::ostringstream csv;
    write_loss_csv(csv, log);
    spit_file((fs::path(rc.out_dir) / "loss.csv").string(), csv.str());

    double held = eval_loss(model, heldout, schedule, {1, schedule.horizon}, 4,
                            derive_seed(rc.seed, "train-heldout"));
    std::cout << "final_train_loss "
              << (log.epoch_loss.empty() ? std::string("nan")
                                         : format_double(log.epoch_loss.back()))
              << '\n'
              << "heldout_loss " << format_double(held) << '\n'
              << "wrote " << rc.out_dir << "/model.ckpt and loss.csv\n";
    return 0;
}

int cmd_prune(const RunConfig& rc) {
    if (rc.checkpoint.empty()) throw ParamError("prune needs --checkpoint");
    DenoiserModel dense = load_checkpoint(rc.checkpoint);
    NoiseSchedule schedule = schedule_from(rc);
    StagePlan plan = plan_from(rc, schedule, &dense.cfg);

    auto dataset = train_split(dataset_from(rc, dense.cfg), rc);
    PruneRunOptions opts;
    opts.n_calib = rc.n_calib;
    opts.cfg_enabled = rc.cfg_enabled;
    opts.prune.rel_damping = rc.damping;
    opts.workers = rc.workers;

    std::array<std::vector<CalibrationItem>, 3> items;
    MosaicModel mosaic =
        run_prune(dense, plan, schedule, dataset, opts, rc.seed, &items);
    save_mosaic(mosaic, rc.out_dir);
    for (int stage = 0; stage < 3; ++stage) {
        std::ostringstream manifest;
        write_calibration_manifest(manifest, items[static_cast<std::size_t>(stage)]);
        spit_file((fs::path(rc.out_dir) /
                   ("calib_stage" + std::to_string(stage + 1) + ".txt"))
                      .string(),
                  manifest.str());
    }

    std::cout << "dividers " << plan.divider1 << ' ' << plan.divider2 << '\n'
              << "sparsities " << format_double(plan.sparsity[0]) << ' '
              << format_double(plan.sparsity[1]) << ' '
              << format_double(plan.sparsity[2]) << '\n'
              << "wrote mosaic to " << rc.out_dir << '\n';
    return 0;
}

int cmd_sample(const RunConfig& rc) {
    if (rc.checkpoint.empty() && rc.mosaic_dir.empty())
        throw ParamError("sample needs --checkpoint or --mosaic");
    SamplerConfig sc = sampler_from(rc);

    std::optional<MosaicModel> mosaic;
    std::optional<DenoiserModel> dense;
    const DenoiserConfig* cfg = nullptr;
    if (!rc.mosaic_dir.empty()) {
        mosaic = load_mosaic(rc.mosaic_dir);
        cfg = &mosaic->dense.cfg;
    } else {
        dense = load_checkpoint(rc.checkpoint);
        cfg = &dense->cfg;
    }

    std::ostringstream csv;
    csv << "sample,label";
    for (int i = 0; i < cfg->data_dim(); ++i) csv << ",px" << i;
    csv << '\n';
    for (int i = 0; i < rc.n_samples; ++i) {
        int label = rc.label >= 0 ? rc.label : i % cfg->n_classes;
        auto rng =
            make_rng(derive_seed(rc.seed, "sample", static_cast<std::uint64_t>(i)));
        Eigen::VectorXd x =
            mosaic ? mosaic_sample(*mosaic, schedule_from(rc), sc, label, rng)
                   : sample(*dense, schedule_from(rc), sc, label, rng);
        csv << i << ',' << label;
        for (int j = 0; j < x.size(); ++j) csv << ',' << format_double(x(j));
        csv << '\n';
    }
    fs::create_directories(rc.out_dir);
    spit_file((fs::path(rc.out_dir) / "samples.csv").string(), csv.str());
    std::cout << "wrote " << rc.n_samples << " samples to " << rc.out_dir
              << "/samples.csv\n";
    return 0;
}

int cmd_eval(const RunConfig& rc) {
    if (rc.mosaic_dir.empty()) throw ParamError("eval needs --mosaic");
    MosaicModel mosaic = load_mosaic(rc.mosaic_dir);
    if (!rc.checkpoint.empty()) mosaic.dense = load_checkpoint(rc.checkpoint);
    NoiseSchedule schedule = schedule_from(rc);
    SamplerConfig sc = sampler_from(rc);
    auto heldout = heldout_split(dataset_from(rc, mosaic.dense.cfg), rc);

    EvalReport ours =
        evaluate(mosaic, schedule, heldout, sc, rc.n_eval, rc.seed, rc.workers);

    std::ostringstream text, csv;
    write_eval_report_text(text, ours);
    write_eval_header(csv);
    write_eval_row(csv, "mosaic", ours);

    if (!rc.baseline.empty()) {
        if (rc.baseline != "uniform")
            throw ParamError("unknown baseline: '" + rc.baseline + "'");
        StagePlan uniform_plan = mosaic.plan;
        uniform_plan.sparsity = {uniform_plan.target_aggregate,
                                 uniform_plan.target_aggregate,
                                 uniform_plan.target_aggregate};
        auto dataset = train_split(dataset_from(rc, mosaic.dense.cfg), rc);
        PruneRunOptions opts;
        opts.n_calib = rc.n_calib;
        opts.cfg_enabled = rc.cfg_enabled;
        opts.prune.rel_damping = rc.damping;
        opts.workers = rc.workers;
        MosaicModel uniform_mosaic = run_prune(mosaic.dense, uniform_plan, schedule,
                                               dataset, opts, rc.seed);
        EvalReport uni = evaluate(uniform_mosaic, schedule, heldout, sc, rc.n_eval,
                                  rc.seed, rc.workers);
        text << "baseline uniform\n";
        write_eval_report_text(text, uni);
        write_eval_row(csv, "uniform", uni);
    }

    fs::create_directories(rc.out_dir);
    spit_file((fs::path(rc.out_dir) / "report.txt").string(), text.str());
    spit_file((fs::path(rc.out_dir) / "report.csv").string(), csv.str());
    std::cout << "divergence_mean " << format_double(ours.divergence_mean) << '\n'
              << "macs_mosaic " << ours.macs_mosaic << '\n'
              << "macs_dense " << ours.macs_dense << '\n'
              << "wrote " << rc.out_dir << "/report.txt and report.csv\n";
    return 0;
}

void add_common_options(CLI::App* app, RunConfig& rc) {
    app->add_option("--seed", rc.seed, "master seed");
    app->add_option("--out-dir", rc.out_dir, "output directory");
    app->add_option("--workers", rc.workers, "worker thread count");
    app->add_option("--family", rc.family, "schedule family: linear|scaled_linear");
    app->add_option("--horizon", rc.horizon, "diffusion steps T");
    app->add_option("--beta-start", rc.beta_start, "first beta (0 = family default)");
    app->add_option("--beta-end", rc.beta_end, "last beta (0 = family default)");
    app->add_option("--lambda", rc.lambda, "SNR influence weight");
    app->add_option("--M", rc.threshold_m, "stage threshold fraction of peak score");
    app->add_option("--signal-power", rc.signal_power, "per-element signal power");
    app->add_option("--noise-power", rc.noise_power, "per-element noise power");
    app->add_option("--signal-dim", rc.signal_dim,
                    "dimension factor for the score's gradient term (0 = auto)");
    app->add_option("--aggregate", rc.aggregate, "target aggregate sparsity");
    app->add_option("--weighting", rc.weighting,
                    "aggregate weighting: per_stage_uniform|step_weighted");
    app->add_option("--s-max", rc.s_max, "per-stage sparsity cap");
    app->add_option("--image-size", rc.image_size);
    app->add_option("--channels", rc.channels);
    app->add_option("--patch", rc.patch);
    app->add_option("--d-model", rc.d_model);
    app->add_option("--n-heads", rc.n_heads);
    app->add_option("--n-blocks", rc.n_blocks);
    app->add_option("--mlp-hidden", rc.mlp_hidden);
    app->add_option("--n-classes", rc.n_classes);
    app->add_option("--train-size", rc.train_size);
    app->add_option("--heldout-size", rc.heldout_size);
    app->add_option("--sampler", rc.sampler, "ddpm|ddim");
    app->add_option("--steps", rc.steps, "ddim step count");
    app->add_option("--cfg-scale", rc.cfg_scale, "guidance scale (1 = off)");
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    RunConfig rc;
    CLI::App app{"trajectory-aware structural pruning for diffusion denoisers"};
    app.require_subcommand(1);
    // Keys for a subcommand live under a section named after it, e.g.
    // [analyze] followed by M=0.7. The flag must precede the subcommand.
    app.set_config("--config", "",
                   "read options from a config file ([subcommand] sections)");

    CLI::App* analyze =
        app.add_subcommand("analyze", "score curve, stage division, allocation");
    CLI::App* train_cmd =
        app.add_subcommand("train", "train the toy denoiser from scratch");
    CLI::App* prune =
        app.add_subcommand("prune", "calibrate and prune per-stage sub-networks");
    CLI::App* sample = app.add_subcommand("sample", "generate images");
    CLI::App* eval = app.add_subcommand("eval", "compare mosaic against dense");

    for (CLI::App* sub : {analyze, train_cmd, prune, sample, eval})
        add_common_options(sub, rc);

    train_cmd->add_option("--epochs", rc.epochs);
    train_cmd->add_option("--batch-size", rc.batch_size);
    train_cmd->add_option("--lr", rc.lr);
    train_cmd->add_option("--p-uncond", rc.p_uncond);

    prune->add_option("--checkpoint", rc.checkpoint, "dense model checkpoint");
    prune->add_option("--preset", rc.preset, "allocation preset, e.g. dit-0.30");
    prune->add_option("--n-calib", rc.n_calib, "calibration items per stage");
    prune->add_flag("--cfg,!--no-cfg", rc.cfg_enabled,
                    "duplicate null-label calibration items");
    prune->add_option("--damping", rc.damping, "relative Hessian damping");

    sample->add_option("--checkpoint", rc.checkpoint, "dense model checkpoint");
    sample->add_option("--mosaic", rc.mosaic_dir, "mosaic directory");
    sample->add_option("--n-samples", rc.n_samples);
    sample->add_option("--label", rc.label, "fixed class label (-1 cycles)");

    eval->add_option("--checkpoint", rc.checkpoint, "dense checkpoint override");
    eval->add_option("--mosaic", rc.mosaic_dir, "mosaic directory");
    eval->add_option("--n-eval", rc.n_eval, "paired sample count");
    eval->add_option("--baseline", rc.baseline, "extra comparison row: uniform");
    eval->add_option("--n-calib", rc.n_calib, "calibration items per stage");
    eval->add_flag("--cfg,!--no-cfg", rc.cfg_enabled);
    eval->add_option("--damping", rc.damping);

    try {
        app.parse(argc, argv);
        if (analyze->parsed()) return cmd_analyze(rc);
        if (train_cmd->parsed()) return cmd_train(rc);
        if (prune->parsed()) return cmd_prune(rc);
        if (sample->parsed()) return cmd_sample(rc);
        if (eval->parsed()) return cmd_eval(rc);
        return 2;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const DegenerateCurveError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const TrainingError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 5;
    } catch (const ParamError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace trajprune
