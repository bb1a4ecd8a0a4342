#include "trajprune/pipeline.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>

#include "trajprune/errors.hpp"
#include "trajprune/rng.hpp"
#include "trajprune/textio.hpp"
#include "trajprune/train.hpp"

namespace trajprune {

namespace fs = std::filesystem;
using Eigen::VectorXd;

StagePlan run_divide(const NoiseSchedule& schedule, const ScoreSettings& settings,
                     double target_aggregate, Weighting weighting) {
    ScoreCurve curve = score_curve(schedule, settings.lambda, settings.powers,
                                   settings.signal_dim);
    StagePlan plan = make_plan(curve, settings.threshold_m);
    return allocate_sparsity(plan, curve, target_aggregate, weighting);
}

MosaicModel run_prune(const DenoiserModel& dense, const StagePlan& plan,
                      const NoiseSchedule& schedule,
                      const std::vector<ToyImage>& dataset,
                      const PruneRunOptions& opts, std::uint64_t seed,
                      std::array<std::vector<CalibrationItem>, 3>* items_out) {
    if (plan.horizon != schedule.horizon)
        throw ParamError("plan horizon does not match schedule");
    if (opts.n_calib < 1) throw ParamError("n_calib must be >= 1");

    MosaicModel mosaic;
    mosaic.dense = dense;
    mosaic.plan = plan;

    for (int stage = 0; stage < 3; ++stage) {
        StageRange range = plan.stage_range(stage);
        double s_i = plan.sparsity[static_cast<std::size_t>(stage)];

        StageSubnet& subnet = mosaic.stages[static_cast<std::size_t>(stage)];
        subnet.model = dense;

        auto items = build_calibration(
            dataset, range, schedule, opts.n_calib, opts.cfg_enabled,
            derive_seed(seed, "stage-calib", static_cast<std::uint64_t>(stage)));
        for (const auto& item : items)
            if (!range.contains(item.t))
                throw Error("stage purity violated: calibration item at t = " +
                            std::to_string(item.t));

        LayerHessianSet hessians =
            capture_hessians(dense, items, opts.workers);
        if (items_out) (*items_out)[static_cast<std::size_t>(stage)] = std::move(items);

        for (int b = 0; b < dense.cfg.n_blocks; ++b) {
            auto& blk = subnet.model.blocks[static_cast<std::size_t>(b)];
            LayerId attn_id{b, LayerKind::attn_out_proj};
            LayerId mlp_id{b, LayerKind::mlp_down_proj};
            PruneResult ra = prune_attention_block(blk, dense.cfg,
                                                   hessians.at(attn_id), s_i,
                                                   opts.prune);
            subnet.layers[attn_id] = {ra.mask, ra.recon_error, std::move(ra.trace)};
            PruneResult rm = prune_mlp_block(blk, dense.cfg, hessians.at(mlp_id),
                                             s_i, opts.prune);
            subnet.layers[mlp_id] = {rm.mask, rm.recon_error, std::move(rm.trace)};
        }
    }
    return mosaic;
}

VectorXd mosaic_sample(const MosaicModel& mosaic, const NoiseSchedule& schedule,
                       const SamplerConfig& sc, int label, std::mt19937_64& rng,
                       std::vector<std::pair<int, int>>* dispatch) {
    std::vector<int> visited;
    VectorXd out = sample_loop(
        [&mosaic](int t) -> const DenoiserModel& { return mosaic.subnet_for(t); },
        schedule, sc, label, rng, dispatch ? &visited : nullptr);
    if (dispatch) {
        dispatch->clear();
        for (int t : visited) dispatch->push_back({t, mosaic.plan.stage_of(t)});
    }
    return out;
}

namespace {

std::map<LayerId, GroupMask> stage_masks(const StageSubnet& subnet) {
    std::map<LayerId, GroupMask> masks;
    for (const auto& [id, report] : subnet.layers) masks.emplace(id, report.mask);
    return masks;
}

int forwards_per_step(const SamplerConfig& sc) {
    return sc.cfg_scale == 1.0 ? 1 : 2;
}

}  // namespace

long long mac_count_forward(const DenoiserConfig& cfg,
                            const std::map<LayerId, GroupMask>* masks) {
    cfg.validate();
    const long long n = cfg.tokens(), d = cfg.d_model, pd = cfg.patch_dim(),
                    dh = cfg.head_dim();
    auto active = [&](int block, LayerKind kind, int total) {
        if (!masks) return total;
        auto it = masks->find(LayerId{block, kind});
        if (it == masks->end()) return total;
        return total - static_cast<int>(it->second.pruned.size());
    };

    long long total = n * d * pd;  // patch embedding
    total += 2 * d * d;            // time MLP
    for (int b = 0; b < cfg.n_blocks; ++b) {
        long long ah = active(b, LayerKind::attn_out_proj, cfg.n_heads);
        long long an = active(b, LayerKind::mlp_down_proj, cfg.mlp_hidden);
        total += 3 * n * (ah * dh) * d;   // q, k, v for live heads
        total += 2 * ah * n * n * dh;     // attention scores and value mix
        total += n * d * (ah * dh);       // out-projection surviving columns
        total += n * an * d;              // MLP up rows
        total += n * d * an;              // MLP down columns
    }
    total += n * pd * d;  // output head
    return total;
}

long long mac_count(const DenoiserModel& model, const SamplerConfig& sc,
                    int horizon) {
    int steps = sc.kind == SamplerConfig::Kind::ddpm ? horizon : sc.steps;
    if (steps < 1) throw ParamError("step count must be >= 1");
    return mac_count_forward(model.cfg) * steps * forwards_per_step(sc);
}

long long mac_count(const MosaicModel& mosaic, const SamplerConfig& sc) {
    const int horizon = mosaic.plan.horizon;
    std::array<long long, 3> per_stage{};
    for (int stage = 0; stage < 3; ++stage) {
        auto masks = stage_masks(mosaic.stages[static_cast<std::size_t>(stage)]);
        per_stage[static_cast<std::size_t>(stage)] =
            mac_count_forward(mosaic.dense.cfg, &masks);
    }

    long long total = 0;
    if (sc.kind == SamplerConfig::Kind::ddpm) {
        for (int t = 1; t <= horizon; ++t)
            total += per_stage[static_cast<std::size_t>(mosaic.plan.stage_of(t))];
    } else {
        for (int t : ddim_timesteps(horizon, sc.steps))
            total += per_stage[static_cast<std::size_t>(mosaic.plan.stage_of(t))];
    }
    return total * forwards_per_step(sc);
}

EvalReport evaluate(const MosaicModel& mosaic, const NoiseSchedule& schedule,
                    const std::vector<ToyImage>& heldout, const SamplerConfig& sc,
                    int n_eval, std::uint64_t seed, int workers) {
    if (n_eval < 1) throw ParamError("n_eval must be >= 1");
    if (workers < 1) throw ParamError("workers must be >= 1");

    EvalReport report;
    report.n_pairs = n_eval;
    report.pair_divergence.assign(static_cast<std::size_t>(n_eval), 0.0);

    const DenoiserModel& dense = mosaic.dense;
    const int d = dense.cfg.data_dim();

    // Shared-seed pairs: dense and mosaic consume identical draw streams.
    auto run_range = [&](int lo, int hi) {
        for (int i = lo; i < hi; ++i) {
            std::uint64_t pair_seed =
                derive_seed(seed, "eval-pair", static_cast<std::uint64_t>(i));
            int label = i % dense.cfg.n_classes;
            auto rng_dense = make_rng(pair_seed);
            VectorXd x_dense = sample(dense, schedule, sc, label, rng_dense);
            auto rng_mosaic = make_rng(pair_seed);
            VectorXd x_mosaic = mosaic_sample(mosaic, schedule, sc, label, rng_mosaic);
            report.pair_divergence[static_cast<std::size_t>(i)] =
                (x_mosaic - x_dense).squaredNorm() / d;
        }
    };
    if (workers == 1) {
        run_range(0, n_eval);
    } else {
        std::vector<std::thread> pool;
        int chunk = (n_eval + workers - 1) / workers;
        for (int w = 0; w < workers; ++w) {
            int lo = w * chunk, hi = std::min(n_eval, lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back(run_range, lo, hi);
        }
        for (auto& th : pool) th.join();
    }
    double acc = 0.0;
    for (double v : report.pair_divergence) acc += v;
    report.divergence_mean = acc / n_eval;

    // Stage-matched held-out losses, identical draws for subnet and dense.
    for (int stage = 0; stage < 3; ++stage) {
        StageRange range = mosaic.plan.stage_range(stage);
        std::uint64_t stage_seed =
            derive_seed(seed, "eval-stage", static_cast<std::uint64_t>(stage));
        report.stage_loss_mosaic[static_cast<std::size_t>(stage)] = eval_loss(
            mosaic.stages[static_cast<std::size_t>(stage)].model, heldout,
            schedule, range, 4, stage_seed);
        report.stage_loss_dense[static_cast<std::size_t>(stage)] =
            eval_loss(dense, heldout, schedule, range, 4, stage_seed);
    }

    report.macs_mosaic = mac_count(mosaic, sc);
    report.macs_dense = mac_count(dense, sc, schedule.horizon);
    for (int stage = 0; stage < 3; ++stage) {
        long long pruned = 0, total = 0;
        for (const auto& [id, rep] :
             mosaic.stages[static_cast<std::size_t>(stage)].layers) {
            pruned += rep.mask.pruned_columns();
            total += rep.mask.columns();
        }
        report.realized_sparsity[static_cast<std::size_t>(stage)] =
            total > 0 ? static_cast<double>(pruned) / static_cast<double>(total) : 0.0;
    }
    return report;
}

void write_eval_report_text(std::ostream& out, const EvalReport& r) {
    out << "pairs " << r.n_pairs << '\n'
        << "divergence_mean " << format_double(r.divergence_mean) << '\n'
        << "macs_mosaic " << r.macs_mosaic << '\n'
        << "macs_dense " << r.macs_dense << '\n';
    for (int i = 0; i < 3; ++i) {
        out << "stage" << (i + 1) << "_loss_mosaic "
            << format_double(r.stage_loss_mosaic[static_cast<std::size_t>(i)]) << '\n'
            << "stage" << (i + 1) << "_loss_dense "
            << format_double(r.stage_loss_dense[static_cast<std::size_t>(i)]) << '\n'
            << "stage" << (i + 1) << "_realized_sparsity "
            << format_double(r.realized_sparsity[static_cast<std::size_t>(i)]) << '\n';
    }
}

void write_eval_header(std::ostream& out) {
    out << "variant,divergence_mean,macs,stage1_loss,stage2_loss,stage3_loss,"
           "stage1_realized,stage2_realized,stage3_realized\n";
}

void write_eval_row(std::ostream& out, const std::string& variant,
                    const EvalReport& r) {
    out << variant << ',' << format_double(r.divergence_mean) << ','
        << r.macs_mosaic;
    for (int i = 0; i < 3; ++i)
        out << ',' << format_double(r.stage_loss_mosaic[static_cast<std::size_t>(i)]);
    for (int i = 0; i < 3; ++i)
        out << ','
            << format_double(r.realized_sparsity[static_cast<std::size_t>(i)]);
    out << '\n';
}

namespace {

LayerId parse_layer_id(const std::string& name) {
    auto dot = name.find('.');
    if (dot == std::string::npos || name.substr(0, 5) != "block")
        throw ParamError("bad layer name: '" + name + "'");
    int block = static_cast<int>(parse_long(name.substr(5, dot - 5), "layer block"));
    std::string kind = name.substr(dot + 1);
    if (kind == "attn_out_proj") return {block, LayerKind::attn_out_proj};
    if (kind == "mlp_down_proj") return {block, LayerKind::mlp_down_proj};
    throw ParamError("bad layer kind: '" + kind + "'");
}

}  // namespace

void save_mosaic(const MosaicModel& mosaic, const std::string& dir) {
    fs::create_directories(dir);
    save_checkpoint(mosaic.dense, (fs::path(dir) / "dense.ckpt").string());
    spit_file((fs::path(dir) / "plan.txt").string(), plan_to_text(mosaic.plan));

    std::ostringstream masks;
    for (int stage = 0; stage < 3; ++stage) {
        const auto& subnet = mosaic.stages[static_cast<std::size_t>(stage)];
        save_checkpoint(subnet.model,
                        (fs::path(dir) / ("stage" + std::to_string(stage + 1) + ".ckpt"))
                            .string());
        for (const auto& [id, rep] : subnet.layers) {
            masks << "stage" << (stage + 1) << ' ' << layer_name(id) << ' '
                  << rep.mask.n_groups << ' ' << rep.mask.group_size;
            for (int g : rep.mask.pruned) masks << ' ' << g;
            masks << '\n';

            std::ofstream csv(fs::path(dir) / ("saliency_stage" +
                                               std::to_string(stage + 1) + "." +
                                               layer_name(id) + ".csv"));
            PruneResult pr;
            pr.trace = rep.trace;
            write_saliency_csv(csv, pr);
        }
    }
    spit_file((fs::path(dir) / "masks.txt").string(), masks.str());
}

MosaicModel load_mosaic(const std::string& dir) {
    MosaicModel mosaic;
    mosaic.dense = load_checkpoint((fs::path(dir) / "dense.ckpt").string());
    mosaic.plan = parse_plan(slurp_file((fs::path(dir) / "plan.txt").string()));
    for (int stage = 0; stage < 3; ++stage)
        mosaic.stages[static_cast<std::size_t>(stage)].model = load_checkpoint(
            (fs::path(dir) / ("stage" + std::to_string(stage + 1) + ".ckpt")).string());

    // Saliency traces stay in their CSVs; only masks are restored here.
    std::istringstream in(slurp_file((fs::path(dir) / "masks.txt").string()));
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string stage_tok, layer_tok;
        int n_groups = 0, group_size = 0;
        ls >> stage_tok >> layer_tok >> n_groups >> group_size;
        if (ls.fail() || stage_tok.size() != 6 || stage_tok.substr(0, 5) != "stage")
            throw ParamError("malformed masks.txt line: '" + line + "'");
        int stage = stage_tok[5] - '1';
        if (stage < 0 || stage > 2)
            throw ParamError("bad stage in masks.txt: '" + stage_tok + "'");
        GroupMask mask{n_groups, group_size, {}};
        int g;
        while (ls >> g) mask.pruned.push_back(g);
        SubnetLayerReport rep;
        rep.mask = std::move(mask);
        mosaic.stages[static_cast<std::size_t>(stage)]
            .layers[parse_layer_id(layer_tok)] = std::move(rep);
    }
    return mosaic;
}

}  // namespace trajprune
