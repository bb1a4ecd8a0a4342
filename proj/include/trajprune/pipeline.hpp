#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "trajprune/calibration.hpp"
#include "trajprune/pruner.hpp"
#include "trajprune/sampler.hpp"
#include "trajprune/trajectory.hpp"

namespace trajprune {

struct ScoreSettings {
    double lambda = 0.01;
    double threshold_m = 0.55;
    PowerAssumption powers;
    // Dimension multiplier restoring total-norm scale to the score's gradient
    // term; see score_curve.
    double signal_dim = 4096.0;
};

// score_curve + divide_stages + allocate_sparsity in one call.
StagePlan run_divide(const NoiseSchedule& schedule, const ScoreSettings& settings,
                     double target_aggregate, Weighting weighting);

struct SubnetLayerReport {
    GroupMask mask;
    double recon_error = 0.0;
    std::vector<SaliencyRecord> trace;
};

struct StageSubnet {
    DenoiserModel model;
    std::map<LayerId, SubnetLayerReport> layers;
};

// Dense parent plus one pruned sub-network per stage. The parent is kept for
// evaluation only; inference always dispatches to a sub-network.
struct MosaicModel {
    DenoiserModel dense;
    StagePlan plan;
    std::array<StageSubnet, 3> stages;

    const DenoiserModel& subnet_for(int t) const {
        return stages[static_cast<std::size_t>(plan.stage_of(t))].model;
    }
};

struct PruneRunOptions {
    int n_calib = 1024;
    bool cfg_enabled = true;
    PruneOptions prune;
    int workers = 1;
};

// For each stage: SNR-targeted calibration, Hessian capture on the dense
// parent, then second-order pruning of every attention and MLP block at the
// stage's sparsity. items_out, when given, receives each stage's
// calibration items for audit.
MosaicModel run_prune(const DenoiserModel& dense, const StagePlan& plan,
                      const NoiseSchedule& schedule,
                      const std::vector<ToyImage>& dataset,
                      const PruneRunOptions& opts, std::uint64_t seed,
                      std::array<std::vector<CalibrationItem>, 3>* items_out = nullptr);

// Reverse sampling where each denoiser call goes to the sub-network owning
// the current timestep. dispatch, when given, receives (t, stage) pairs.
Eigen::VectorXd mosaic_sample(const MosaicModel& mosaic, const NoiseSchedule& schedule,
                              const SamplerConfig& sc, int label,
                              std::mt19937_64& rng,
                              std::vector<std::pair<int, int>>* dispatch = nullptr);

struct EvalReport {
    int n_pairs = 0;
    double divergence_mean = 0.0;           // mosaic vs dense, per element
    std::vector<double> pair_divergence;    // one entry per shared-seed pair
    std::array<double, 3> stage_loss_mosaic{};  // held-out loss per stage subnet
    std::array<double, 3> stage_loss_dense{};   // dense model on the same draws
    long long macs_mosaic = 0;
    long long macs_dense = 0;
    std::array<double, 3> realized_sparsity{};  // pruned / total prunable columns
};

// Shared-seed paired sampling plus stage-matched held-out losses and MACs.
EvalReport evaluate(const MosaicModel& mosaic, const NoiseSchedule& schedule,
                    const std::vector<ToyImage>& heldout, const SamplerConfig& sc,
                    int n_eval, std::uint64_t seed, int workers = 1);

void write_eval_report_text(std::ostream& out, const EvalReport& report);
// One CSV row per variant; write_eval_header first, then rows.
void write_eval_header(std::ostream& out);
void write_eval_row(std::ostream& out, const std::string& variant,
                    const EvalReport& report);

// Analytic matmul MAC count of one denoiser forward; masks, when given, drop
// the pruned head and neuron groups from every term they touch.
long long mac_count_forward(const DenoiserConfig& cfg,
                            const std::map<LayerId, GroupMask>* masks = nullptr);

// Whole sampling run; guidance at cfg_scale != 1 doubles the forward count.
long long mac_count(const DenoiserModel& model, const SamplerConfig& sc,
                    int horizon);
long long mac_count(const MosaicModel& mosaic, const SamplerConfig& sc);

// Self-contained on-disk layout: dense.ckpt, plan.txt, stage{1..3}.ckpt,
// masks.txt, saliency_stage{i}.{layer}.csv.
void save_mosaic(const MosaicModel& mosaic, const std::string& dir);
MosaicModel load_mosaic(const std::string& dir);

}  // namespace trajprune
