#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <vector>

#include "trajprune/denoiser.hpp"
#include "trajprune/pruner.hpp"
#include "trajprune/schedule.hpp"
#include "trajprune/trajectory.hpp"

namespace trajprune {

// One noised latent aimed at a stage's SNR band. When cfg_duplicated is set
// the item is run twice, once with its label and once with the null label,
// sharing the same x_t and t.
struct CalibrationItem {
    Eigen::VectorXd x_t;
    int t = 0;
    int label = 0;
    bool cfg_duplicated = false;
};

// n items: draw an image, draw t uniformly inside the stage, noise it.
std::vector<CalibrationItem> build_calibration(const std::vector<ToyImage>& dataset,
                                               StageRange stage,
                                               const NoiseSchedule& schedule,
                                               int n, bool cfg_enabled,
                                               std::uint64_t seed);

// One accumulator per prunable layer, all fed from the same forward passes.
using LayerHessianSet = std::map<LayerId, HessianAccumulator>;

// Runs the model on every item (twice per CFG-duplicated item) and
// accumulates each prunable layer's input rows. Weights are untouched.
// Workers split items into contiguous chunks with partial sums merged in
// chunk order; the result is bitwise stable for a fixed worker count.
LayerHessianSet capture_hessians(const DenoiserModel& model,
                                 const std::vector<CalibrationItem>& items,
                                 int workers = 1);

// Audit listing: sample id, t, label, cfg flag.
void write_calibration_manifest(std::ostream& out,
                                const std::vector<CalibrationItem>& items);

}  // namespace trajprune
