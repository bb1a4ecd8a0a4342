#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "trajprune/schedule.hpp"

namespace trajprune {

// Closed range of timesteps belonging to one stage.
struct StageRange {
    int t_lo = 0;
    int t_hi = 0;
    bool contains(int t) const { return t >= t_lo && t <= t_hi; }
    int length() const { return t_hi - t_lo + 1; }
};

enum class Weighting { per_stage_uniform, step_weighted };

Weighting parse_weighting(const std::string& name);
std::string weighting_name(Weighting w);

// Three-stage division of the reverse trajectory with per-stage sparsity.
// Stage 1 covers (divider1, horizon], stage 2 covers (divider2, divider1],
// stage 3 covers [1, divider2]. Stages are indexed 0..2 in code.
struct StagePlan {
    int horizon = 0;
    int divider1 = 0;
    int divider2 = 0;
    double threshold_fraction = 0.0;       // M
    double lambda = 0.0;
    double target_aggregate = 0.0;
    Weighting weighting = Weighting::per_stage_uniform;
    std::array<double, 3> mean_score{0.0, 0.0, 0.0};
    std::array<double, 3> sparsity{0.0, 0.0, 0.0};

    StageRange stage_range(int stage) const;
    int stage_of(int t) const;  // 0, 1 or 2
};

// Largest and smallest timestep of the single contiguous region where
// score(t) >= M * max score. Throws DegenerateCurveError when the region
// touches either end of the curve (no crossing on that side) and
// AmbiguousCrossingError when several disjoint regions exist.
std::pair<int, int> divide_stages(const ScoreCurve& curve, double threshold_fraction);

// divide_stages plus per-stage mean scores, bundled into a plan with
// sparsities left at zero.
StagePlan make_plan(const ScoreCurve& curve, double threshold_fraction);

// Fills plan.sparsity so that slower-learning stages (lower mean score) get
// more sparsity: s_i proportional to 1 - normalized mean score, scaled to hit
// target_aggregate under the chosen weighting, each stage capped at s_max.
// Throws InfeasibleError when the cap makes the target unreachable.
StagePlan allocate_sparsity(StagePlan plan, const ScoreCurve& curve,
                            double target_aggregate, Weighting weighting,
                            double s_max = 0.9);

// Aggregate sparsity of a plan under its weighting: plain mean over stages,
// or mean weighted by stage length in timesteps.
double aggregate_sparsity(const StagePlan& plan);

// Published per-stage allocations for two pretrained model families.
struct AllocationRow {
    std::string family;
    double aggregate = 0.0;
    std::array<double, 3> sparsity{0.0, 0.0, 0.0};
    int divider1 = 0;
    int divider2 = 0;
    std::string note;
};

class AllocationTable {
  public:
    static const AllocationTable& builtin();
    const AllocationRow& lookup(const std::string& family, double aggregate) const;
    const std::vector<AllocationRow>& rows() const { return rows_; }

  private:
    std::vector<AllocationRow> rows_;
};

// Key-value text form (keys: horizon, dividers, sparsities, mean_scores,
// M, lambda, aggregate, weighting). Round-trips losslessly.
std::string plan_to_text(const StagePlan& plan);
StagePlan parse_plan(const std::string& text);

}  // namespace trajprune
