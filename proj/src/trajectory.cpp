#include "trajprune/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "trajprune/errors.hpp"
#include "trajprune/textio.hpp"

namespace trajprune {

Weighting parse_weighting(const std::string& name) {
    if (name == "per_stage_uniform") return Weighting::per_stage_uniform;
    if (name == "step_weighted") return Weighting::step_weighted;
    throw ParamError("unknown weighting: '" + name +
                     "' (expected per_stage_uniform or step_weighted)");
}

std::string weighting_name(Weighting w) {
    return w == Weighting::per_stage_uniform ? "per_stage_uniform" : "step_weighted";
}

StageRange StagePlan::stage_range(int stage) const {
    switch (stage) {
        case 0: return {divider1 + 1, horizon};
        case 1: return {divider2 + 1, divider1};
        case 2: return {1, divider2};
        default: throw ParamError("stage index must be 0..2");
    }
}

int StagePlan::stage_of(int t) const {
    if (t < 1 || t > horizon)
        throw ParamError("timestep " + std::to_string(t) + " outside [1, " +
                         std::to_string(horizon) + "]");
    if (t > divider1) return 0;
    if (t > divider2) return 1;
    return 2;
}

std::pair<int, int> divide_stages(const ScoreCurve& curve, double threshold_fraction) {
    if (curve.size() < 3) throw ParamError("curve needs at least 3 points");
    if (!(threshold_fraction > 0.0) || !(threshold_fraction < 1.0))
        throw ParamError("threshold fraction must lie in (0, 1)");

    const double peak = *std::max_element(curve.score.begin(), curve.score.end());
    const double threshold = threshold_fraction * peak;

    // Contiguous runs of above-threshold timesteps.
    std::vector<std::pair<int, int>> runs;
    bool in_run = false;
    for (int t = curve.t_begin; t <= curve.t_end(); ++t) {
        if (curve.score_at(t) >= threshold) {
            if (!in_run) runs.push_back({t, t});
            runs.back().second = t;
            in_run = true;
        } else {
            in_run = false;
        }
    }

    if (runs.empty())
        throw DegenerateCurveError(
            "no timestep reaches the threshold; curve maximum is not positive");
    if (runs.size() > 1) {
        std::ostringstream msg;
        msg << "score crosses the threshold more than twice; above-threshold regions:";
        for (auto [lo, hi] : runs) msg << " [" << lo << ", " << hi << "]";
        throw AmbiguousCrossingError(msg.str());
    }

    auto [lo, hi] = runs.front();
    if (lo == curve.t_begin || hi == curve.t_end()) {
        std::ostringstream msg;
        msg << "above-threshold region [" << lo << ", " << hi
            << "] touches the end of the curve; no crossing on that side";
        throw DegenerateCurveError(msg.str());
    }
    return {hi, lo};
}

namespace {

std::array<double, 3> stage_means(const StagePlan& plan, const ScoreCurve& curve) {
    std::array<double, 3> means{};
    for (int stage = 0; stage < 3; ++stage) {
        StageRange r = plan.stage_range(stage);
        int lo = std::max(r.t_lo, curve.t_begin);
        int hi = std::min(r.t_hi, curve.t_end());
        if (lo > hi)
            throw ParamError("stage " + std::to_string(stage + 1) +
                             " holds no curve points");
        double sum = 0.0;
        for (int t = lo; t <= hi; ++t) sum += curve.score_at(t);
        means[static_cast<std::size_t>(stage)] = sum / (hi - lo + 1);
    }
    return means;
}

std::array<double, 3> stage_weights(const StagePlan& plan, Weighting weighting) {
    if (weighting == Weighting::per_stage_uniform)
        return {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    std::array<double, 3> w{};
    for (int stage = 0; stage < 3; ++stage)
        w[static_cast<std::size_t>(stage)] =
            static_cast<double>(plan.stage_range(stage).length()) / plan.horizon;
    return w;
}

void check_dividers(const StagePlan& plan) {
    if (plan.horizon < 4) throw ParamError("plan horizon too small");
    if (!(plan.divider2 >= 1 && plan.divider2 < plan.divider1 &&
          plan.divider1 < plan.horizon))
        throw ParamError("dividers must satisfy 1 <= divider2 < divider1 < horizon");
}

}  // namespace

StagePlan make_plan(const ScoreCurve& curve, double threshold_fraction) {
    StagePlan plan;
    plan.horizon = curve.t_end();
    plan.threshold_fraction = threshold_fraction;
    plan.lambda = curve.lambda;
    auto [d1, d2] = divide_stages(curve, threshold_fraction);
    plan.divider1 = d1;
    plan.divider2 = d2;
    plan.mean_score = stage_means(plan, curve);
    return plan;
}

StagePlan allocate_sparsity(StagePlan plan, const ScoreCurve& curve,
                            double target_aggregate, Weighting weighting,
                            double s_max) {
    check_dividers(plan);
    if (plan.horizon != curve.t_end())
        throw ParamError("plan horizon does not match curve");
    if (!(s_max > 0.0) || !(s_max < 1.0))
        throw ParamError("s_max must lie in (0, 1)");
    if (!(target_aggregate >= 0.0) || target_aggregate > s_max)
        throw ParamError("target aggregate must lie in [0, s_max]");

    plan.mean_score = stage_means(plan, curve);
    plan.target_aggregate = target_aggregate;
    plan.weighting = weighting;

    // Min-max normalize the stage means; a stage's share of sparsity grows as
    // its mean score shrinks (slow stages prune harder).
    const auto& m = plan.mean_score;
    double lo = *std::min_element(m.begin(), m.end());
    double hi = *std::max_element(m.begin(), m.end());
    std::array<double, 3> raw{};
    if (hi - lo <= 1e-12 * std::max(std::abs(hi), 1.0)) {
        raw = {1.0, 1.0, 1.0};
    } else {
        for (std::size_t i = 0; i < 3; ++i) raw[i] = 1.0 - (m[i] - lo) / (hi - lo);
    }

    const auto w = stage_weights(plan, weighting);

    // Scale raw shares to meet the target, clamping at s_max and rescaling the
    // rest until no stage exceeds the cap.
    std::array<double, 3> s{0.0, 0.0, 0.0};
    std::array<bool, 3> capped{false, false, false};
    double budget = target_aggregate;
    for (int pass = 0; pass < 3; ++pass) {
        double denom = 0.0;
        for (std::size_t i = 0; i < 3; ++i)
            if (!capped[i]) denom += w[i] * raw[i];
        if (denom <= 0.0) {
            if (budget > 1e-12)
                throw InfeasibleError(
                    "aggregate target unreachable: free stages have no share left "
                    "and capped stages cannot absorb the remaining budget");
            break;
        }
        double c = budget / denom;
        bool clamped_any = false;
        for (std::size_t i = 0; i < 3; ++i) {
            if (capped[i]) continue;
            double v = c * raw[i];
            if (v > s_max) {
                s[i] = s_max;
                capped[i] = true;
                budget -= w[i] * s_max;
                clamped_any = true;
            } else {
                s[i] = v;
            }
        }
        if (!clamped_any) break;
    }
    plan.sparsity = s;

    double achieved = aggregate_sparsity(plan);
    if (std::abs(achieved - target_aggregate) > 1e-9)
        throw InfeasibleError("aggregate target unreachable under s_max cap: best "
                              "achievable is " + format_double(achieved));
    return plan;
}

double aggregate_sparsity(const StagePlan& plan) {
    auto w = stage_weights(plan, plan.weighting);
    double agg = 0.0;
    for (std::size_t i = 0; i < 3; ++i) agg += w[i] * plan.sparsity[i];
    return agg;
}

const AllocationTable& AllocationTable::builtin() {
    static const AllocationTable table = [] {
        AllocationTable t;
        const std::string note =
            "aggregate is the nominal whole-model ratio from the source "
            "configuration, not the mean of the stage values";
        auto add = [&](const std::string& family, double agg,
                       std::array<double, 3> s, int d1, int d2) {
            t.rows_.push_back({family, agg, s, d1, d2, note});
        };
        add("dit", 0.25, {0.50, 0.02, 0.06}, 900, 450);
        add("dit", 0.30, {0.60, 0.04, 0.10}, 900, 450);
        add("dit", 0.35, {0.70, 0.06, 0.20}, 900, 450);
        add("dit", 0.40, {0.80, 0.08, 0.30}, 900, 450);
        add("dit", 0.45, {0.90, 0.10, 0.40}, 900, 450);
        add("dit", 0.50, {0.90, 0.15, 0.40}, 900, 450);
        add("sdxl", 0.10, {0.30, 0.03, 0.15}, 900, 250);
        add("sdxl", 0.15, {0.40, 0.04, 0.20}, 900, 250);
        add("sdxl", 0.20, {0.60, 0.06, 0.30}, 900, 250);
        add("sdxl", 0.30, {0.80, 0.08, 0.40}, 900, 250);
        return t;
    }();
    return table;
}

const AllocationRow& AllocationTable::lookup(const std::string& family,
                                             double aggregate) const {
    std::ostringstream avail;
    for (const auto& row : rows_) {
        if (row.family == family && std::abs(row.aggregate - aggregate) < 1e-9)
            return row;
        if (row.family == family) avail << ' ' << format_double(row.aggregate);
    }
    if (avail.str().empty())
        throw ParamError("unknown model family: '" + family + "' (expected dit or sdxl)");
    throw ParamError("no preset for family '" + family + "' at aggregate " +
                     format_double(aggregate) + "; available:" + avail.str());
}

std::string plan_to_text(const StagePlan& plan) {
    std::ostringstream out;
    out << "horizon " << plan.horizon << '\n'
        << "dividers " << plan.divider1 << ' ' << plan.divider2 << '\n'
        << "sparsities " << format_double(plan.sparsity[0]) << ' '
        << format_double(plan.sparsity[1]) << ' ' << format_double(plan.sparsity[2])
        << '\n'
        << "mean_scores " << format_double(plan.mean_score[0]) << ' '
        << format_double(plan.mean_score[1]) << ' '
        << format_double(plan.mean_score[2]) << '\n'
        << "M " << format_double(plan.threshold_fraction) << '\n'
        << "lambda " << format_double(plan.lambda) << '\n'
        << "aggregate " << format_double(plan.target_aggregate) << '\n'
        << "weighting " << weighting_name(plan.weighting) << '\n';
    return out.str();
}

StagePlan parse_plan(const std::string& text) {
    StagePlan plan;
    bool saw_horizon = false, saw_dividers = false, saw_sparsities = false,
         saw_means = false, saw_m = false, saw_lambda = false, saw_aggregate = false,
         saw_weighting = false;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        std::vector<std::string> vals;
        std::string v;
        while (ls >> v) vals.push_back(v);
        auto need = [&](std::size_t n) {
            if (vals.size() != n)
                throw ParamError("plan key '" + key + "' expects " +
                                 std::to_string(n) + " value(s)");
        };
        if (key == "horizon") {
            need(1);
            plan.horizon = static_cast<int>(parse_long(vals[0], key));
            saw_horizon = true;
        } else if (key == "dividers") {
            need(2);
            plan.divider1 = static_cast<int>(parse_long(vals[0], key));
            plan.divider2 = static_cast<int>(parse_long(vals[1], key));
            saw_dividers = true;
        } else if (key == "sparsities") {
            need(3);
            for (std::size_t i = 0; i < 3; ++i)
                plan.sparsity[i] = parse_double(vals[i], key);
            saw_sparsities = true;
        } else if (key == "mean_scores") {
            need(3);
            for (std::size_t i = 0; i < 3; ++i)
                plan.mean_score[i] = parse_double(vals[i], key);
            saw_means = true;
        } else if (key == "M") {
            need(1);
            plan.threshold_fraction = parse_double(vals[0], key);
            saw_m = true;
        } else if (key == "lambda") {
            need(1);
            plan.lambda = parse_double(vals[0], key);
            saw_lambda = true;
        } else if (key == "aggregate") {
            need(1);
            plan.target_aggregate = parse_double(vals[0], key);
            saw_aggregate = true;
        } else if (key == "weighting") {
            need(1);
            plan.weighting = parse_weighting(vals[0]);
            saw_weighting = true;
        } else {
            throw ParamError("unknown plan key: '" + key + "'");
        }
    }
    if (!(saw_horizon && saw_dividers && saw_sparsities && saw_means && saw_m &&
          saw_lambda && saw_aggregate && saw_weighting))
        throw ParamError("plan text is missing required keys");
    check_dividers(plan);
    for (double s : plan.sparsity)
        if (!(s >= 0.0) || !(s < 1.0))
            throw ParamError("plan sparsities must lie in [0, 1)");
    return plan;
}

}  // namespace trajprune
