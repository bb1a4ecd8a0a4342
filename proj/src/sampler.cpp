#include "trajprune/sampler.hpp"

#include <cmath>
#include <thread>

#include "trajprune/errors.hpp"
#include "trajprune/rng.hpp"

namespace trajprune {

using Eigen::VectorXd;

VectorXd forward_noise(const VectorXd& x0, int t, const VectorXd& eps,
                       const NoiseSchedule& s) {
    if (x0.size() != eps.size())
        throw ParamError("x0 and eps shapes differ");
    double ab = s.alpha_bar(t);
    return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

VectorXd guided_eps(const DenoiserModel& m, const VectorXd& x, int t, int label,
                    double cfg_scale) {
    if (cfg_scale == 1.0) return m.forward(x, t, label);
    VectorXd cond = m.forward(x, t, label);
    VectorXd uncond = m.forward(x, t, m.cfg.null_class());
    return uncond + cfg_scale * (cond - uncond);
}

VectorXd ddpm_step(const DenoiserModel& m, const NoiseSchedule& s,
                   const VectorXd& x_t, int t, int label, double cfg_scale,
                   const VectorXd& z) {
    double ab = s.alpha_bar(t);  // also range-checks t
    double beta = s.beta(t);
    VectorXd eps = guided_eps(m, x_t, t, label, cfg_scale);
    VectorXd mu = (x_t - (beta / std::sqrt(1.0 - ab)) * eps) / std::sqrt(1.0 - beta);
    if (t == 1) return mu;
    if (z.size() != x_t.size()) throw ParamError("z and x_t shapes differ");
    return mu + std::sqrt(beta) * z;
}

VectorXd ddim_step(const DenoiserModel& m, const NoiseSchedule& s,
                   const VectorXd& x_t, int t, int t_prev, int label,
                   double cfg_scale) {
    double ab = s.alpha_bar(t);
    if (t_prev > t || t_prev < 0)
        throw ParamError("ddim step needs 0 <= t_prev <= t");
    if (t_prev == t) return x_t;
    double ab_prev = t_prev >= 1 ? s.alpha_bar(t_prev) : 1.0;
    VectorXd eps = guided_eps(m, x_t, t, label, cfg_scale);
    VectorXd x0_hat = (x_t - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    return std::sqrt(ab_prev) * x0_hat + std::sqrt(1.0 - ab_prev) * eps;
}

std::vector<int> ddim_timesteps(int horizon, int steps) {
    if (steps < 1 || steps > horizon)
        throw ParamError("steps must lie in [1, horizon]");
    std::vector<int> ts(static_cast<std::size_t>(steps));
    for (int k = 0; k < steps; ++k)
        ts[static_cast<std::size_t>(k)] = static_cast<int>(
            static_cast<long long>(steps - k) * horizon / steps);
    return ts;
}

SamplerConfig::Kind parse_sampler(const std::string& name) {
    if (name == "ddpm") return SamplerConfig::Kind::ddpm;
    if (name == "ddim") return SamplerConfig::Kind::ddim;
    throw ParamError("unknown sampler: '" + name + "' (expected ddpm or ddim)");
}

std::string sampler_name(SamplerConfig::Kind k) {
    return k == SamplerConfig::Kind::ddpm ? "ddpm" : "ddim";
}

VectorXd sample_loop(const ModelForStep& model_for, const NoiseSchedule& s,
                     const SamplerConfig& sc, int label, std::mt19937_64& rng,
                     std::vector<int>* visited,
                     std::vector<Eigen::VectorXd>* states) {
    const int d = model_for(s.horizon).cfg.data_dim();
    std::normal_distribution<double> normal(0.0, 1.0);
    VectorXd x(d);
    for (int i = 0; i < d; ++i) x(i) = normal(rng);

    if (visited) visited->clear();
    if (states) states->clear();
    auto record = [&](int t) {
        if (visited) visited->push_back(t);
        if (states) states->push_back(x);
    };

    if (sc.kind == SamplerConfig::Kind::ddpm) {
        VectorXd z(d);
        for (int t = s.horizon; t >= 1; --t) {
            record(t);
            if (t > 1)
                for (int i = 0; i < d; ++i) z(i) = normal(rng);
            x = ddpm_step(model_for(t), s, x, t, label, sc.cfg_scale, z);
        }
    } else {
        auto ts = ddim_timesteps(s.horizon, sc.steps);
        for (std::size_t i = 0; i < ts.size(); ++i) {
            int t = ts[i];
            int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
            record(t);
            x = ddim_step(model_for(t), s, x, t, t_prev, label, sc.cfg_scale);
        }
    }
    if (states) states->push_back(x);  // final sample, one past the visited steps
    return x;
}

VectorXd sample(const DenoiserModel& m, const NoiseSchedule& s,
                const SamplerConfig& sc, int label, std::mt19937_64& rng) {
    return sample_loop([&m](int) -> const DenoiserModel& { return m; }, s, sc,
                       label, rng);
}

MseCurve empirical_mse_curve(const DenoiserModel& m, const NoiseSchedule& s,
                             const SamplerConfig& sc, int n_traj,
                             std::uint64_t seed, int workers) {
    if (n_traj < 2) throw ParamError("mse curve needs at least 2 trajectories");
    if (workers < 1) throw ParamError("workers must be >= 1");

    const int n_steps =
        (sc.kind == SamplerConfig::Kind::ddpm ? s.horizon : sc.steps) + 1;
    Eigen::MatrixXd vals(n_steps, n_traj);
    std::vector<int> ts;

    // Each trajectory is seeded independently, so results do not depend on
    // how trajectories are spread across workers.
    auto run_range = [&](int lo, int hi, bool keep_ts) {
        for (int i = lo; i < hi; ++i) {
            auto rng = make_rng(derive_seed(seed, "mse-curve", static_cast<std::uint64_t>(i)));
            std::vector<int> visited;
            std::vector<VectorXd> states;
            int label = i % m.cfg.n_classes;
            sample_loop([&m](int) -> const DenoiserModel& { return m; }, s, sc,
                        label, rng, &visited, &states);
            const VectorXd& final_x = states.back();
            for (std::size_t j = 0; j < states.size(); ++j)
                vals(static_cast<Eigen::Index>(j), i) =
                    (states[j] - final_x).squaredNorm() / final_x.size();
            if (keep_ts && i == 0) {
                ts = visited;
                ts.push_back(0);
            }
        }
    };

    if (workers == 1) {
        run_range(0, n_traj, true);
    } else {
        std::vector<std::thread> pool;
        int chunk = (n_traj + workers - 1) / workers;
        for (int w = 0; w < workers; ++w) {
            int lo = w * chunk, hi = std::min(n_traj, lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back(run_range, lo, hi, w == 0);
        }
        for (auto& th : pool) th.join();
    }

    MseCurve curve;
    curve.t = ts;
    curve.n_traj = n_traj;
    curve.mse.resize(static_cast<std::size_t>(n_steps));
    curve.stderr_.resize(static_cast<std::size_t>(n_steps));
    for (int j = 0; j < n_steps; ++j) {
        double mean = vals.row(j).mean();
        double var = (vals.row(j).array() - mean).square().sum() / (n_traj - 1);
        curve.mse[static_cast<std::size_t>(j)] = mean;
        curve.stderr_[static_cast<std::size_t>(j)] = std::sqrt(var / n_traj);
    }
    return curve;
}

}  // namespace trajprune
