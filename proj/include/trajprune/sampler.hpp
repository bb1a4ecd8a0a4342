#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "trajprune/denoiser.hpp"
#include "trajprune/schedule.hpp"

namespace trajprune {

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
Eigen::VectorXd forward_noise(const Eigen::VectorXd& x0, int t,
                              const Eigen::VectorXd& eps, const NoiseSchedule& s);

// Classifier-free guided prediction eps_u + w (eps_c - eps_u). At w == 1 the
// combination collapses and only the conditional pass runs.
Eigen::VectorXd guided_eps(const DenoiserModel& m, const Eigen::VectorXd& x, int t,
                           int label, double cfg_scale);

// One ancestral update x_t -> x_{t-1} with variance beta_t; z is the injected
// standard normal, ignored at t == 1.
Eigen::VectorXd ddpm_step(const DenoiserModel& m, const NoiseSchedule& s,
                          const Eigen::VectorXd& x_t, int t, int label,
                          double cfg_scale, const Eigen::VectorXd& z);

// Deterministic update x_t -> x_{t_prev} through the predicted clean image;
// t_prev == 0 denotes the end of the trajectory (abar_0 := 1).
Eigen::VectorXd ddim_step(const DenoiserModel& m, const NoiseSchedule& s,
                          const Eigen::VectorXd& x_t, int t, int t_prev, int label,
                          double cfg_scale);

// Descending strided sub-schedule starting at the horizon, e.g. 20 of 1000
// gives 1000, 950, ..., 50.
std::vector<int> ddim_timesteps(int horizon, int steps);

struct SamplerConfig {
    enum class Kind { ddpm, ddim };
    Kind kind = Kind::ddim;
    int steps = 20;  // ddpm always walks the full horizon
    double cfg_scale = 1.0;
};

SamplerConfig::Kind parse_sampler(const std::string& name);
std::string sampler_name(SamplerConfig::Kind k);

// Denoiser lookup per timestep; lets mosaic inference swap sub-networks in
// without duplicating the sampling loop.
using ModelForStep = std::function<const DenoiserModel&(int t)>;

// Full reverse trajectory from x_T ~ N(0, I). Every random draw comes from
// rng in a fixed order. visited, when given, receives the evaluated
// timesteps; states receives x after each update (same indexing).
Eigen::VectorXd sample_loop(const ModelForStep& model_for, const NoiseSchedule& s,
                            const SamplerConfig& sc, int label,
                            std::mt19937_64& rng,
                            std::vector<int>* visited = nullptr,
                            std::vector<Eigen::VectorXd>* states = nullptr);

Eigen::VectorXd sample(const DenoiserModel& m, const NoiseSchedule& s,
                       const SamplerConfig& sc, int label, std::mt19937_64& rng);

// Mean (1/d)||x_t - x_final||^2 over n_traj reverse trajectories, indexed by
// the visited timesteps of the sampler. stderr is the standard error of each
// mean. Labels cycle through the model's classes.
struct MseCurve {
    std::vector<int> t;
    std::vector<double> mse;
    std::vector<double> stderr_;
    int n_traj = 0;
};

MseCurve empirical_mse_curve(const DenoiserModel& m, const NoiseSchedule& s,
                             const SamplerConfig& sc, int n_traj,
                             std::uint64_t seed, int workers = 1);

}  // namespace trajprune
