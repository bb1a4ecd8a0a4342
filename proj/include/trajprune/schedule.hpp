#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace trajprune {

enum class ScheduleFamily { linear, scaled_linear };

ScheduleFamily parse_family(const std::string& name);
std::string family_name(ScheduleFamily f);

// Discrete variance schedule over timesteps t = 1..horizon.
// betas[t-1] holds beta_t; alpha_bars[t-1] holds the running product
// prod_{s<=t} (1 - beta_s).
struct NoiseSchedule {
    ScheduleFamily family = ScheduleFamily::linear;
    int horizon = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> betas;
    std::vector<double> alpha_bars;

    double beta(int t) const;
    double alpha(int t) const;      // 1 - beta_t
    double alpha_bar(int t) const;  // cumulative product up to t
};

// family "linear": betas evenly spaced on [beta_start, beta_end] inclusive.
// family "scaled_linear": sqrt(betas) evenly spaced, then squared.
NoiseSchedule build_schedule(ScheduleFamily family, int horizon,
                             double beta_start, double beta_end);

// Convention defaults: linear (1e-4, 0.02), scaled_linear (0.00085, 0.012).
NoiseSchedule default_schedule(ScheduleFamily family, int horizon = 1000);

double snr(const NoiseSchedule& s, int t);
double log_snr(const NoiseSchedule& s, int t);

// Second moments of the clean signal and of the injected noise, per element.
struct PowerAssumption {
    double signal_power = 1.0;
    double noise_power = 1.0;
};

// Closed-form expectation of the per-element denoising MSE at step t for a
// converged predictor, and its one-step difference ("gradient") between
// adjacent steps. grad(t) = mse(t) - mse(t-1) exactly, so t >= 2 for grad.
double expected_mse(const NoiseSchedule& s, int t, const PowerAssumption& p = {});
double expected_grad(const NoiseSchedule& s, int t, const PowerAssumption& p = {});

// Learning-dynamics score over t = 2..horizon:
//   score(t) = signal_dim * grad(t) + lambda * ln SNR(t).
// signal_dim restores the total-norm scale of the underlying latents; the
// grad values stored here carry that factor already.
struct ScoreCurve {
    int t_begin = 2;
    double lambda = 0.0;
    double signal_dim = 1.0;
    std::vector<double> grad;     // index t - t_begin
    std::vector<double> log_snr;  // index t - t_begin
    std::vector<double> score;    // index t - t_begin

    int t_end() const { return t_begin + static_cast<int>(score.size()) - 1; }
    int size() const { return static_cast<int>(score.size()); }
    double score_at(int t) const;
    double grad_at(int t) const;
};

ScoreCurve score_curve(const NoiseSchedule& s, double lambda,
                       const PowerAssumption& p = {}, double signal_dim = 1.0);

// CSV with header t,grad,log_snr,score,mse,snr; one row per t = 1..horizon.
// grad and score are empty at t = 1 where the difference is undefined. The
// mse column carries the same signal_dim factor as grad, so the telescoping
// identity grad(t) = mse(t) - mse(t-1) holds row to row.
void write_curves_csv(std::ostream& out, const NoiseSchedule& s,
                      const ScoreCurve& c, const PowerAssumption& p = {});

}  // namespace trajprune
