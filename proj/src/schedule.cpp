#include "trajprune/schedule.hpp"

#include <cmath>
#include <ostream>

#include "trajprune/errors.hpp"
#include "trajprune/textio.hpp"

namespace trajprune {

ScheduleFamily parse_family(const std::string& name) {
    if (name == "linear") return ScheduleFamily::linear;
    if (name == "scaled_linear") return ScheduleFamily::scaled_linear;
    throw ParamError("unknown schedule family: '" + name +
                     "' (expected linear or scaled_linear)");
}

std::string family_name(ScheduleFamily f) {
    return f == ScheduleFamily::linear ? "linear" : "scaled_linear";
}

namespace {

void check_t(const NoiseSchedule& s, int t) {
    if (t < 1 || t > s.horizon)
        throw ParamError("timestep " + std::to_string(t) + " outside [1, " +
                         std::to_string(s.horizon) + "]");
}

}  // namespace

double NoiseSchedule::beta(int t) const {
    check_t(*this, t);
    return betas[static_cast<std::size_t>(t) - 1];
}

double NoiseSchedule::alpha(int t) const { return 1.0 - beta(t); }

double NoiseSchedule::alpha_bar(int t) const {
    check_t(*this, t);
    return alpha_bars[static_cast<std::size_t>(t) - 1];
}

NoiseSchedule build_schedule(ScheduleFamily family, int horizon,
                             double beta_start, double beta_end) {
    if (horizon < 1)
        throw ParamError("horizon must be >= 1, got " + std::to_string(horizon));
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start <= beta_end))
        throw ParamError("betas must satisfy 0 < beta_start <= beta_end < 1, got [" +
                         format_double(beta_start) + ", " + format_double(beta_end) + "]");

    NoiseSchedule s;
    s.family = family;
    s.horizon = horizon;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas.resize(static_cast<std::size_t>(horizon));

    // Endpoints are hit exactly; a single-step schedule collapses to beta_start.
    const double lo = family == ScheduleFamily::linear ? beta_start : std::sqrt(beta_start);
    const double hi = family == ScheduleFamily::linear ? beta_end : std::sqrt(beta_end);
    for (int i = 0; i < horizon; ++i) {
        double v = horizon == 1
                       ? lo
                       : lo + (hi - lo) * (static_cast<double>(i) / (horizon - 1));
        s.betas[static_cast<std::size_t>(i)] =
            family == ScheduleFamily::linear ? v : v * v;
    }

    s.alpha_bars.resize(static_cast<std::size_t>(horizon));
    double prod = 1.0;
    for (int i = 0; i < horizon; ++i) {
        prod *= 1.0 - s.betas[static_cast<std::size_t>(i)];
        s.alpha_bars[static_cast<std::size_t>(i)] = prod;
    }
    return s;
}

NoiseSchedule default_schedule(ScheduleFamily family, int horizon) {
    return family == ScheduleFamily::linear
               ? build_schedule(family, horizon, 1e-4, 0.02)
               : build_schedule(family, horizon, 0.00085, 0.012);
}

double snr(const NoiseSchedule& s, int t) {
    double ab = s.alpha_bar(t);
    return ab / (1.0 - ab);
}

double log_snr(const NoiseSchedule& s, int t) {
    // Evaluated in log space so extreme SNRs cannot overflow.
    double ab = s.alpha_bar(t);
    return std::log(ab) - std::log1p(-ab);
}

double expected_mse(const NoiseSchedule& s, int t, const PowerAssumption& p) {
    if (!(p.signal_power >= 0.0) || !(p.noise_power >= 0.0))
        throw ParamError("power assumptions must be non-negative");
    double ab = s.alpha_bar(t);
    double root = std::sqrt(ab);
    return (1.0 - root) * (1.0 - root) * p.signal_power + (1.0 - ab) * p.noise_power;
}

double expected_grad(const NoiseSchedule& s, int t, const PowerAssumption& p) {
    if (t < 2)
        throw ParamError("grad needs t >= 2, got " + std::to_string(t));
    // Algebraically identical to mse(t) - mse(t-1); kept in the differenced
    // form so the sign structure (signal term vs noise term) stays explicit.
    double ab = s.alpha_bar(t);
    double ab_prev = s.alpha_bar(t - 1);
    double delta = ab - ab_prev;
    double signal_coef = delta + 2.0 * (std::sqrt(ab_prev) - std::sqrt(ab));
    return signal_coef * p.signal_power - delta * p.noise_power;
}

double ScoreCurve::score_at(int t) const {
    if (t < t_begin || t > t_end())
        throw ParamError("score undefined at t = " + std::to_string(t));
    return score[static_cast<std::size_t>(t - t_begin)];
}

double ScoreCurve::grad_at(int t) const {
    if (t < t_begin || t > t_end())
        throw ParamError("grad undefined at t = " + std::to_string(t));
    return grad[static_cast<std::size_t>(t - t_begin)];
}

ScoreCurve score_curve(const NoiseSchedule& s, double lambda,
                       const PowerAssumption& p, double signal_dim) {
    if (!(lambda >= 0.0)) throw ParamError("lambda must be >= 0");
    if (!(signal_dim > 0.0)) throw ParamError("signal_dim must be > 0");
    if (s.horizon < 2) throw ParamError("score curve needs horizon >= 2");

    ScoreCurve c;
    c.t_begin = 2;
    c.lambda = lambda;
    c.signal_dim = signal_dim;
    int n = s.horizon - 1;
    c.grad.reserve(static_cast<std::size_t>(n));
    c.log_snr.reserve(static_cast<std::size_t>(n));
    c.score.reserve(static_cast<std::size_t>(n));
    for (int t = 2; t <= s.horizon; ++t) {
        double g = signal_dim * expected_grad(s, t, p);
        double ls = log_snr(s, t);
        c.grad.push_back(g);
        c.log_snr.push_back(ls);
        c.score.push_back(g + lambda * ls);
    }
    return c;
}

void write_curves_csv(std::ostream& out, const NoiseSchedule& s,
                      const ScoreCurve& c, const PowerAssumption& p) {
    out << "t,grad,log_snr,score,mse,snr\n";
    for (int t = 1; t <= s.horizon; ++t) {
        out << t << ',';
        if (t >= c.t_begin && t <= c.t_end()) {
            out << format_double(c.grad_at(t)) << ',' << format_double(log_snr(s, t))
                << ',' << format_double(c.score_at(t));
        } else {
            out << ',' << format_double(log_snr(s, t)) << ',';
        }
        out << ',' << format_double(c.signal_dim * expected_mse(s, t, p)) << ','
            << format_double(snr(s, t)) << '\n';
    }
}

}  // namespace trajprune
