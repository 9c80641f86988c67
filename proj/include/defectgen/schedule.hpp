#ifndef DEFECTGEN_SCHEDULE_HPP
#define DEFECTGEN_SCHEDULE_HPP

#include <random>
#include <string>
#include <vector>

#include "defectgen/tensor.hpp"

namespace defectgen {

enum class ScheduleKind { linear, cosine };

struct ScheduleParams {
    double beta_start = 1e-4;   // linear
    double beta_end = 2e-2;
    double cosine_s = 0.008;    // cosine offset
};

// Cumulative signal fractions alpha_t for t in {1..T}, strictly decreasing,
// all in (0,1). alpha(0) is defined as 1 for the reverse update.
struct NoiseSchedule {
    int64_t T = 0;
    ScheduleKind kind = ScheduleKind::linear;
    ScheduleParams params;
    std::vector<double> alpha_cum;  // alpha_cum[t-1] = alpha_t

    double alpha(int64_t t) const { return t == 0 ? 1.0 : alpha_cum[t - 1]; }
    bool valid_t(int64_t t) const { return t >= 1 && t <= T; }
};

NoiseSchedule make_schedule(int64_t T, ScheduleKind kind, ScheduleParams params = {});
ScheduleKind schedule_kind_from_string(const std::string& s);
std::string to_string(ScheduleKind k);

// x_t = sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps
template <class T>
BasicTensor<T> diffuse(const BasicTensor<T>& x0, int64_t t, const BasicTensor<T>& eps,
                       const NoiseSchedule& sched);

int64_t sample_timestep(std::mt19937_64& rng, const NoiseSchedule& sched);

// Deterministic reverse update (eta = 0):
//   xhat0    = (x_t - sqrt(1-alpha_t) eps_pred) / sqrt(alpha_t)
//   x_{t'}   = sqrt(alpha_t') xhat0 + sqrt(1-alpha_t') eps_pred
template <class T>
BasicTensor<T> ddim_step(const BasicTensor<T>& x_t, const BasicTensor<T>& eps_pred, int64_t t,
                         int64_t t_prev, const NoiseSchedule& sched, double eta = 0.0);

// Evenly spaced decreasing subsequence of {1..T} used at inference;
// follows each entry with the next smaller one, ending at 0.
std::vector<int64_t> inference_timesteps(int64_t T, int64_t steps);

}  // namespace defectgen

#endif
