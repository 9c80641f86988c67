#include "defectgen/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace defectgen {

NoiseSchedule make_schedule(int64_t T, ScheduleKind kind, ScheduleParams params) {
    if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
    NoiseSchedule s;
    s.T = T;
    s.kind = kind;
    s.params = params;
    s.alpha_cum.resize(static_cast<size_t>(T));
    if (kind == ScheduleKind::linear) {
        double acc = 1.0;
        for (int64_t t = 1; t <= T; ++t) {
            const double beta =
                T == 1 ? params.beta_start
                       : params.beta_start +
                             (params.beta_end - params.beta_start) * double(t - 1) / double(T - 1);
            acc *= 1.0 - beta;
            s.alpha_cum[t - 1] = acc;
        }
    } else {
        const double off = params.cosine_s;
        auto f = [&](double u) {
            const double a = std::cos((u + off) / (1.0 + off) * M_PI / 2.0);
            return a * a;
        };
        const double f0 = f(0.0);
        double prev = 1.0;
        for (int64_t t = 1; t <= T; ++t) {
            double a = f(double(t) / double(T)) / f0;
            // clamp per-step beta to keep alpha strictly decreasing and positive
            const double min_ratio = 1e-3;
            if (a > prev * (1.0 - 1e-9)) a = prev * (1.0 - 1e-9);
            if (a < prev * min_ratio) a = prev * min_ratio;
            s.alpha_cum[t - 1] = a;
            prev = a;
        }
    }
    for (int64_t t = 1; t <= T; ++t) {
        const double a = s.alpha_cum[t - 1];
        if (!(a > 0.0 && a < 1.0))
            throw std::runtime_error("make_schedule: alpha out of (0,1)");
        if (t > 1 && !(a < s.alpha_cum[t - 2]))
            throw std::runtime_error("make_schedule: alpha not strictly decreasing");
    }
    return s;
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    throw std::invalid_argument("unknown schedule kind: " + s);
}

std::string to_string(ScheduleKind k) {
    return k == ScheduleKind::linear ? "linear" : "cosine";
}

template <class T>
BasicTensor<T> diffuse(const BasicTensor<T>& x0, int64_t t, const BasicTensor<T>& eps,
                       const NoiseSchedule& sched) {
    if (!x0.same_shape(eps)) throw std::invalid_argument("diffuse: shape mismatch");
    if (!sched.valid_t(t)) throw std::invalid_argument("diffuse: t out of range");
    const double a = sched.alpha(t);
    const T sa = static_cast<T>(std::sqrt(a));
    const T sb = static_cast<T>(std::sqrt(1.0 - a));
    BasicTensor<T> out(x0.shape);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = sa * x0[i] + sb * eps[i];
    return out;
}

int64_t sample_timestep(std::mt19937_64& rng, const NoiseSchedule& sched) {
    std::uniform_int_distribution<int64_t> d(1, sched.T);
    return d(rng);
}

template <class T>
BasicTensor<T> ddim_step(const BasicTensor<T>& x_t, const BasicTensor<T>& eps_pred, int64_t t,
                         int64_t t_prev, const NoiseSchedule& sched, double eta) {
    if (!x_t.same_shape(eps_pred)) throw std::invalid_argument("ddim_step: shape mismatch");
    if (!sched.valid_t(t)) throw std::invalid_argument("ddim_step: t out of range");
    if (t_prev >= t || t_prev < 0) throw std::invalid_argument("ddim_step: need t > t_prev >= 0");
    if (eta != 0.0) throw std::invalid_argument("ddim_step: only deterministic eta=0 supported");
    const double at = sched.alpha(t);
    const double ap = sched.alpha(t_prev);
    const T inv_sa = static_cast<T>(1.0 / std::sqrt(at));
    const T sb = static_cast<T>(std::sqrt(1.0 - at));
    const T sap = static_cast<T>(std::sqrt(ap));
    const T sbp = static_cast<T>(std::sqrt(1.0 - ap));
    BasicTensor<T> out(x_t.shape);
    for (int64_t i = 0; i < out.size(); ++i) {
        const T xhat0 = (x_t[i] - sb * eps_pred[i]) * inv_sa;
        out[i] = sap * xhat0 + sbp * eps_pred[i];
    }
    return out;
}

std::vector<int64_t> inference_timesteps(int64_t T, int64_t steps) {
    if (steps < 1 || steps > T) throw std::invalid_argument("inference_timesteps: bad step count");
    std::vector<int64_t> ts;
    ts.reserve(static_cast<size_t>(steps));
    for (int64_t k = steps; k >= 1; --k) ts.push_back(k * T / steps);
    return ts;
}

template BasicTensor<float> diffuse(const BasicTensor<float>&, int64_t, const BasicTensor<float>&,
                                    const NoiseSchedule&);
template BasicTensor<double> diffuse(const BasicTensor<double>&, int64_t,
                                     const BasicTensor<double>&, const NoiseSchedule&);
template BasicTensor<float> ddim_step(const BasicTensor<float>&, const BasicTensor<float>&,
                                      int64_t, int64_t, const NoiseSchedule&, double);
template BasicTensor<double> ddim_step(const BasicTensor<double>&, const BasicTensor<double>&,
                                       int64_t, int64_t, const NoiseSchedule&, double);

}  // namespace defectgen
