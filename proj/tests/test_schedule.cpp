#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "defectgen/rng.hpp"
#include "defectgen/schedule.hpp"

using namespace defectgen;

TEST_CASE("linear schedule: first alpha and strict monotonicity") {
    auto s = make_schedule(1000, ScheduleKind::linear);
    CHECK(s.alpha_cum[0] == doctest::Approx(1.0 - 1e-4).epsilon(1e-12));
    for (int64_t t = 2; t <= 1000; ++t) CHECK(s.alpha_cum[t - 1] < s.alpha_cum[t - 2]);
    CHECK(s.alpha_cum.back() > 0.0);
    CHECK(s.alpha_cum.back() < 1.0);
}

TEST_CASE("T=1 gives a single-entry schedule") {
    auto s = make_schedule(1, ScheduleKind::linear);
    REQUIRE(s.alpha_cum.size() == 1);
    CHECK(s.alpha_cum[0] == doctest::Approx(1.0 - 1e-4));
    CHECK(s.alpha(0) == 1.0);
}

TEST_CASE("cosine and linear at T=50 both satisfy the monotone invariant") {
    // independent evaluation of both closed forms
    const int64_t T = 50;
    ScheduleParams p;
    std::vector<double> lin_ref(T), cos_ref(T);
    {
        double acc = 1.0;
        for (int64_t t = 1; t <= T; ++t) {
            const double beta =
                p.beta_start + (p.beta_end - p.beta_start) * double(t - 1) / double(T - 1);
            acc *= 1.0 - beta;
            lin_ref[t - 1] = acc;
        }
        auto f = [&](double u) {
            const double a = std::cos((u + p.cosine_s) / (1.0 + p.cosine_s) * M_PI / 2.0);
            return a * a;
        };
        for (int64_t t = 1; t <= T; ++t) cos_ref[t - 1] = f(double(t) / T) / f(0.0);
    }
    auto lin = make_schedule(T, ScheduleKind::linear, p);
    auto cosn = make_schedule(T, ScheduleKind::cosine, p);
    for (int64_t t = 1; t <= T; ++t) {
        CHECK(lin.alpha_cum[t - 1] == doctest::Approx(lin_ref[t - 1]).epsilon(1e-12));
        CHECK(cosn.alpha_cum[t - 1] == doctest::Approx(cos_ref[t - 1]).epsilon(1e-6));
        if (t > 1) {
            CHECK(lin.alpha_cum[t - 1] < lin.alpha_cum[t - 2]);
            CHECK(cosn.alpha_cum[t - 1] < cosn.alpha_cum[t - 2]);
        }
        CHECK(lin.alpha_cum[t - 1] > 0.0);
        CHECK(cosn.alpha_cum[t - 1] > 0.0);
        CHECK(lin.alpha_cum[t - 1] < 1.0);
        CHECK(cosn.alpha_cum[t - 1] < 1.0);
    }
}

TEST_CASE("diffuse follows the closed form") {
    NoiseSchedule s;
    s.T = 1;
    s.alpha_cum = {0.25};

    DTensor x0 = DTensor::full({2, 2}, 1.0);
    DTensor eps = DTensor::full({2, 2}, 1.0);
    auto xt = diffuse(x0, 1, eps, s);
    for (int64_t i = 0; i < xt.size(); ++i)
        CHECK(xt[i] == doctest::Approx(0.5 + std::sqrt(0.75)).epsilon(1e-12));

    // alpha -> 1 limit
    NoiseSchedule near1;
    near1.T = 1;
    near1.alpha_cum = {1.0 - 1e-12};
    auto rng = make_rng(5);
    DTensor r({3, 3});
    fill_gaussian(r, rng);
    DTensor z({3, 3});
    fill_gaussian(z, rng);
    auto lim = diffuse(r, 1, z, near1);
    CHECK(max_abs_diff(lim, r) < 1e-5);

    // eps = 0
    DTensor zero({3, 3});
    auto noiseless = diffuse(r, 1, zero, s);
    for (int64_t i = 0; i < r.size(); ++i)
        CHECK(noiseless[i] == doctest::Approx(std::sqrt(0.25) * r[i]).epsilon(1e-12));

    CHECK_THROWS(diffuse(r, 2, z, s));
    CHECK_THROWS(diffuse(r, 1, DTensor({2, 2}), s));
}

TEST_CASE("sample_timestep is uniform over {1..T}") {
    auto s1 = make_schedule(1, ScheduleKind::linear);
    auto rng = make_rng(7);
    for (int i = 0; i < 20; ++i) CHECK(sample_timestep(rng, s1) == 1);

    auto s10 = make_schedule(10, ScheduleKind::linear);
    const int n = 100000;
    std::vector<int> counts(10, 0);
    auto rng2 = make_rng(8);
    for (int i = 0; i < n; ++i) counts[sample_timestep(rng2, s10) - 1]++;
    double chi2 = 0;
    const double expect = n / 10.0;
    for (int b = 0; b < 10; ++b) {
        CHECK(std::abs(counts[b] / double(n) - 0.1) < 0.01);
        chi2 += (counts[b] - expect) * (counts[b] - expect) / expect;
    }
    CHECK(chi2 < 27.88);  // chi-square df=9, p ~ 0.001

    auto ra = make_rng(9), rb = make_rng(9);
    for (int i = 0; i < 50; ++i) CHECK(sample_timestep(ra, s10) == sample_timestep(rb, s10));
}

TEST_CASE("ddim single-step inversion with the true noise recovers x0") {
    auto s = make_schedule(1000, ScheduleKind::linear);
    auto rng = make_rng(11);
    DTensor x0({4, 4});
    fill_gaussian(x0, rng);
    DTensor eps({4, 4});
    fill_gaussian(eps, rng);
    auto xt = diffuse(x0, 700, eps, s);
    auto back = ddim_step(xt, eps, 700, 0, s);
    CHECK(max_abs_diff(back, x0) <= 1e-6);

    auto again = ddim_step(xt, eps, 700, 0, s);
    for (int64_t i = 0; i < back.size(); ++i) CHECK(back[i] == again[i]);

    CHECK_THROWS(ddim_step(xt, eps, 700, 700, s));
    CHECK_THROWS(ddim_step(xt, eps, 700, 0, s, 0.5));
}

TEST_CASE("50-step trajectory with oracle noise telescopes back to x0") {
    auto s = make_schedule(1000, ScheduleKind::linear);
    auto rng = make_rng(13);
    DTensor x0({3, 8, 8});
    fill_gaussian(x0, rng, 0.5);
    DTensor eps({3, 8, 8});
    fill_gaussian(eps, rng);

    auto ts = inference_timesteps(1000, 50);
    REQUIRE(ts.size() == 50);
    CHECK(ts.front() == 1000);
    CHECK(ts.back() == 20);

    DTensor x = diffuse(x0, ts.front(), eps, s);
    for (size_t i = 0; i < ts.size(); ++i) {
        const int64_t t = ts[i];
        const int64_t t_prev = (i + 1 < ts.size()) ? ts[i + 1] : 0;
        x = ddim_step(x, eps, t, t_prev, s);
    }
    CHECK(max_abs_diff(x, x0) <= 1e-5);
}

TEST_CASE("variance identity over many noise draws") {
    auto s = make_schedule(100, ScheduleKind::linear);
    const int64_t t = 60;
    const double a = s.alpha(t);
    const int trials = 4000;
    DTensor x0({4});
    x0[0] = -0.5;
    x0[1] = 0.25;
    x0[2] = 1.0;
    x0[3] = 0.0;
    std::vector<double> sum(4, 0.0), sum2(4, 0.0);
    auto rng = make_rng(17);
    for (int i = 0; i < trials; ++i) {
        DTensor eps({4});
        fill_gaussian(eps, rng);
        auto xt = diffuse(x0, t, eps, s);
        for (int64_t j = 0; j < 4; ++j) {
            sum[j] += xt[j];
            sum2[j] += xt[j] * xt[j];
        }
    }
    const double var_expected = 1.0 - a;
    // 3 sigma bounds for the sample mean and sample variance
    const double mean_tol = 3.0 * std::sqrt(var_expected / trials);
    const double var_tol = 3.0 * var_expected * std::sqrt(2.0 / (trials - 1));
    for (int64_t j = 0; j < 4; ++j) {
        const double m = sum[j] / trials;
        const double v = sum2[j] / trials - m * m;
        CHECK(std::abs(m - std::sqrt(a) * x0[j]) < mean_tol);
        CHECK(std::abs(v - var_expected) < var_tol);
    }
}

TEST_CASE("inference timesteps are strictly decreasing and within range") {
    for (int64_t steps : {int64_t(1), int64_t(7), int64_t(50), int64_t(999), int64_t(1000)}) {
        auto ts = inference_timesteps(1000, steps);
        CHECK(int64_t(ts.size()) == steps);
        for (size_t i = 0; i < ts.size(); ++i) {
            CHECK(ts[i] >= 1);
            CHECK(ts[i] <= 1000);
            if (i) CHECK(ts[i] < ts[i - 1]);
        }
    }
    CHECK_THROWS(inference_timesteps(10, 11));
}
