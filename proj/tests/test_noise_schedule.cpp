#include <cmath>
#include <vector>

#include "conpure/error.hpp"
#include "conpure/noise_schedule.hpp"
#include "conpure/random.hpp"
#include "doctest.h"

using namespace conpure;

namespace {

NoiseSchedule default_schedule() { return NoiseSchedule::make(1000, 1e-4, 0.02, BetaShape::linear); }

Latent random_latent(Rng& rng, std::vector<int> shape) {
    Latent out(std::move(shape));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = rng.normal();
    return out;
}

// Linear table written out independently of make().
std::vector<long double> oracle_betas(int t_max, long double lo, long double hi) {
    std::vector<long double> out(static_cast<std::size_t>(t_max));
    for (int i = 0; i < t_max; ++i) {
        out[static_cast<std::size_t>(i)] = t_max == 1 ? lo : lo + (hi - lo) * i / (t_max - 1);
    }
    return out;
}

}  // namespace

TEST_CASE("linear table matches a direct product evaluation") {
    const auto sched = default_schedule();
    const auto betas = oracle_betas(1000, 1e-4L, 0.02L);
    long double prod = 1.0L;
    for (int t = 1; t <= 1000; ++t) {
        const long double beta = betas[static_cast<std::size_t>(t - 1)];
        const long double prev = prod;
        prod *= 1.0L - beta;
        CHECK(sched.beta(t) == doctest::Approx(static_cast<double>(beta)).epsilon(1e-14));
        CHECK(std::abs(sched.alpha_bar(t) - static_cast<double>(prod)) < 1e-13);
        const long double var = beta * (1.0L - prev) / (1.0L - prod);
        CHECK(std::abs(sched.sigma(t) - static_cast<double>(std::sqrt(var))) < 1e-13);
        CHECK(sched.a(t) * sched.a(t) + sched.b(t) * sched.b(t) == doctest::Approx(1.0).epsilon(1e-14));
    }
    CHECK(sched.alpha_bar(1000) < 1e-4);
    CHECK(sched.alpha_bar(0) == 1.0);
}

TEST_CASE("sigma_1 is zero for any schedule") {
    CHECK(default_schedule().sigma(1) == 0.0);
    CHECK(NoiseSchedule::make(10, 0.3, 0.6, BetaShape::linear).sigma(1) == 0.0);
    CHECK(NoiseSchedule::make(200, 1e-4, 0.02, BetaShape::cosine).sigma(1) == 0.0);
}

TEST_CASE("zero-noise single step schedule") {
    const auto sched = NoiseSchedule::from_betas({0.0});
    CHECK(sched.alpha_bar(1) == 1.0);
    Rng rng(1);
    const auto z0 = random_latent(rng, {1, 4, 4});
    const auto noise = random_latent(rng, {1, 4, 4});
    CHECK(forward_closed(z0, 1, sched, noise) == z0);
    const auto post = posterior_step(z0, 1, noise, sched);
    CHECK(post.z_prev == z0);
}

TEST_CASE("schedule construction rejects bad parameters") {
    CHECK_THROWS_AS(NoiseSchedule::make(0, 1e-4, 0.02, BetaShape::linear), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::make(10, 0.0, 0.02, BetaShape::linear), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::make(10, 0.03, 0.02, BetaShape::linear), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::make(10, 1e-4, 1.0, BetaShape::linear), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::from_betas({}), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::from_betas({0.2, 0.1}), ConfigError);
    CHECK_THROWS_AS(NoiseSchedule::from_betas({-0.1}), ConfigError);
    CHECK_THROWS_AS(default_schedule().beta(1001), ConfigError);
    CHECK_THROWS_AS(default_schedule().beta(0), ConfigError);
    CHECK_THROWS_AS(beta_shape_from_string("quadratic"), ConfigError);
}

TEST_CASE("cosine schedule is monotone and bounded") {
    const auto sched = NoiseSchedule::make(500, 1e-4, 0.02, BetaShape::cosine);
    for (int t = 2; t <= 500; ++t) {
        CHECK(sched.beta(t) >= sched.beta(t - 1));
        CHECK(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
    }
    CHECK(sched.beta(500) < 1.0);
}

TEST_CASE("schedule json sidecar round trip") {
    const auto sched = default_schedule();
    const auto back = NoiseSchedule::from_json(sched.to_json());
    CHECK(back.hash() == sched.hash());
    CHECK(back.t_max() == 1000);
    for (int t = 1; t <= 1000; ++t) CHECK(back.beta(t) == sched.beta(t));
    CHECK(NoiseSchedule::make(999, 1e-4, 0.02, BetaShape::linear).hash() != sched.hash());

    auto bad = sched.to_json();
    bad["t_max"] = 12;
    CHECK_THROWS_AS(NoiseSchedule::from_json(bad), ConfigError);
}

TEST_CASE("forward_step trivial cases") {
    const auto sched = NoiseSchedule::from_betas({0.0, 0.1, 0.2});
    Rng rng(2);
    const auto z = random_latent(rng, {2, 3, 3});
    const auto noise = random_latent(rng, {2, 3, 3});
    CHECK(forward_step(z, 1, sched, Latent({2, 3, 3})) == z);

    const auto out = forward_step(Latent({2, 3, 3}), 3, sched, noise);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(std::sqrt(0.2) * noise[i]));

    const auto closed = forward_closed(Latent({2, 3, 3}), 3, sched, noise);
    for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(closed[i] == doctest::Approx(std::sqrt(1.0 - 0.9 * 0.8) * noise[i]));
    }
    CHECK_THROWS_AS(forward_step(z, 1, sched, Latent({2, 3, 4})), ShapeError);
}

TEST_CASE("iterated forward steps equal the closed form with the combined noise") {
    const auto sched = default_schedule();
    const auto betas = oracle_betas(1000, 1e-4L, 0.02L);
    Rng rng(3);
    const std::vector<int> shape{1, 8, 8};
    const auto z0 = random_latent(rng, shape);
    for (int t = 1; t <= 50; ++t) {
        std::vector<Latent> noises;
        Latent z = z0;
        for (int s = 1; s <= t; ++s) {
            noises.push_back(random_latent(rng, shape));
            z = forward_step(z, s, sched, noises.back());
        }
        // Expand the chain: z_t = prod a * z0 + sum_s b_s prod_{r>s} a_r eps_s.
        std::vector<long double> weight(static_cast<std::size_t>(t));
        long double signal = 1.0L;
        for (int s = t; s >= 1; --s) {
            weight[static_cast<std::size_t>(s - 1)] = std::sqrt(betas[static_cast<std::size_t>(s - 1)]) * signal;
            signal *= std::sqrt(1.0L - betas[static_cast<std::size_t>(s - 1)]);
        }
        const long double spread = std::sqrt(1.0L - signal * signal);
        Latent combined(shape);
        for (std::size_t i = 0; i < combined.size(); ++i) {
            long double acc = 0.0L;
            for (int s = 0; s < t; ++s) acc += weight[static_cast<std::size_t>(s)] * noises[static_cast<std::size_t>(s)][i];
            combined[i] = static_cast<double>(acc / spread);
        }
        const auto closed = forward_closed(z0, t, sched, combined);
        double worst = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) worst = std::max(worst, std::abs(closed[i] - z[i]));
        CHECK_MESSAGE(worst < 1e-10, "t = " << t << " max error " << worst);
    }
}

TEST_CASE("forward_closed marginal variance matches 1 - alpha_bar") {
    const auto sched = default_schedule();
    Rng rng(4);
    const int n = 100000;
    for (int t : {10, 250, 700}) {
        Latent z0({1, 1, 1});
        z0[0] = 0.7;
        double sum = 0.0, sum_sq = 0.0;
        for (int k = 0; k < n; ++k) {
            Latent eps({1, 1, 1});
            eps[0] = rng.normal();
            const double v = forward_closed(z0, t, sched, eps)[0];
            sum += v;
            sum_sq += v * v;
        }
        const double mean = sum / n;
        const double var = sum_sq / n - mean * mean;
        const double want_var = 1.0 - sched.alpha_bar(t);
        const double want_mean = std::sqrt(sched.alpha_bar(t)) * 0.7;
        CHECK(std::abs(mean - want_mean) < 3.0 * std::sqrt(want_var / n));
        CHECK(std::abs(var - want_var) < 3.0 * want_var * std::sqrt(2.0 / (n - 1)));
    }
}

TEST_CASE("posterior sampling matches the Bayes posterior of a scalar chain") {
    const auto sched = default_schedule();
    Rng rng(5);
    const int n = 100000;
    for (int t : {2, 40, 250, 900}) {
        const double x0 = -0.4, xt = 0.9;
        const double ab_t = sched.alpha_bar(t);
        // Exact noise consistent with (x0, xt), so the z0 estimate is x0.
        Latent z_t({1}), eps({1});
        z_t[0] = xt;
        eps[0] = (xt - std::sqrt(ab_t) * x0) / std::sqrt(1.0 - ab_t);

        // Prior q(z_{t-1} | z0) times likelihood q(z_t | z_{t-1}), both Gaussian.
        const double beta = sched.betas()[static_cast<std::size_t>(t - 1)];
        double ab_prev = 1.0;
        for (int s = 0; s < t - 1; ++s) ab_prev *= 1.0 - sched.betas()[static_cast<std::size_t>(s)];
        const double prior_var = 1.0 - ab_prev;
        const double precision = 1.0 / prior_var + (1.0 - beta) / beta;
        const double want_var = 1.0 / precision;
        const double want_mean =
            want_var * (std::sqrt(ab_prev) * x0 / prior_var + std::sqrt(1.0 - beta) * xt / beta);

        double sum = 0.0, sum_sq = 0.0;
        for (int k = 0; k < n; ++k) {
            Latent xi({1});
            xi[0] = rng.normal();
            const auto post = posterior_step(z_t, t, eps, sched, xi);
            CHECK_FALSE(std::abs(post.z0_pred[0] - x0) > 1e-9);
            sum += post.z_prev[0];
            sum_sq += post.z_prev[0] * post.z_prev[0];
        }
        const double mean = sum / n;
        const double var = sum_sq / n - mean * mean;
        CHECK_MESSAGE(std::abs(mean - want_mean) < 3.0 * std::sqrt(want_var / n), "t = " << t);
        CHECK_MESSAGE(std::abs(var - want_var) < 3.0 * want_var * std::sqrt(2.0 / (n - 1)), "t = " << t);
    }
}

TEST_CASE("posterior step at t = 1 ignores xi") {
    const auto sched = default_schedule();
    Rng rng(6);
    const auto z = random_latent(rng, {1, 4, 4});
    const auto eps = random_latent(rng, {1, 4, 4});
    const auto xi = random_latent(rng, {1, 4, 4});
    CHECK(posterior_step(z, 1, eps, sched, xi).z_prev == posterior_step(z, 1, eps, sched).z_prev);
    CHECK_THROWS_AS(posterior_step(z, 0, eps, sched), ConfigError);
    CHECK_THROWS_AS(posterior_step(z, 3, Latent({1, 4, 5}), sched), ShapeError);
}

TEST_CASE("perfect-predictor chain reconstructs z0") {
    const auto sched = default_schedule();
    Rng rng(7);
    const std::vector<int> shape{1, 8, 8};
    const auto z0 = random_latent(rng, shape);
    for (int depth : {1, 50, 250, 1000}) {
        for (bool stochastic : {false, true}) {
            Latent z = forward_closed(z0, depth, sched, random_latent(rng, shape));
            for (int t = depth; t >= 1; --t) {
                Latent eps(shape);
                const double ab = sched.alpha_bar(t);
                for (std::size_t i = 0; i < z.size(); ++i) {
                    eps[i] = (z[i] - std::sqrt(ab) * z0[i]) / std::sqrt(1.0 - ab);
                }
                z = stochastic ? posterior_step(z, t, eps, sched, random_latent(rng, shape)).z_prev
                               : posterior_step(z, t, eps, sched).z_prev;
            }
            double worst = 0.0;
            for (std::size_t i = 0; i < z.size(); ++i) worst = std::max(worst, std::abs(z[i] - z0[i]));
            CHECK_MESSAGE(worst < 1e-6, "depth " << depth << " stochastic " << stochastic << " error " << worst);
        }
    }
}
