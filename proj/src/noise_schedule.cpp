#include "conpure/noise_schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "conpure/hashing.hpp"

namespace conpure {

std::string to_string(BetaShape shape) {
    return shape == BetaShape::linear ? "linear" : "cosine";
}

BetaShape beta_shape_from_string(const std::string& name) {
    if (name == "linear") return BetaShape::linear;
    if (name == "cosine") return BetaShape::cosine;
    throw ConfigError("unknown beta schedule family '" + name + "'");
}

NoiseSchedule NoiseSchedule::make(int t_max, double beta_start, double beta_end, BetaShape shape) {
    if (t_max < 1) {
        throw ConfigError("t_max must be >= 1");
    }
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
        throw ConfigError("betas must satisfy 0 < beta_start <= beta_end < 1");
    }
    std::vector<double> betas(static_cast<std::size_t>(t_max));
    if (shape == BetaShape::linear) {
        for (int t = 1; t <= t_max; ++t) {
            const double frac = t_max == 1 ? 0.0 : static_cast<double>(t - 1) / (t_max - 1);
            betas[t - 1] = beta_start + (beta_end - beta_start) * frac;
        }
    } else {
        constexpr double offset = 0.008;
        auto f = [&](int t) {
            const double x = (static_cast<double>(t) / t_max + offset) / (1.0 + offset) * std::numbers::pi / 2.0;
            return std::cos(x) * std::cos(x);
        };
        const double f0 = f(0);
        for (int t = 1; t <= t_max; ++t) {
            const double beta = 1.0 - (f(t) / f0) / (f(t - 1) / f0);
            betas[t - 1] = std::clamp(beta, beta_start, beta_end);
        }
    }
    return from_betas(std::move(betas), shape);
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas, BetaShape shape) {
    if (betas.empty()) {
        throw ConfigError("beta table is empty");
    }
    for (std::size_t i = 0; i < betas.size(); ++i) {
        if (!std::isfinite(betas[i]) || betas[i] < 0.0 || betas[i] >= 1.0) {
            throw ConfigError("beta out of range [0, 1) at step " + std::to_string(i + 1));
        }
        if (i > 0 && betas[i] < betas[i - 1]) {
            throw ConfigError("beta table is not monotone at step " + std::to_string(i + 1));
        }
    }
    NoiseSchedule s;
    s.shape_ = shape;
    s.beta_ = std::move(betas);
    const std::size_t n = s.beta_.size();
    s.alpha_.resize(n);
    s.alpha_bar_.resize(n);
    s.a_.resize(n);
    s.b_.resize(n);
    s.sigma_.resize(n);
    double running = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double alpha = 1.0 - s.beta_[i];
        const double prev = running;
        running *= alpha;
        s.alpha_[i] = alpha;
        s.alpha_bar_[i] = running;
        s.a_[i] = std::sqrt(alpha);
        s.b_[i] = std::sqrt(s.beta_[i]);
        const double num = (1.0 - alpha) * (1.0 - prev);
        const double den = 1.0 - running;
        s.sigma_[i] = den > 0.0 ? std::sqrt(num / den) : 0.0;
    }
    return s;
}

nlohmann::json NoiseSchedule::to_json() const {
    return nlohmann::json{{"family", to_string(shape_)}, {"t_max", t_max()}, {"betas", beta_}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
    try {
        auto betas = j.at("betas").get<std::vector<double>>();
        const int t_max = j.at("t_max").get<int>();
        if (static_cast<int>(betas.size()) != t_max) {
            throw ConfigError("schedule sidecar: t_max does not match beta count");
        }
        return from_betas(std::move(betas), beta_shape_from_string(j.at("family").get<std::string>()));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("schedule sidecar: ") + e.what());
    }
}

std::string NoiseSchedule::hash() const {
    return sha256_hex(to_json().dump());
}

}  // namespace conpure
