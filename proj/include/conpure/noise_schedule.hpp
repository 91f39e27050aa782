#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "conpure/error.hpp"
#include "conpure/tensor.hpp"
#include "json.hpp"

namespace conpure {

enum class BetaShape { linear, cosine };

std::string to_string(BetaShape shape);
BetaShape beta_shape_from_string(const std::string& name);

/// Precomputed DDPM coefficient tables for steps t = 1..t_max.
///
/// alpha_t = 1 - beta_t, alpha_bar_t = prod_{s<=t} alpha_s with alpha_bar_0 = 1,
/// a_t = sqrt(alpha_t), b_t = sqrt(1 - alpha_t) and
/// sigma_t^2 = (1 - alpha_t)(1 - alpha_bar_{t-1}) / (1 - alpha_bar_t).
/// Immutable once built; safe to share between threads.
class NoiseSchedule {
public:
    /// Throws ConfigError unless 0 < beta_start <= beta_end < 1 and t_max >= 1.
    static NoiseSchedule make(int t_max, double beta_start, double beta_end, BetaShape shape);

    /// Builds from an explicit beta table. Betas must lie in [0, 1) and be non-decreasing.
    static NoiseSchedule from_betas(std::vector<double> betas, BetaShape shape = BetaShape::linear);

    static NoiseSchedule from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    /// SHA-256 of the serialized beta table.
    std::string hash() const;

    int t_max() const { return static_cast<int>(beta_.size()); }
    BetaShape shape() const { return shape_; }

    double beta(int t) const { return beta_[index(t)]; }
    double alpha(int t) const { return alpha_[index(t)]; }
    /// Defined for t = 0 as 1.
    double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_[index(t)]; }
    double a(int t) const { return a_[index(t)]; }
    double b(int t) const { return b_[index(t)]; }
    double sigma(int t) const { return sigma_[index(t)]; }

    std::span<const double> betas() const { return beta_; }

private:
    NoiseSchedule() = default;
    std::size_t index(int t) const {
        if (t < 1 || t > t_max()) {
            throw ConfigError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(t_max()) + "]");
        }
        return static_cast<std::size_t>(t - 1);
    }

    BetaShape shape_ = BetaShape::linear;
    std::vector<double> beta_;
    std::vector<double> alpha_;
    std::vector<double> alpha_bar_;
    std::vector<double> a_;
    std::vector<double> b_;
    std::vector<double> sigma_;
};

/// z_t = a_t z_{t-1} + b_t noise.
template <typename T>
Tensor<T> forward_step(const Tensor<T>& z_prev, int t, const NoiseSchedule& schedule, const Tensor<T>& noise) {
    require_same_shape(z_prev, noise, "forward_step");
    const double a = schedule.a(t);
    const double b = schedule.b(t);
    Tensor<T> out(z_prev.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<T>(a * z_prev[i] + b * noise[i]);
    }
    return out;
}

/// z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) noise. Accepts t = 0 (returns z0).
template <typename T>
Tensor<T> forward_closed(const Tensor<T>& z0, int t, const NoiseSchedule& schedule, const Tensor<T>& noise) {
    require_same_shape(z0, noise, "forward_closed");
    const double ab = schedule.alpha_bar(t);
    const double signal = std::sqrt(ab);
    const double spread = std::sqrt(1.0 - ab);
    Tensor<T> out(z0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<T>(signal * z0[i] + spread * noise[i]);
    }
    return out;
}

template <typename T>
struct PosteriorSample {
    Tensor<T> z_prev;
    Tensor<T> z0_pred;
};

namespace detail {

template <typename T>
PosteriorSample<T> posterior_impl(const Tensor<T>& z_t, int t, const Tensor<T>& eps_pred,
                                  const NoiseSchedule& schedule, const Tensor<T>* xi) {
    if (t == 0) {
        throw ConfigError("posterior_step requires t >= 1");
    }
    require_same_shape(z_t, eps_pred, "posterior_step");
    if (xi) {
        require_same_shape(z_t, *xi, "posterior_step xi");
    }
    const double ab_t = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t - 1);
    const double alpha = schedule.alpha(t);
    const double one_minus_ab = 1.0 - ab_t;
    const double sqrt_ab = std::sqrt(ab_t);
    const double sqrt_one_minus_ab = std::sqrt(one_minus_ab);

    PosteriorSample<T> out{Tensor<T>(z_t.shape()), Tensor<T>(z_t.shape())};
    if (one_minus_ab <= 0.0) {
        // No noise has been injected up to t: the chain is the identity.
        out.z_prev = z_t;
        out.z0_pred = z_t;
        return out;
    }
    const double c0 = std::sqrt(ab_prev) * (1.0 - alpha) / one_minus_ab;
    const double ct = std::sqrt(alpha) * (1.0 - ab_prev) / one_minus_ab;
    const double sigma = schedule.sigma(t);
    for (std::size_t i = 0; i < z_t.size(); ++i) {
        const double z0 = (z_t[i] - sqrt_one_minus_ab * eps_pred[i]) / sqrt_ab;
        double prev = c0 * z0 + ct * z_t[i];
        if (xi) {
            prev += sigma * (*xi)[i];
        }
        out.z0_pred[i] = static_cast<T>(z0);
        out.z_prev[i] = static_cast<T>(prev);
    }
    return out;
}

}  // namespace detail

/// One reverse DDPM step with a zero posterior sample (xi = 0).
template <typename T>
PosteriorSample<T> posterior_step(const Tensor<T>& z_t, int t, const Tensor<T>& eps_pred,
                                  const NoiseSchedule& schedule) {
    return detail::posterior_impl<T>(z_t, t, eps_pred, schedule, nullptr);
}

/// One reverse DDPM step: predicts z0 from eps_pred and draws z_{t-1} from the Gaussian posterior
/// q(z_{t-1} | z_t, z0) using the supplied standard-normal xi.
template <typename T>
PosteriorSample<T> posterior_step(const Tensor<T>& z_t, int t, const Tensor<T>& eps_pred,
                                  const NoiseSchedule& schedule, const Tensor<T>& xi) {
    return detail::posterior_impl<T>(z_t, t, eps_pred, schedule, &xi);
}

}  // namespace conpure
