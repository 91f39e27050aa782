#pragma once

#include <cstdint>
#include <string>

#include "conpure/corpus.hpp"
#include "conpure/detector.hpp"
#include "conpure/image.hpp"
#include "json.hpp"

namespace conpure {

enum class DegradationKind { none, adv_noise_exposure, motion_blur };
std::string to_string(DegradationKind kind);
DegradationKind degradation_kind_from_string(const std::string& s);

struct DegradationSpec {
    DegradationKind kind = DegradationKind::adv_noise_exposure;
    /// L-infinity bound of the additive component.
    double noise_budget = 16.0 / 255.0;
    int pgd_steps = 40;
    double pgd_step_size = 2.0 / 255.0;
    /// Multiplicative exposure gain range; the field is bilinear over an exposure_grid^2 lattice.
    double exposure_min = 0.5;
    double exposure_max = 1.5;
    int exposure_grid = 3;
    double exposure_step_size = 0.05;
    int blur_kernel_len = 17;
    double blur_angle = 0.0;
    double fraction = 0.5;
    std::uint64_t seed = 0;

    /// Throws ConfigError when a field is out of range.
    void validate() const;
    nlohmann::json to_json() const;
    static DegradationSpec from_json(const nlohmann::json& j);
};

struct AdvResult {
    Image output;
    /// x + delta before exposure, the component bounded by noise_budget.
    Image perturbed;
    Image gain;
    double objective = 0.0;
};

/// Sign-gradient ascent on the surrogate objective, jointly over an additive perturbation
/// (|delta| <= noise_budget at every pixel) and a smooth exposure gain field.
/// output = clip(gain * (x + delta), 0, 1).
AdvResult adv_degrade(const Image& image, const AttackSurrogate* surrogate, const DegradationSpec& spec,
                      int class_id, const Mask& gt, std::uint64_t seed);

/// Normalized line kernel of blur_kernel_len taps at blur_angle degrees (counter-clockwise).
Image motion_kernel(int length, double angle_degrees);
/// Convolution with replicated borders.
Image motion_blur(const Image& image, const DegradationSpec& spec);

/// Attack seed degrade_group uses for image `index` of `group`.
std::uint64_t degradation_seed(const DegradationSpec& spec, const std::string& group, std::size_t index);

/// Degrades the first ceil(fraction * N) images in group order, quantizes them to 8 bits and
/// sets their flags; the remaining images are copied unchanged with cleared flags.
ImageGroup degrade_group(const ImageGroup& group, const DegradationSpec& spec, const AttackSurrogate* surrogate);

}  // namespace conpure
