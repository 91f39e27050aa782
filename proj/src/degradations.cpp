#include "conpure/degradations.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "conpure/error.hpp"
#include "conpure/random.hpp"

namespace conpure {
namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// Bilinear lattice -> image weights for pixel (y, x).
struct Bilerp {
    int i0, i1, j0, j1;
    double wy, wx;
};

Bilerp bilerp(int y, int x, int h, int w, int grid) {
    const double gy = h > 1 ? static_cast<double>(y) * (grid - 1) / (h - 1) : 0.0;
    const double gx = w > 1 ? static_cast<double>(x) * (grid - 1) / (w - 1) : 0.0;
    Bilerp b;
    b.i0 = std::min(static_cast<int>(gy), grid - 1);
    b.j0 = std::min(static_cast<int>(gx), grid - 1);
    b.i1 = std::min(b.i0 + 1, grid - 1);
    b.j1 = std::min(b.j0 + 1, grid - 1);
    b.wy = gy - b.i0;
    b.wx = gx - b.j0;
    return b;
}

Image gain_field(const std::vector<double>& lattice, int grid, int h, int w) {
    Image g(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const Bilerp b = bilerp(y, x, h, w, grid);
            const double top = (1 - b.wx) * lattice[b.i0 * grid + b.j0] + b.wx * lattice[b.i0 * grid + b.j1];
            const double bot = (1 - b.wx) * lattice[b.i1 * grid + b.j0] + b.wx * lattice[b.i1 * grid + b.j1];
            g(y, x) = static_cast<float>((1 - b.wy) * top + b.wy * bot);
        }
    }
    return g;
}

// Moves every pixel of `pre` toward `x` until |pre - x| <= budget holds in double precision.
void enforce_budget(Image& pre, const Image& x, double budget) {
    auto p = pre.pixels();
    const auto s = x.pixels();
    for (std::size_t i = 0; i < p.size(); ++i) {
        while (std::abs(static_cast<double>(p[i]) - static_cast<double>(s[i])) > budget) {
            p[i] = std::nextafter(p[i], s[i]);
        }
    }
}

}  // namespace

std::string to_string(DegradationKind kind) {
    switch (kind) {
        case DegradationKind::none:
            return "none";
        case DegradationKind::adv_noise_exposure:
            return "adv_noise_exposure";
        case DegradationKind::motion_blur:
            return "motion_blur";
    }
    return "none";
}

DegradationKind degradation_kind_from_string(const std::string& s) {
    if (s == "none") return DegradationKind::none;
    if (s == "adv_noise_exposure") return DegradationKind::adv_noise_exposure;
    if (s == "motion_blur") return DegradationKind::motion_blur;
    throw ConfigError("unknown degradation kind '" + s + "'");
}

void DegradationSpec::validate() const {
    if (!(noise_budget >= 0.0 && noise_budget <= 1.0)) throw ConfigError("noise_budget must lie in [0, 1]");
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("fraction must lie in [0, 1]");
    if (blur_kernel_len < 1) throw ConfigError("blur_kernel_len must be >= 1");
    if (pgd_steps < 0) throw ConfigError("pgd_steps must be >= 0");
    if (!(exposure_min > 0.0 && exposure_min <= exposure_max)) throw ConfigError("invalid exposure range");
    if (exposure_grid < 1) throw ConfigError("exposure_grid must be >= 1");
    if (!(pgd_step_size >= 0.0) || !(exposure_step_size >= 0.0)) throw ConfigError("negative attack step size");
}

nlohmann::json DegradationSpec::to_json() const {
    return {{"kind", to_string(kind)},
            {"noise_budget", noise_budget},
            {"pgd_steps", pgd_steps},
            {"pgd_step_size", pgd_step_size},
            {"exposure_min", exposure_min},
            {"exposure_max", exposure_max},
            {"exposure_grid", exposure_grid},
            {"exposure_step_size", exposure_step_size},
            {"blur_kernel_len", blur_kernel_len},
            {"blur_angle", blur_angle},
            {"fraction", fraction},
            {"seed", seed}};
}

DegradationSpec DegradationSpec::from_json(const nlohmann::json& j) {
    DegradationSpec s;
    s.kind = degradation_kind_from_string(j.value("kind", to_string(s.kind)));
    s.noise_budget = j.value("noise_budget", s.noise_budget);
    s.pgd_steps = j.value("pgd_steps", s.pgd_steps);
    s.pgd_step_size = j.value("pgd_step_size", s.pgd_step_size);
    s.exposure_min = j.value("exposure_min", s.exposure_min);
    s.exposure_max = j.value("exposure_max", s.exposure_max);
    s.exposure_grid = j.value("exposure_grid", s.exposure_grid);
    s.exposure_step_size = j.value("exposure_step_size", s.exposure_step_size);
    s.blur_kernel_len = j.value("blur_kernel_len", s.blur_kernel_len);
    s.blur_angle = j.value("blur_angle", s.blur_angle);
    s.fraction = j.value("fraction", s.fraction);
    s.seed = j.value("seed", s.seed);
    s.validate();
    return s;
}

AdvResult adv_degrade(const Image& image, const AttackSurrogate* surrogate, const DegradationSpec& spec,
                      int class_id, const Mask& gt, std::uint64_t seed) {
    if (spec.kind != DegradationKind::adv_noise_exposure) throw ConfigError("adv_degrade needs kind adv_noise_exposure");
    spec.validate();
    if (spec.pgd_steps > 0 && surrogate == nullptr) throw ConfigError("adv_degrade: pgd_steps > 0 needs a surrogate");
    const int h = image.height();
    const int w = image.width();
    const int grid = spec.exposure_grid;
    const double eps = spec.noise_budget;
    Rng rng(mix_seed(seed));

    // Random start inside the feasible box; the exposure lattice starts at a random gain.
    std::vector<double> delta(image.size());
    for (auto& d : delta) d = eps > 0 ? rng.uniform(-eps, eps) : 0.0;
    std::vector<double> lattice(static_cast<std::size_t>(grid) * grid);
    for (auto& g : lattice) g = spec.exposure_min + (spec.exposure_max - spec.exposure_min) * rng.uniform();
    if (spec.exposure_min == spec.exposure_max) std::fill(lattice.begin(), lattice.end(), spec.exposure_min);

    const auto x = image.pixels();
    auto compose = [&](const std::vector<double>& d, const std::vector<double>& lat, AdvResult& r) {
        r.perturbed = Image(h, w);
        auto p = r.perturbed.pixels();
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] = static_cast<float>(std::clamp(static_cast<double>(x[i]) + d[i], 0.0, 1.0));
        }
        enforce_budget(r.perturbed, image, eps);
        r.gain = gain_field(lat, grid, h, w);
        r.output = Image(h, w);
        auto o = r.output.pixels();
        const auto g = r.gain.pixels();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::clamp(g[i] * p[i], 0.0f, 1.0f);
    };

    AdvResult best;
    compose(delta, lattice, best);
    best.objective = surrogate ? surrogate->attack_objective(best.output, class_id, gt, nullptr) : 0.0;

    for (int step = 0; step < spec.pgd_steps; ++step) {
        AdvResult cur;
        compose(delta, lattice, cur);
        Image gy;
        cur.objective = surrogate->attack_objective(cur.output, class_id, gt, &gy);
        if (cur.objective > best.objective) best = cur;

        std::vector<double> glat(lattice.size(), 0.0);
        const auto p = cur.perturbed.pixels();
        const auto g = cur.gain.pixels();
        for (int yy = 0; yy < h; ++yy) {
            for (int xx = 0; xx < w; ++xx) {
                const std::size_t i = static_cast<std::size_t>(yy) * w + xx;
                const double raw = static_cast<double>(g[i]) * p[i];
                if (raw <= 0.0 || raw >= 1.0) continue;  // clipped: no gradient
                const double go = gy(yy, xx);
                const double gd = go * g[i];
                if (gd != 0.0) delta[i] += spec.pgd_step_size * (gd > 0 ? 1.0 : -1.0);
                delta[i] = std::clamp(delta[i], -eps, eps);
                const double gg = go * p[i];
                const Bilerp b = bilerp(yy, xx, h, w, grid);
                glat[b.i0 * grid + b.j0] += gg * (1 - b.wy) * (1 - b.wx);
                glat[b.i0 * grid + b.j1] += gg * (1 - b.wy) * b.wx;
                glat[b.i1 * grid + b.j0] += gg * b.wy * (1 - b.wx);
                glat[b.i1 * grid + b.j1] += gg * b.wy * b.wx;
            }
        }
        for (std::size_t k = 0; k < lattice.size(); ++k) {
            if (glat[k] != 0.0) lattice[k] += spec.exposure_step_size * (glat[k] > 0 ? 1.0 : -1.0);
            lattice[k] = std::clamp(lattice[k], spec.exposure_min, spec.exposure_max);
        }
    }
    if (spec.pgd_steps > 0) {
        AdvResult last;
        compose(delta, lattice, last);
        last.objective = surrogate->attack_objective(last.output, class_id, gt, nullptr);
        if (last.objective > best.objective) best = last;
    }
    return best;
}

Image motion_kernel(int length, double angle_degrees) {
    if (length < 1) throw ConfigError("blur kernel length must be >= 1");
    const double th = angle_degrees * std::numbers::pi / 180.0;
    const double c = std::cos(th);
    const double s = -std::sin(th);  // image rows grow downward
    const int anchor = (length - 1) / 2;
    const int r = length;
    const int size = 2 * r + 1;
    std::vector<double> k(static_cast<std::size_t>(size) * size, 0.0);
    for (int i = 0; i < length; ++i) {
        const double t = i - anchor;
        // Snap near-integer offsets so axis-aligned kernels hit pixel centers exactly.
        double px = t * c;
        double py = t * s;
        if (std::abs(px - std::round(px)) < 1e-9) px = std::round(px);
        if (std::abs(py - std::round(py)) < 1e-9) py = std::round(py);
        const double fx = px + r;
        const double fy = py + r;
        const int x0 = static_cast<int>(std::floor(fx));
        const int y0 = static_cast<int>(std::floor(fy));
        const double ax = fx - x0;
        const double ay = fy - y0;
        const double wts[4] = {(1 - ay) * (1 - ax), (1 - ay) * ax, ay * (1 - ax), ay * ax};
        const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
        const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
        for (int q = 0; q < 4; ++q) {
            if (wts[q] == 0.0) continue;
            k[static_cast<std::size_t>(ys[q]) * size + xs[q]] += wts[q];
        }
    }
    double total = 0.0;
    for (double v : k) total += v;
    Image out(size, size);
    for (std::size_t i = 0; i < k.size(); ++i) out.pixels()[i] = static_cast<float>(k[i] / total);
    return out;
}

Image motion_blur(const Image& image, const DegradationSpec& spec) {
    if (spec.kind != DegradationKind::motion_blur) throw ConfigError("motion_blur needs kind motion_blur");
    spec.validate();
    if (spec.blur_kernel_len > std::min(image.height(), image.width())) {
        throw ConfigError("blur kernel longer than the image side");
    }
    if (spec.blur_kernel_len == 1) return image;
    const Image k = motion_kernel(spec.blur_kernel_len, spec.blur_angle);
    const int r = k.height() / 2;
    const int h = image.height();
    const int w = image.width();
    struct Tap {
        int dy, dx;
        double w;
    };
    std::vector<Tap> taps;
    for (int u = 0; u < k.height(); ++u) {
        for (int v = 0; v < k.width(); ++v) {
            if (k(u, v) != 0.0f) taps.push_back({u - r, v - r, k(u, v)});
        }
    }
    Image out(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (const auto& t : taps) {
                // Convolution flips the kernel.
                const int yy = std::clamp(y - t.dy, 0, h - 1);
                const int xx = std::clamp(x - t.dx, 0, w - 1);
                acc += t.w * image(yy, xx);
            }
            out(y, x) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
        }
    }
    return out;
}

std::uint64_t degradation_seed(const DegradationSpec& spec, const std::string& group, std::size_t index) {
    return mix_seed(spec.seed ^ fnv1a(group)) + index;
}

ImageGroup degrade_group(const ImageGroup& group, const DegradationSpec& spec, const AttackSurrogate* surrogate) {
    if (group.images.empty()) throw ConfigError("degrade_group: group " + group.name + " is empty");
    spec.validate();
    ImageGroup out = group;
    const std::size_t n = spec.kind == DegradationKind::none ? 0 : degraded_count_for(group.size(), spec.fraction);
    for (std::size_t i = 0; i < out.images.size(); ++i) {
        auto& gi = out.images[i];
        gi.degraded = i < n;
        if (!gi.degraded) continue;
        Image d;
        if (spec.kind == DegradationKind::adv_noise_exposure) {
            d = adv_degrade(gi.image, surrogate, spec, group.class_id, gi.mask, degradation_seed(spec, group.name, i)).output;
        } else {
            d = motion_blur(gi.image, spec);
        }
        quantize_8bit(d);
        gi.image = std::move(d);
    }
    return out;
}

}  // namespace conpure
