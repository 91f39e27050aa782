#include "conpure/corpus.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <numbers>

#include "conpure/error.hpp"
#include "conpure/io.hpp"
#include "conpure/random.hpp"

namespace conpure {
namespace {

bool in_polygon(double u, double v, const std::vector<std::array<double, 2>>& poly) {
    bool inside = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto& a = poly[i];
        const auto& b = poly[j];
        if ((a[1] > v) != (b[1] > v)) {
            const double x = (b[0] - a[0]) * (v - a[1]) / (b[1] - a[1]) + a[0];
            if (u < x) inside = !inside;
        }
    }
    return inside;
}

const std::vector<std::array<double, 2>>& star_polygon() {
    static const auto poly = [] {
        std::vector<std::array<double, 2>> p;
        for (int k = 0; k < 10; ++k) {
            const double r = (k % 2 == 0) ? 0.5 : 0.24;
            const double ang = -std::numbers::pi / 2.0 + k * std::numbers::pi / 5.0;
            p.push_back({r * std::cos(ang), r * std::sin(ang) + 0.04});
        }
        return p;
    }();
    return poly;
}

struct Placement {
    int class_id;
    double cx;
    double cy;
    double size;
};

bool boxes_overlap(const Placement& a, const Placement& b, double margin) {
    const double ha = a.size / 2.0 + margin;
    const double hb = b.size / 2.0 + margin;
    return std::abs(a.cx - b.cx) < ha + hb && std::abs(a.cy - b.cy) < ha + hb;
}

Placement place(Rng& rng, int class_id, double size, int image_size) {
    const double half = size / 2.0 + 2.0;
    return {class_id, rng.uniform(half, image_size - half), rng.uniform(half, image_size - half), size};
}

void paint(Image& img, const Mask& m, float value) {
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            if (m(y, x)) img(y, x) = value;
        }
    }
}

}  // namespace

const std::vector<std::string>& shape_classes() {
    static const std::vector<std::string> names = {"disk", "square", "triangle", "cross",
                                                   "ring", "bar",    "ell",      "star"};
    return names;
}

int class_id(const std::string& name) {
    const auto& names = shape_classes();
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) {
        throw ConfigError("unknown shape class '" + name + "'");
    }
    return static_cast<int>(it - names.begin());
}

bool shape_contains(int class_id, double u, double v) {
    const double r2 = u * u + v * v;
    switch (class_id) {
        case 0:  // disk
            return r2 <= 0.25;
        case 1:  // square
            return std::abs(u) <= 0.40 && std::abs(v) <= 0.40;
        case 2:  // triangle, apex up
            return v <= 0.40 && v >= -0.45 && std::abs(u) <= 0.5 * (v + 0.45) / 0.85;
        case 3:  // cross
            return (std::abs(u) <= 0.15 && std::abs(v) <= 0.48) || (std::abs(v) <= 0.15 && std::abs(u) <= 0.48);
        case 4:  // ring
            return r2 <= 0.25 && r2 >= 0.28 * 0.28;
        case 5:  // bar
            return std::abs(u) <= 0.50 && std::abs(v) <= 0.16;
        case 6:  // ell
            return (u >= -0.40 && u <= -0.10 && std::abs(v) <= 0.48) || (v >= 0.18 && v <= 0.48 && std::abs(u) <= 0.40);
        case 7:  // star
            return in_polygon(u, v, star_polygon());
        default:
            throw ConfigError("shape class id out of range");
    }
}

Mask render_shape(int class_id, double center_x, double center_y, double size, int height, int width) {
    Mask m(height, width);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const double u = (x + 0.5 - center_x) / size;
            const double v = (y + 0.5 - center_y) / size;
            if (std::abs(u) <= 0.5 && std::abs(v) <= 0.5 && shape_contains(class_id, u, v)) {
                m.set(y, x, true);
            }
        }
    }
    return m;
}

std::vector<Image> ImageGroup::pixels() const {
    std::vector<Image> out;
    out.reserve(images.size());
    for (const auto& gi : images) out.push_back(gi.image);
    return out;
}

std::size_t ImageGroup::degraded_count() const {
    return static_cast<std::size_t>(
        std::count_if(images.begin(), images.end(), [](const GroupImage& g) { return g.degraded; }));
}

std::size_t ShapeGroupCorpus::image_count() const {
    std::size_t n = 0;
    for (const auto& g : groups) n += g.size();
    return n;
}

nlohmann::json CorpusOptions::to_json() const {
    return {{"image_size", image_size},
            {"min_object", min_object},
            {"max_object", max_object},
            {"max_distractors", max_distractors},
            {"object_contrast_min", object_contrast_min},
            {"object_contrast_max", object_contrast_max},
            {"distractor_contrast_min", distractor_contrast_min},
            {"distractor_contrast_max", distractor_contrast_max},
            {"texture_sigma", texture_sigma}};
}

CorpusOptions CorpusOptions::from_json(const nlohmann::json& j) {
    CorpusOptions o;
    o.image_size = j.value("image_size", o.image_size);
    o.min_object = j.value("min_object", o.min_object);
    o.max_object = j.value("max_object", o.max_object);
    o.max_distractors = j.value("max_distractors", o.max_distractors);
    o.object_contrast_min = j.value("object_contrast_min", o.object_contrast_min);
    o.object_contrast_max = j.value("object_contrast_max", o.object_contrast_max);
    o.distractor_contrast_min = j.value("distractor_contrast_min", o.distractor_contrast_min);
    o.distractor_contrast_max = j.value("distractor_contrast_max", o.distractor_contrast_max);
    o.texture_sigma = j.value("texture_sigma", o.texture_sigma);
    return o;
}

std::size_t degraded_count_for(std::size_t group_size, double fraction) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw ConfigError("degraded fraction must lie in [0, 1]");
    }
    // Guard against 0.5 * 6 evaluating to 3.0000000000000004.
    const double raw = fraction * static_cast<double>(group_size);
    const auto n = static_cast<std::size_t>(std::ceil(raw - 1e-9));
    return std::min(n, group_size);
}

ShapeGroupCorpus generate_corpus(std::uint64_t seed, int n_groups, int group_size, double degraded_fraction,
                                 const CorpusOptions& opt) {
    if (n_groups < 1 || group_size < 1) {
        throw ConfigError("n_groups and group_size must be >= 1");
    }
    if (opt.image_size < opt.max_object + 6 || opt.min_object < 4 || opt.min_object > opt.max_object) {
        throw ConfigError("corpus object sizes do not fit the image size");
    }
    const std::size_t n_flagged = degraded_count_for(static_cast<std::size_t>(group_size), degraded_fraction);
    const int n_classes = static_cast<int>(shape_classes().size());
    const int s = opt.image_size;

    Rng group_rng(seed);
    const int class_offset = group_rng.uniform_int(0, n_classes - 1);

    ShapeGroupCorpus corpus;
    corpus.image_size = s;
    for (int g = 0; g < n_groups; ++g) {
        ImageGroup group;
        group.class_id = (g + class_offset) % n_classes;
        char buf[64];
        std::snprintf(buf, sizeof buf, "g%03d_%s", g, group.class_name().c_str());
        group.name = buf;
        for (int i = 0; i < group_size; ++i) {
            Rng rng(seed * 1000003ULL + static_cast<std::uint64_t>(g) * 1009ULL + static_cast<std::uint64_t>(i));
            Image img(s, s);
            // Background: base level, smooth undulation and (later) fine texture.
            const double base = rng.uniform(0.15, 0.35);
            std::array<double, 9> wave{};
            for (int k = 0; k < 3; ++k) {
                wave[3 * k] = rng.uniform(0.5, 2.5) * 2.0 * std::numbers::pi / s;
                wave[3 * k + 1] = rng.uniform(0.0, 2.0 * std::numbers::pi);
                wave[3 * k + 2] = rng.uniform(0.0, 2.0 * std::numbers::pi);
            }
            for (int y = 0; y < s; ++y) {
                for (int x = 0; x < s; ++x) {
                    double v = base;
                    for (int k = 0; k < 3; ++k) {
                        const double f = wave[3 * k];
                        const double dir = wave[3 * k + 1];
                        v += 0.025 * std::cos(f * (x * std::cos(dir) + y * std::sin(dir)) + wave[3 * k + 2]);
                    }
                    img(y, x) = static_cast<float>(v);
                }
            }

            const double obj_size = rng.uniform(opt.min_object, opt.max_object);
            const Placement obj = place(rng, group.class_id, obj_size, s);
            const int n_distract = rng.uniform_int(1, std::max(1, opt.max_distractors));
            for (int d = 0; d < n_distract; ++d) {
                int cls = rng.uniform_int(0, n_classes - 2);
                if (cls >= group.class_id) ++cls;
                const double dsize = rng.uniform(opt.min_object * 0.75, opt.max_object * 0.8);
                for (int attempt = 0; attempt < 50; ++attempt) {
                    Placement p = place(rng, cls, dsize, s);
                    if (!boxes_overlap(p, obj, 2.0)) {
                        const double c = rng.uniform(opt.distractor_contrast_min, opt.distractor_contrast_max);
                        paint(img, render_shape(cls, p.cx, p.cy, p.size, s, s), static_cast<float>(base + c));
                        break;
                    }
                }
            }
            const double contrast = rng.uniform(opt.object_contrast_min, opt.object_contrast_max);
            Mask mask = render_shape(group.class_id, obj.cx, obj.cy, obj.size, s, s);
            paint(img, mask, static_cast<float>(base + contrast));
            for (auto& v : img.pixels()) {
                v = static_cast<float>(v + opt.texture_sigma * rng.normal());
            }
            quantize_8bit(img);

            GroupImage gi;
            std::snprintf(buf, sizeof buf, "%s_%02d", group.name.c_str(), i);
            gi.name = buf;
            gi.image = std::move(img);
            gi.mask = std::move(mask);
            gi.degraded = static_cast<std::size_t>(i) < n_flagged;
            group.images.push_back(std::move(gi));
        }
        corpus.groups.push_back(std::move(group));
    }
    return corpus;
}

nlohmann::json group_manifest(const ImageGroup& group) {
    nlohmann::json images = nlohmann::json::array();
    for (const auto& gi : group.images) {
        images.push_back({{"name", gi.name},
                          {"image", "images/" + gi.name + ".pgm"},
                          {"mask", "masks/" + gi.name + ".pgm"},
                          {"degraded", gi.degraded}});
    }
    return {{"name", group.name}, {"class", group.class_name()}, {"images", images}};
}

void save_group(const ImageGroup& group, const std::filesystem::path& dir) {
    for (const auto& gi : group.images) {
        write_pgm(dir / "images" / (gi.name + ".pgm"), gi.image);
        write_mask_pgm(dir / "masks" / (gi.name + ".pgm"), gi.mask);
    }
}

void save_corpus(const ShapeGroupCorpus& corpus, const std::filesystem::path& dir) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : corpus.groups) {
        save_group(g, dir);
        groups.push_back(group_manifest(g));
    }
    write_json(dir / "manifest.json",
               {{"image_size", corpus.image_size}, {"classes", shape_classes()}, {"groups", groups}});
}

ShapeGroupCorpus load_corpus(const std::filesystem::path& dir) {
    const auto manifest = read_json(dir / "manifest.json");
    ShapeGroupCorpus corpus;
    try {
        corpus.image_size = manifest.at("image_size").get<int>();
        for (const auto& gj : manifest.at("groups")) {
            ImageGroup g;
            g.name = gj.at("name").get<std::string>();
            g.class_id = class_id(gj.at("class").get<std::string>());
            for (const auto& ij : gj.at("images")) {
                GroupImage gi;
                gi.name = ij.at("name").get<std::string>();
                gi.image = read_pgm(dir / ij.at("image").get<std::string>());
                gi.mask = read_mask_pgm(dir / ij.at("mask").get<std::string>());
                gi.degraded = ij.at("degraded").get<bool>();
                g.images.push_back(std::move(gi));
            }
            corpus.groups.push_back(std::move(g));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(dir.string() + "/manifest.json: " + e.what());
    }
    return corpus;
}

}  // namespace conpure
