#include "conpure/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>

#include "conpure/error.hpp"
#include "conpure/io.hpp"

namespace conpure {
namespace {

constexpr float kFeatureEps = 1e-6f;

Mask dilate(const Mask& m, int radius) {
    Mask out(m.height(), m.width());
    for (int y = 0; y < m.height(); ++y) {
        for (int x = 0; x < m.width(); ++x) {
            if (!m(y, x)) continue;
            for (int dy = -radius; dy <= radius; ++dy) {
                for (int dx = -radius; dx <= radius; ++dx) {
                    const int yy = y + dy;
                    const int xx = x + dx;
                    if (yy >= 0 && yy < m.height() && xx >= 0 && xx < m.width()) out.set(yy, xx, true);
                }
            }
        }
    }
    return out;
}

struct Centroid {
    double y = 0.0;
    double x = 0.0;
    double area = 0.0;
};

Centroid centroid(const Mask& m) {
    Centroid c;
    for (int y = 0; y < m.height(); ++y) {
        for (int x = 0; x < m.width(); ++x) {
            if (m(y, x)) {
                c.y += y;
                c.x += x;
                c.area += 1.0;
            }
        }
    }
    if (c.area > 0) {
        c.y /= c.area;
        c.x /= c.area;
    }
    return c;
}

}  // namespace

std::vector<float> edge_features(const Image& image) {
    const int h = image.height();
    const int w = image.width();
    std::vector<float> f(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const float v = image(y, x);
            const float gx = x + 1 < w ? image(y, x + 1) - v : 0.0f;
            const float gy = y + 1 < h ? image(y + 1, x) - v : 0.0f;
            f[static_cast<std::size_t>(y) * w + x] = std::sqrt(gx * gx + gy * gy + kFeatureEps);
        }
    }
    return f;
}

std::vector<SaliencyMap> detect_group(const CoSaliencyDetector& detector, const ImageGroup& group) {
    if (group.images.empty()) throw ConfigError("detect_group: group " + group.name + " is empty");
    return detector.detect(group.pixels());
}

TemplateDetector::TemplateDetector(TemplateDetectorConfig config) : config_(std::move(config)) {
    if (config_.scales.empty()) throw ConfigError("template detector needs at least one scale");
    const int n_classes = static_cast<int>(shape_classes().size());
    for (int c = 0; c < n_classes; ++c) {
        for (double s : config_.scales) {
            if (!(s >= 4.0)) throw ConfigError("template scales must be >= 4 pixels");
            Template t;
            t.center = static_cast<int>(std::ceil(s / 2.0)) + 2;
            t.size = 2 * t.center + 1;
            const Mask m = render_shape(c, t.center + 0.5, t.center + 0.5, s, t.size, t.size);
            t.weights = edge_features(mask_to_image(m));
            double mean = 0.0;
            for (float v : t.weights) mean += v;
            mean /= static_cast<double>(t.weights.size());
            double norm = 0.0;
            for (auto& v : t.weights) {
                v = static_cast<float>(v - mean);
                norm += static_cast<double>(v) * v;
            }
            norm = std::sqrt(norm);
            for (auto& v : t.weights) v = static_cast<float>(v / norm);
            templates_.push_back(std::move(t));
        }
    }
}

std::vector<float> TemplateDetector::response(const std::vector<float>& features, int h, int w,
                                              const Template& t) const {
    const int pad = t.center;
    const int pw = w + 2 * pad;
    std::vector<float> padded(static_cast<std::size_t>(h + 2 * pad) * pw, 0.0f);
    for (int y = 0; y < h; ++y) {
        std::copy_n(features.begin() + static_cast<std::ptrdiff_t>(y) * w, w,
                    padded.begin() + static_cast<std::ptrdiff_t>(y + pad) * pw + pad);
    }
    std::vector<float> out(static_cast<std::size_t>(h) * w, 0.0f);
    for (int u = 0; u < t.size; ++u) {
        for (int y = 0; y < h; ++y) {
            float* row = out.data() + static_cast<std::size_t>(y) * w;
            const float* src = padded.data() + static_cast<std::size_t>(y + u) * pw;
            for (int v = 0; v < t.size; ++v) {
                const float wt = t.weights[static_cast<std::size_t>(u) * t.size + v];
                const float* s = src + v;
                for (int x = 0; x < w; ++x) row[x] += wt * s[x];
            }
        }
    }
    return out;
}

std::vector<TemplateMatch> TemplateDetector::best_per_class(const Image& image) const {
    const int h = image.height();
    const int w = image.width();
    const auto f = edge_features(image);
    const int n_classes = static_cast<int>(shape_classes().size());
    std::vector<TemplateMatch> best(static_cast<std::size_t>(n_classes));
    for (int c = 0; c < n_classes; ++c) {
        best[c].class_id = c;
        best[c].score = -std::numeric_limits<double>::infinity();
        for (int si = 0; si < static_cast<int>(config_.scales.size()); ++si) {
            const auto r = response(f, h, w, tmpl(c, si));
            for (int i = 0; i < h * w; ++i) {
                if (r[i] > best[c].score) {
                    best[c] = {c, si, i / w, i % w, r[i]};
                }
            }
        }
    }
    return best;
}

int TemplateDetector::classify(const Image& image) const {
    const auto best = best_per_class(image);
    int arg = 0;
    for (int c = 1; c < static_cast<int>(best.size()); ++c) {
        if (best[c].score > best[arg].score) arg = c;
    }
    return arg;
}

int TemplateDetector::vote(const std::vector<std::vector<TemplateMatch>>& per_image) const {
    const int n_classes = static_cast<int>(shape_classes().size());
    int arg = 0;
    double arg_score = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < n_classes; ++c) {
        std::vector<double> scores;
        for (const auto& m : per_image) scores.push_back(m[c].score);
        std::sort(scores.begin(), scores.end());
        double s = 0.0;
        for (double v : scores) s += v;
        if (s > arg_score) {
            arg_score = s;
            arg = c;
        }
    }
    return arg;
}

Mask TemplateDetector::match_mask(const TemplateMatch& match, int height, int width) const {
    return render_shape(match.class_id, match.x + 0.5, match.y + 0.5, config_.scales[match.scale_index], height,
                        width);
}

SaliencyMap TemplateDetector::render(const Image& image, const TemplateMatch& match) const {
    const int h = image.height();
    const int w = image.width();
    const Mask core = match_mask(match, h, w);
    const Mask support = dilate(core, config_.dilation);
    const Mask outer = dilate(support, 2);
    double so = 0.0, no = 0.0, sb = 0.0, nb = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (core(y, x)) {
                so += image(y, x);
                no += 1.0;
            } else if (outer(y, x) && !support(y, x)) {
                sb += image(y, x);
                nb += 1.0;
            }
        }
    }
    const double mu_o = no > 0 ? so / no : 1.0;
    const double mu_b = nb > 0 ? sb / nb : 0.0;
    SaliencyMap map;
    map.threshold = config_.threshold;
    map.prob = Image(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!support(y, x)) continue;
            double p;
            if (std::abs(mu_o - mu_b) < 0.02) {
                p = core(y, x) ? 1.0 : 0.0;
            } else {
                p = (image(y, x) - mu_b) / (mu_o - mu_b);
            }
            map.prob(y, x) = static_cast<float>(std::clamp(p, 0.0, 1.0));
        }
    }
    quantize_8bit(map.prob);
    return map;
}

std::vector<SaliencyMap> TemplateDetector::detect(const std::vector<Image>& images) const {
    if (images.empty()) throw ConfigError("detector received an empty group");
    for (const auto& im : images) {
        if (!im.same_shape(images.front())) throw ShapeError("images within a group differ in resolution");
    }
    std::vector<std::vector<TemplateMatch>> per_image;
    per_image.reserve(images.size());
    for (const auto& im : images) per_image.push_back(best_per_class(im));
    const int c = vote(per_image);
    std::vector<SaliencyMap> maps;
    maps.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) maps.push_back(render(images[i], per_image[i][c]));
    return maps;
}

double TemplateDetector::attack_objective(const Image& image, int class_id, const Mask& gt, Image* grad) const {
    const int h = image.height();
    const int w = image.width();
    if (gt.height() != h || gt.width() != w) throw ShapeError("attack_objective: mask shape mismatch");
    const Centroid g = centroid(gt);
    const double near_r = 2.5;
    const double far_r = std::max(4.0, 0.4 * std::sqrt(g.area));
    const auto f = edge_features(image);

    struct Best {
        double score = -std::numeric_limits<double>::infinity();
        int si = -1, y = 0, x = 0;
    } near, far;
    for (int si = 0; si < static_cast<int>(config_.scales.size()); ++si) {
        const auto r = response(f, h, w, tmpl(class_id, si));
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double d = std::hypot(y - g.y, x - g.x);
                const double v = r[static_cast<std::size_t>(y) * w + x];
                Best* b = d <= near_r ? &near : (d > far_r ? &far : nullptr);
                if (b && v > b->score) *b = {v, si, y, x};
            }
        }
    }
    if (near.si < 0 || far.si < 0) throw ConfigError("attack_objective: object mask leaves no near/far region");
    const double objective = far.score - near.score;
    if (grad == nullptr) return objective;

    // d(objective)/d(features): +template at the far match, -template at the near match.
    std::vector<float> df(f.size(), 0.0f);
    auto scatter = [&](const Best& b, float sign) {
        const Template& t = tmpl(class_id, b.si);
        for (int u = 0; u < t.size; ++u) {
            const int y = b.y + u - t.center;
            if (y < 0 || y >= h) continue;
            for (int v = 0; v < t.size; ++v) {
                const int x = b.x + v - t.center;
                if (x < 0 || x >= w) continue;
                df[static_cast<std::size_t>(y) * w + x] += sign * t.weights[static_cast<std::size_t>(u) * t.size + v];
            }
        }
    };
    scatter(far, 1.0f);
    scatter(near, -1.0f);

    *grad = Image(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            if (df[i] == 0.0f) continue;
            const float v = image(y, x);
            const float k = df[i] / f[i];
            if (x + 1 < w) {
                const float gx = image(y, x + 1) - v;
                (*grad)(y, x + 1) += k * gx;
                (*grad)(y, x) -= k * gx;
            }
            if (y + 1 < h) {
                const float gy = image(y + 1, x) - v;
                (*grad)(y + 1, x) += k * gy;
                (*grad)(y, x) -= k * gy;
            }
        }
    }
    return objective;
}

ExternalDetector::ExternalDetector(std::string command, std::filesystem::path scratch_dir)
    : command_(std::move(command)), scratch_(std::move(scratch_dir)) {
    if (command_.empty()) throw ConfigError("external detector command is empty");
}

std::vector<SaliencyMap> ExternalDetector::detect(const std::vector<Image>& images) const {
    if (images.empty()) throw ConfigError("detector received an empty group");
    const auto in = scratch_ / "in";
    const auto out = scratch_ / "out";
    std::filesystem::remove_all(in);
    std::filesystem::remove_all(out);
    std::filesystem::create_directories(in);
    std::filesystem::create_directories(out);
    std::vector<std::string> names;
    for (std::size_t i = 0; i < images.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%04zu.pgm", i);
        names.emplace_back(buf);
        write_pgm(in / buf, images[i]);
    }
    const std::string cmd = command_ + " '" + in.string() + "' '" + out.string() + "'";
    const int status = std::system(cmd.c_str());
    if (status != 0) throw Error("external detector exited with status " + std::to_string(status));
    std::vector<SaliencyMap> maps;
    for (std::size_t i = 0; i < images.size(); ++i) {
        SaliencyMap m;
        m.prob = read_pgm(out / names[i]);
        if (!m.prob.same_shape(images[i])) throw ShapeError("external detector map " + names[i] + " has wrong size");
        maps.push_back(std::move(m));
    }
    return maps;
}

}  // namespace conpure
