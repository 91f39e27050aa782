#include "conpure/cosod_metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "conpure/error.hpp"

namespace conpure {
namespace {

void require_shapes(const Image& prob, const Mask& gt, const char* what) {
    if (prob.height() != gt.height() || prob.width() != gt.width()) {
        throw ShapeError(std::string(what) + ": saliency map and ground truth differ in shape");
    }
}

std::optional<double> mean_of(const std::vector<double>& v) {
    if (v.empty()) return std::nullopt;
    std::vector<double> s = v;
    std::sort(s.begin(), s.end());  // order-independent summation
    double acc = 0.0;
    for (double x : s) acc += x;
    return acc / static_cast<double>(s.size());
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> opt_from(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
}

SplitMetrics split_of(const std::vector<const ImageScore*>& items) {
    SplitMetrics s;
    s.count = items.size();
    if (items.empty()) return s;
    std::vector<double> ious, aps, fs, maes;
    for (const auto* it : items) {
        ious.push_back(it->iou);
        aps.push_back(it->ap);
        fs.push_back(it->f_beta);
        maes.push_back(it->mae);
    }
    s.sr = success_rate(ious);
    s.ap = mean_of(aps);
    s.f_beta = mean_of(fs);
    s.mae = mean_of(maes);
    return s;
}

}  // namespace

Mask SaliencyMap::binary() const {
    Mask m(prob.height(), prob.width());
    const auto p = prob.pixels();
    auto bits = m.bits();
    for (std::size_t i = 0; i < p.size(); ++i) bits[i] = p[i] >= threshold ? 1 : 0;
    return m;
}

double iou(const Mask& a, const Mask& b) {
    if (!a.same_shape(b)) throw ShapeError("iou: mask shapes differ");
    std::size_t inter = 0;
    std::size_t uni = 0;
    const auto x = a.bits();
    const auto y = b.bits();
    for (std::size_t i = 0; i < x.size(); ++i) {
        inter += (x[i] && y[i]) ? 1 : 0;
        uni += (x[i] || y[i]) ? 1 : 0;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double success_rate(std::span<const double> ious) {
    if (ious.empty()) return 0.0;
    const auto hits = std::count_if(ious.begin(), ious.end(), [](double v) { return v > 0.5; });
    return static_cast<double>(hits) / static_cast<double>(ious.size());
}

double adaptive_threshold(const Image& prob) {
    double s = 0.0;
    for (float v : prob.pixels()) s += v;
    const double mean = prob.size() ? s / static_cast<double>(prob.size()) : 0.0;
    return std::min(2.0 * mean, 1.0);
}

double f_beta(const SaliencyMap& pred, const Mask& gt, double beta_sq) {
    require_shapes(pred.prob, gt, "f_beta");
    const double thr = adaptive_threshold(pred.prob);
    const auto p = pred.prob.pixels();
    const auto g = gt.bits();
    std::size_t tp = 0, pp = 0, gp = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool on = p[i] > 0.0f && p[i] >= thr;
        pp += on;
        gp += g[i] != 0;
        tp += on && g[i];
    }
    const double precision = pp ? static_cast<double>(tp) / pp : 0.0;
    const double recall = gp ? static_cast<double>(tp) / gp : 0.0;
    const double denom = beta_sq * precision + recall;
    if (denom <= 0.0) return 0.0;
    return (1.0 + beta_sq) * precision * recall / denom;
}

double average_precision(const SaliencyMap& pred, const Mask& gt) {
    require_shapes(pred.prob, gt, "average_precision");
    // Histogram of scores by the highest level k/255 they reach, split by label.
    std::array<std::size_t, 256> pos{}, neg{};
    const auto p = pred.prob.pixels();
    const auto g = gt.bits();
    std::size_t total_pos = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double v = std::clamp(static_cast<double>(p[i]), 0.0, 1.0);
        // Largest level reached; the slack absorbs float rounding of stored 8-bit values.
        const int k = std::clamp(static_cast<int>(std::floor(v * 255.0 + 1e-6)), 0, 255);
        if (g[i]) {
            ++pos[k];
            ++total_pos;
        } else {
            ++neg[k];
        }
    }
    if (total_pos == 0) return 0.0;
    double ap = 0.0;
    double prev_recall = 0.0;
    std::size_t tp = 0, fp = 0;
    for (int k = 255; k >= 0; --k) {
        tp += pos[k];
        fp += neg[k];
        if (tp + fp == 0) continue;
        const double recall = static_cast<double>(tp) / total_pos;
        const double precision = static_cast<double>(tp) / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return ap;
}

double mae(const SaliencyMap& pred, const Mask& gt) {
    require_shapes(pred.prob, gt, "mae");
    const auto p = pred.prob.pixels();
    const auto g = gt.bits();
    if (p.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(static_cast<double>(p[i]) - (g[i] ? 1.0 : 0.0));
    return s / static_cast<double>(p.size());
}

nlohmann::json SplitMetrics::to_json() const {
    return {{"count", count}, {"SR", opt_json(sr)}, {"AP", opt_json(ap)}, {"F_beta", opt_json(f_beta)},
            {"MAE", opt_json(mae)}};
}

SplitMetrics SplitMetrics::from_json(const nlohmann::json& j) {
    SplitMetrics s;
    s.count = j.at("count").get<std::size_t>();
    s.sr = opt_from(j, "SR");
    s.ap = opt_from(j, "AP");
    s.f_beta = opt_from(j, "F_beta");
    s.mae = opt_from(j, "MAE");
    return s;
}

std::vector<double> MetricsReport::ious() const {
    std::vector<double> v;
    for (const auto& s : images) v.push_back(s.iou);
    return v;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json imgs = nlohmann::json::array();
    for (const auto& s : images) {
        imgs.push_back({{"group", s.group},
                        {"name", s.name},
                        {"degraded", s.degraded},
                        {"IOU", s.iou},
                        {"AP", s.ap},
                        {"F_beta", s.f_beta},
                        {"MAE", s.mae}});
    }
    return {{"label", label},
            {"splits", {{"avg", avg.to_json()}, {"adv", adv.to_json()}, {"clean", clean.to_json()}}},
            {"images", imgs}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.label = j.at("label").get<std::string>();
    for (const auto& s : j.at("images")) {
        r.images.push_back({s.at("group").get<std::string>(), s.at("name").get<std::string>(),
                            s.at("degraded").get<bool>(), s.at("IOU").get<double>(), s.at("AP").get<double>(),
                            s.at("F_beta").get<double>(), s.at("MAE").get<double>()});
    }
    const auto& sp = j.at("splits");
    r.avg = SplitMetrics::from_json(sp.at("avg"));
    r.adv = SplitMetrics::from_json(sp.at("adv"));
    r.clean = SplitMetrics::from_json(sp.at("clean"));
    return r;
}

void recompute_splits(MetricsReport& report) {
    std::vector<const ImageScore*> all, adv, clean;
    for (const auto& s : report.images) {
        all.push_back(&s);
        (s.degraded ? adv : clean).push_back(&s);
    }
    report.avg = split_of(all);
    report.adv = split_of(adv);
    report.clean = split_of(clean);
}

MetricsReport evaluate(const std::vector<SaliencyMap>& maps, const ImageGroup& group) {
    if (maps.size() != group.size()) {
        throw ShapeError("evaluate: " + std::to_string(maps.size()) + " maps for " + std::to_string(group.size()) +
                         " images in group " + group.name);
    }
    MetricsReport r;
    r.label = group.name;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const auto& gi = group.images[i];
        ImageScore s;
        s.group = group.name;
        s.name = gi.name;
        s.degraded = gi.degraded;
        s.iou = iou(maps[i].binary(), gi.mask);
        s.ap = average_precision(maps[i], gi.mask);
        s.f_beta = f_beta(maps[i], gi.mask);
        s.mae = mae(maps[i], gi.mask);
        r.images.push_back(std::move(s));
    }
    recompute_splits(r);
    return r;
}

MetricsReport aggregate(const std::vector<MetricsReport>& reports, const std::string& label) {
    MetricsReport r;
    r.label = label;
    for (const auto& rep : reports) r.images.insert(r.images.end(), rep.images.begin(), rep.images.end());
    recompute_splits(r);
    return r;
}

}  // namespace conpure
