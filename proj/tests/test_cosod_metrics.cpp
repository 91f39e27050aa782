#include <algorithm>
#include <bit>
#include <cmath>
#include <set>
#include <vector>

#include "conpure/corpus.hpp"
#include "conpure/cosod_metrics.hpp"
#include "conpure/detector.hpp"
#include "conpure/error.hpp"
#include "conpure/random.hpp"
#include "doctest.h"

using namespace conpure;

namespace {

Mask mask_from_bits(int h, int w, unsigned bits) {
    Mask m(h, w);
    for (int i = 0; i < h * w; ++i) m.set(i / w, i % w, (bits >> i) & 1u);
    return m;
}

SaliencyMap map_from(const Image& prob) { return SaliencyMap{prob, 0.5}; }

Image image_from_mask(const Mask& m) { return mask_to_image(m); }

// AP by sweeping every distinct score as a threshold (prob >= s), highest first.
double brute_force_ap(const Image& prob, const Mask& gt) {
    std::set<float, std::greater<>> levels(prob.pixels().begin(), prob.pixels().end());
    const double positives = static_cast<double>(gt.count());
    if (positives == 0) return 0.0;
    double ap = 0.0, prev_recall = 0.0;
    for (float s : levels) {
        double tp = 0, selected = 0;
        for (int y = 0; y < prob.height(); ++y) {
            for (int x = 0; x < prob.width(); ++x) {
                if (prob(y, x) >= s) {
                    ++selected;
                    if (gt(y, x)) ++tp;
                }
            }
        }
        const double recall = tp / positives;
        ap += (recall - prev_recall) * (tp / selected);
        prev_recall = recall;
    }
    return ap;
}

GroupImage group_image(const std::string& name, const Mask& mask, bool degraded) {
    return GroupImage{name, image_from_mask(mask), mask, degraded};
}

Image disk_image(double cx, double cy, double size, Mask* mask = nullptr) {
    const Mask m = render_shape(class_id("disk"), cx, cy, size, 48, 48);
    Image img(48, 48, 0.3f);
    for (int y = 0; y < 48; ++y) {
        for (int x = 0; x < 48; ++x) {
            if (m(y, x)) img(y, x) = 0.8f;
        }
    }
    if (mask) *mask = m;
    return img;
}

}  // namespace

TEST_CASE("iou matches set arithmetic on every 2x2 mask pair") {
    for (unsigned a = 0; a < 16; ++a) {
        for (unsigned b = 0; b < 16; ++b) {
            const int inter = std::popcount(a & b);
            const int uni = std::popcount(a | b);
            const double want = uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
            CHECK(iou(mask_from_bits(2, 2, a), mask_from_bits(2, 2, b)) == want);
        }
    }
    CHECK_THROWS_AS(iou(Mask(2, 2), Mask(2, 3)), ShapeError);
}

TEST_CASE("success rate uses a strict threshold") {
    const std::vector<double> mixed{0.6, 0.6, 0.4, 0.4};
    CHECK(success_rate(mixed) == 0.5);
    const std::vector<double> edge{0.5};
    CHECK(success_rate(edge) == 0.0);
    const std::vector<double> ones{1.0, 1.0, 1.0};
    CHECK(success_rate(ones) == 1.0);
    CHECK(success_rate(std::vector<double>{}) == 0.0);
}

TEST_CASE("success rate is monotone in each iou") {
    Rng rng(10);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> v(6);
        for (auto& x : v) x = rng.uniform();
        const double before = success_rate(v);
        v[static_cast<std::size_t>(rng.uniform_int(0, 5))] += rng.uniform(0.0, 0.5);
        CHECK(success_rate(v) >= before);
    }
}

TEST_CASE("f_beta hand-computed cases") {
    // 4 positives, prediction covers them plus 4 negatives: P = 0.5, R = 1.
    const Mask gt = mask_from_bits(4, 4, 0x000Fu);
    const Mask pred_bits = mask_from_bits(4, 4, 0x00FFu);
    const double got = f_beta(map_from(image_from_mask(pred_bits)), gt);
    CHECK(std::abs(got - 1.3 * 0.5 / (0.3 * 0.5 + 1.0)) < 1e-9);
    CHECK(std::abs(got - 0.5652173913043478) < 1e-9);

    CHECK(f_beta(map_from(image_from_mask(gt)), gt) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(f_beta(map_from(Image(4, 4, 0.0f)), gt) == 0.0);
}

TEST_CASE("adaptive threshold is twice the mean, clamped") {
    CHECK(adaptive_threshold(Image(3, 3, 0.2f)) == doctest::Approx(0.4));
    CHECK(adaptive_threshold(Image(3, 3, 0.7f)) == 1.0);
}

TEST_CASE("average precision equals a brute-force threshold sweep on random 4x4 maps") {
    Rng rng(11);
    int checked = 0;
    for (int trial = 0; trial < 2000; ++trial) {
        Image prob(4, 4);
        for (auto& v : prob.pixels()) v = static_cast<float>(rng.uniform_int(0, 255) / 255.0);
        // Coarse levels produce ties, which exercise the grouping of equal scores.
        if (trial % 2) {
            for (auto& v : prob.pixels()) v = static_cast<float>(std::round(v * 4.0f) / 4.0f);
        }
        const Mask gt = mask_from_bits(4, 4, static_cast<unsigned>(rng.uniform_int(0, 0xFFFF)));
        if (gt.count() == 0) continue;
        CHECK(std::abs(average_precision(map_from(prob), gt) - brute_force_ap(prob, gt)) < 1e-9);
        ++checked;
    }
    CHECK(checked > 1900);
}

TEST_CASE("average precision special cases") {
    const Mask gt = mask_from_bits(4, 4, 0x0F0Fu);
    CHECK(average_precision(map_from(image_from_mask(gt)), gt) == doctest::Approx(1.0).epsilon(1e-12));
    // Constant scores: a single operating point at full recall, precision = prevalence.
    CHECK(average_precision(map_from(Image(4, 4, 0.5f)), gt) == doctest::Approx(0.5).epsilon(1e-12));
    const Mask sparse = mask_from_bits(4, 4, 0x0001u);
    CHECK(average_precision(map_from(Image(4, 4, 0.5f)), sparse) == doctest::Approx(1.0 / 16).epsilon(1e-12));
    CHECK(average_precision(map_from(Image(4, 4, 0.5f)), Mask(4, 4)) == 0.0);
}

TEST_CASE("mae cases") {
    const Mask gt = mask_from_bits(4, 4, 0x1234u);
    CHECK(mae(map_from(image_from_mask(gt)), gt) == 0.0);
    Image inverse = image_from_mask(gt);
    for (auto& v : inverse.pixels()) v = 1.0f - v;
    CHECK(mae(map_from(inverse), gt) == 1.0);
    CHECK(mae(map_from(Image(4, 4, 0.5f)), gt) == 0.5);
}

TEST_CASE("evaluate: perfect maps and split bookkeeping") {
    ImageGroup g;
    g.name = "g";
    std::vector<SaliencyMap> maps;
    for (int i = 0; i < 6; ++i) {
        const Mask m = mask_from_bits(4, 4, 0x0033u << i);
        g.images.push_back(group_image("i" + std::to_string(i), m, i < 3));
        maps.push_back(map_from(image_from_mask(m)));
    }
    const auto r = evaluate(maps, g);
    for (const auto* s : {&r.avg, &r.adv, &r.clean}) {
        CHECK(*s->sr == 1.0);
        CHECK(*s->ap == doctest::Approx(1.0));
        CHECK(*s->f_beta == doctest::Approx(1.0));
        CHECK(*s->mae == 0.0);
    }
    CHECK(r.avg.count == 6);
    CHECK(r.adv.count == 3);
    CHECK(r.clean.count == 3);

    for (auto& gi : g.images) gi.degraded = false;
    const auto clean_only = evaluate(maps, g);
    CHECK(clean_only.adv.count == 0);
    CHECK_FALSE(clean_only.adv.sr.has_value());
    CHECK_FALSE(clean_only.adv.mae.has_value());
    CHECK(clean_only.to_json()["splits"]["adv"]["SR"].is_null());

    maps.pop_back();
    CHECK_THROWS(evaluate(maps, g));
}

TEST_CASE("evaluate: splits recombine and ignore image order") {
    Rng rng(12);
    ImageGroup g;
    g.name = "g";
    std::vector<SaliencyMap> maps;
    for (int i = 0; i < 7; ++i) {
        const Mask m = mask_from_bits(4, 4, static_cast<unsigned>(rng.uniform_int(1, 0xFFFF)));
        g.images.push_back(group_image("i" + std::to_string(i), m, i < 4));
        Image prob(4, 4);
        for (auto& v : prob.pixels()) v = static_cast<float>(rng.uniform_int(0, 255) / 255.0);
        maps.push_back(map_from(prob));
    }
    const auto r = evaluate(maps, g);
    CHECK(r.adv.count + r.clean.count == r.avg.count);
    const double n = static_cast<double>(r.avg.count);
    CHECK(*r.avg.sr == doctest::Approx((r.adv.count * *r.adv.sr + r.clean.count * *r.clean.sr) / n));
    CHECK(*r.avg.mae == doctest::Approx((r.adv.count * *r.adv.mae + r.clean.count * *r.clean.mae) / n));

    ImageGroup shuffled = g;
    std::vector<SaliencyMap> shuffled_maps = maps;
    std::reverse(shuffled.images.begin(), shuffled.images.end());
    std::reverse(shuffled_maps.begin(), shuffled_maps.end());
    const auto r2 = evaluate(shuffled_maps, shuffled);
    for (auto [a, b] : {std::pair{&r.avg, &r2.avg}, {&r.adv, &r2.adv}, {&r.clean, &r2.clean}}) {
        CHECK(*a->sr == doctest::Approx(*b->sr));
        CHECK(*a->ap == doctest::Approx(*b->ap));
        CHECK(*a->f_beta == doctest::Approx(*b->f_beta));
        CHECK(*a->mae == doctest::Approx(*b->mae));
    }
}

TEST_CASE("report json round trip and aggregation") {
    ImageGroup g;
    g.name = "g";
    std::vector<SaliencyMap> maps;
    for (int i = 0; i < 4; ++i) {
        const Mask m = mask_from_bits(4, 4, 0x0F0Fu);
        g.images.push_back(group_image("i" + std::to_string(i), m, i < 2));
        maps.push_back(map_from(i % 2 ? image_from_mask(m) : Image(4, 4, 0.2f)));
    }
    auto r = evaluate(maps, g);
    r.label = "x";
    const auto back = MetricsReport::from_json(r.to_json());
    CHECK(back.to_json() == r.to_json());

    const auto agg = aggregate({r, r});
    CHECK(agg.avg.count == 8);
    CHECK(*agg.avg.sr == doctest::Approx(*r.avg.sr));
    CHECK(aggregate({}).avg.count == 0);
}

TEST_CASE("template detector finds identical disks") {
    TemplateDetector det;
    Mask gt;
    const Image img = disk_image(24, 24, 18, &gt);
    const std::vector<Image> group(4, img);
    const auto maps = det.detect(group);
    REQUIRE(maps.size() == 4);
    for (const auto& m : maps) {
        CHECK(iou(m.binary(), gt) >= 0.9);
        CHECK(m.prob.same_shape(img));
        for (float v : m.prob.pixels()) CHECK_FALSE((v < 0.0f || v > 1.0f));
    }
    const auto single = det.detect({img});
    REQUIRE(single.size() == 1);
    CHECK(iou(single[0].binary(), gt) >= 0.9);
    CHECK(det.classify(img) == class_id("disk"));
}

TEST_CASE("template detector is deterministic and order-equivariant") {
    TemplateDetector det;
    const auto corpus = generate_corpus(5, 3, 5, 0.0);
    for (const auto& g : corpus.groups) {
        auto images = g.pixels();
        const auto a = det.detect(images);
        const auto b = det.detect(images);
        std::vector<Image> reversed(images.rbegin(), images.rend());
        const auto c = det.detect(reversed);
        for (std::size_t i = 0; i < images.size(); ++i) {
            CHECK(a[i].prob == b[i].prob);
            CHECK(a[i].prob == c[images.size() - 1 - i].prob);
        }
    }
}

TEST_CASE("detect_group validates the group") {
    TemplateDetector det;
    ImageGroup empty;
    CHECK_THROWS(detect_group(det, empty));
    ImageGroup mixed;
    mixed.images.push_back(GroupImage{"a", Image(48, 48), Mask(48, 48), false});
    mixed.images.push_back(GroupImage{"b", Image(32, 32), Mask(32, 32), false});
    CHECK_THROWS_AS(detect_group(det, mixed), ShapeError);
}
