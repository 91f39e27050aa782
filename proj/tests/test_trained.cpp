// Post-training checks on the models the acceptance run trains and caches. Runs after
// `acceptance`, reusing its workdir; nothing is retrained when the cache is warm.

#include <cmath>

#include "conpure/detector.hpp"
#include "conpure/experiment.hpp"
#include "conpure/io.hpp"
#include "conpure/random.hpp"
#include "doctest.h"

using namespace conpure;

namespace {

const std::filesystem::path kWork = CONPURE_ACCEPTANCE_WORK;

Pipeline& pipeline() {
    static Pipeline p(ExperimentConfig{}, kWork);
    return p;
}

double oracle_psnr(const Image& a, const Image& b) {
    double se = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.pixels()[i]) - b.pixels()[i];
        se += d * d;
    }
    return 10.0 * std::log10(1.0 / (se / static_cast<double>(a.size())));
}

MetricsReport run_report(const std::string& name) {
    return reports_from_json(read_json(kWork / "runs" / name / "report.json")).at(0);
}

}  // namespace

TEST_CASE("class tokens do not collide") {
    const auto& text = pipeline().model().text();
    const auto ids = text.class_token_ids();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t j = i + 1; j < ids.size(); ++j) {
            const auto a = text.token_embedding(ids[i]);
            const auto b = text.token_embedding(ids[j]);
            double ab = 0, aa = 0, bb = 0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                ab += a[k] * b[k];
                aa += a[k] * a[k];
                bb += b[k] * b[k];
            }
            CHECK(ab / std::sqrt(aa * bb) < 0.99);
        }
    }
}

TEST_CASE("class-conditional samples are recognized by the template classifier") {
    const auto& model = pipeline().model();
    const TemplateDetector classifier;
    const int per_class = 6;
    int correct = 0, total = 0;
    for (std::size_t c = 0; c < shape_classes().size(); ++c) {
        const auto cond = model.embed_prompt(photo_prompt(shape_classes()[c]));
        const auto samples = generate(model, pipeline().schedule(), cond, per_class, 500 + c);
        for (const auto& s : samples) {
            correct += classifier.classify(s) == static_cast<int>(c);
            ++total;
        }
    }
    const double accuracy = static_cast<double>(correct) / total;
    MESSAGE("sample accuracy " << correct << "/" << total);
    CHECK(accuracy >= 0.8);
}

TEST_CASE("trained CR is near-identity on clean images and denoises bounded noise") {
    const auto& cr = pipeline().cr();
    const auto& corpus = pipeline().corpus();
    Rng rng(77);
    const double budget = 16.0 / 255.0;
    double clean_psnr = 0.0, noisy_psnr = 0.0, restored_psnr = 0.0;
    int n = 0;
    for (const auto& g : corpus.groups) {
        const Image& x = g.images.front().image;
        const Image y = cr.apply(x, x.height(), x.width());
        clean_psnr += oracle_psnr(y, x);
        Image noisy = x;
        for (auto& v : noisy.pixels()) v = static_cast<float>(std::clamp(v + rng.uniform(-budget, budget), 0.0, 1.0));
        noisy_psnr += oracle_psnr(noisy, x);
        restored_psnr += oracle_psnr(cr.apply(noisy, x.height(), x.width()), x);
        ++n;
    }
    MESSAGE("CR clean " << clean_psnr / n << " dB, noisy " << noisy_psnr / n << " dB, restored "
                        << restored_psnr / n << " dB");
    CHECK(clean_psnr / n >= 28.0);
    CHECK(restored_psnr / n > noisy_psnr / n);
}

TEST_CASE("purification costs at most 15 points of clean-split SR") {
    const auto source = run_report("adv_source_only");
    const auto purified = run_report("adv_learned_concept");
    REQUIRE(source.clean.sr);
    REQUIRE(purified.clean.sr);
    CHECK(*source.clean.sr - *purified.clean.sr <= 0.15);
}
