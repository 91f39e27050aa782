#include <cmath>
#include <filesystem>
#include <vector>

#include "conpure/corpus.hpp"
#include "conpure/error.hpp"
#include "conpure/purification.hpp"
#include "conpure/random.hpp"
#include "doctest.h"

using namespace conpure;
namespace fs = std::filesystem;

namespace {

ToyT2IModel small_model() {
    T2IConfig c;
    c.base_channels = 4;
    c.mid_channels = 8;
    c.embedding_dim = 8;
    c.seed = 5;
    return ToyT2IModel(c);
}

NoiseSchedule schedule() { return NoiseSchedule::make(1000, 1e-4, 0.02, BetaShape::linear); }

ConceptEmbedding centroid(const ToyT2IModel& model) {
    ConceptEmbedding c;
    c.vector = concept_initialization(model);
    return c;
}

PurifyConfig config(int depth, bool use_cr = false) {
    PurifyConfig p;
    p.depth = depth;
    p.use_cr = use_cr;
    p.seed = 13;
    return p;
}

CRModel bicubic() {
    CRConfig c;
    c.kind = CRKind::bicubic;
    return CRModel(c);
}

}  // namespace

TEST_CASE("purify config validation") {
    const auto sched = schedule();
    CHECK_NOTHROW(config(0).validate(sched));
    CHECK_NOTHROW(config(1000).validate(sched));
    CHECK_THROWS_AS(config(1001).validate(sched), ConfigError);
    CHECK_THROWS_AS(config(-1).validate(sched), ConfigError);
    auto p = config(10);
    p.batch_size = 0;
    CHECK_THROWS_AS(p.validate(sched), ConfigError);
    p = config(250, true);
    p.xi_mode = XiMode::zero;
    p.concept_scale = 0.5;
    const auto back = PurifyConfig::from_json(p.to_json());
    CHECK(back.to_json() == p.to_json());
}

TEST_CASE("depth zero is a plain round trip through the autoencoder") {
    const auto model = small_model();
    const auto img = generate_corpus(1, 1, 1, 0.0).groups[0].images[0].image;
    CHECK(purify(model, nullptr, img, centroid(model), schedule(), config(0)) == model.decode(model.encode(img)));
    const auto cr = bicubic();
    CHECK(purify(model, &cr, img, centroid(model), schedule(), config(0, true)) ==
          model.decode(model.encode(cr.apply(img, 48, 48))));
}

TEST_CASE("an exact-noise oracle denoiser returns the clean latent after the full chain") {
    const auto sched = schedule();
    Rng rng(30);
    std::vector<Latent> z0(3, Latent({1, 6, 6}));
    for (auto& z : z0) {
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = rng.uniform(-1.0, 1.0);
    }
    for (int depth : {1, 250, 500, 1000}) {
        // The predictor is told the batch in order, so it can invert the forward map exactly.
        const NoisePredictor oracle = [&](const std::vector<Latent>& z, std::span<const int> t) {
            std::vector<Latent> eps;
            for (std::size_t k = 0; k < z.size(); ++k) {
                const double ab = sched.alpha_bar(t[k]);
                Latent e(z[k].shape());
                for (std::size_t i = 0; i < e.size(); ++i) e[i] = (z[k][i] - std::sqrt(ab) * z0[k][i]) / std::sqrt(1.0 - ab);
                eps.push_back(std::move(e));
            }
            return eps;
        };
        auto cfg = config(depth);
        cfg.xi_mode = XiMode::zero;
        const auto out = purify_latents(oracle, z0, sched, cfg);
        REQUIRE(out.size() == 3);
        for (std::size_t k = 0; k < 3; ++k) {
            for (std::size_t i = 0; i < out[k].size(); ++i) CHECK(std::abs(out[k][i] - z0[k][i]) < 1e-6);
        }
    }
}

TEST_CASE("an untrained continuous-representation module is rejected") {
    const auto model = small_model();
    const auto img = generate_corpus(1, 1, 1, 0.0).groups[0].images[0].image;
    const CRModel untrained;
    CHECK_FALSE(untrained.trained());
    CHECK_THROWS_AS(purify(model, &untrained, img, centroid(model), schedule(), config(10, true)), ConfigError);
    CHECK_THROWS_AS(purify(model, nullptr, img, centroid(model), schedule(), config(10, true)), ConfigError);
    CHECK(bicubic().trained());
}

TEST_CASE("bicubic resampling") {
    const auto img = generate_corpus(2, 1, 1, 0.0).groups[0].images[0].image;
    CHECK(bicubic_resize(img, 48, 48) == img);
    const auto small = bicubic_resize(img, 32, 32);
    CHECK(small.height() == 32);
    CHECK(small.width() == 32);
    const Image flat(10, 10, 0.4f);
    const auto up = bicubic_resize(flat, 23, 17);
    for (float v : up.pixels()) CHECK(v == doctest::Approx(0.4f).epsilon(1e-6));
    CHECK_THROWS_AS(bicubic_resize(img, 0, 5), ShapeError);
}

TEST_CASE("cr training pairs respect the noise budget") {
    const auto images = generate_corpus(3, 2, 3, 0.0).groups[0].pixels();
    const double budget = 16.0 / 255.0;
    const auto pairs = make_cr_pairs(images, budget, 48, 4);
    REQUIRE(pairs.size() == images.size());
    for (const auto& p : pairs) {
        REQUIRE(p.input.same_shape(p.target));
        for (std::size_t i = 0; i < p.input.size(); ++i) {
            CHECK_FALSE(std::abs(p.input.pixels()[i] - p.target.pixels()[i]) > budget + 1e-6);
        }
    }
    const auto resized = make_cr_pairs(images, budget, 32, 4);
    CHECK(resized[0].input.height() == 32);
    CHECK(resized[0].target.height() == 48);
}

TEST_CASE("cr training, application and persistence") {
    const auto corpus = generate_corpus(4, 2, 4, 0.0);
    std::vector<Image> images;
    for (const auto& g : corpus.groups) {
        for (const auto& gi : g.images) images.push_back(gi.image);
    }
    CRConfig cfg;
    cfg.hidden = 16;
    cfg.samples_per_image = 64;
    CRModel cr(cfg);
    const auto pairs = make_cr_pairs(images, 16.0 / 255.0, 32, 5);
    CHECK_THROWS_AS(train_cr(cr, pairs, -1), ConfigError);
    CHECK(train_cr(cr, pairs, 0).epoch_losses.empty());
    CHECK_FALSE(cr.trained());
    const auto log = train_cr(cr, pairs, 4);
    REQUIRE(log.epoch_losses.size() == 4);
    CHECK(log.epoch_losses.back() < log.epoch_losses.front());
    CHECK(cr.trained());
    CHECK(cr.epochs_trained() == 4);

    const auto out = cr.apply(pairs[0].input, 48, 40);
    CHECK(out.height() == 48);
    CHECK(out.width() == 40);
    for (float v : out.pixels()) CHECK_FALSE((v < 0.0f || v > 1.0f));

    const auto path = fs::temp_directory_path() / "conpure_test_cr.ckpt";
    cr.save(path);
    const auto back = CRModel::load(path);
    CHECK(back.checksum() == cr.checksum());
    CHECK(back.epochs_trained() == 4);
    CHECK(back.apply(pairs[0].input, 48, 48) == cr.apply(pairs[0].input, 48, 48));
    fs::remove(path);
}

TEST_CASE("purify_group preserves metadata and matches per-image purification") {
    const auto model = small_model();
    const auto sched = schedule();
    const auto group = generate_corpus(6, 1, 4, 0.5).groups[0];
    const auto cr = bicubic();
    auto cfg = config(40, true);
    const auto out = purify_group(model, &cr, group, centroid(model), sched, cfg);
    REQUIRE(out.size() == group.size());
    CHECK(out.name == group.name);
    CHECK(out.class_id == group.class_id);
    for (std::size_t i = 0; i < group.size(); ++i) {
        CHECK(out.images[i].name == group.images[i].name);
        CHECK(out.images[i].degraded == group.images[i].degraded);
        CHECK(out.images[i].mask == group.images[i].mask);
        CHECK(out.images[i].image.same_shape(group.images[i].image));
        for (float v : out.images[i].image.pixels()) CHECK_FALSE((v < 0.0f || v > 1.0f));
    }
    const auto again = purify_group(model, &cr, group, centroid(model), sched, cfg);
    for (std::size_t i = 0; i < group.size(); ++i) CHECK(again.images[i].image == out.images[i].image);

    // Image i uses seed + i.
    auto single = cfg;
    single.seed = cfg.seed + 2;
    CHECK(purify(model, &cr, group.images[2].image, centroid(model), sched, single) == out.images[2].image);

    cfg.batch_size = 1;
    const auto unbatched = purify_group(model, &cr, group, centroid(model), sched, cfg);
    for (std::size_t i = 0; i < group.size(); ++i) CHECK(unbatched.images[i].image == out.images[i].image);

    auto other = config(40, true);
    other.seed = 99;
    CHECK(purify_group(model, &cr, group, centroid(model), sched, other).images[0].image != out.images[0].image);
}

TEST_CASE("purification rejects a concept of the wrong size") {
    const auto model = small_model();
    const auto img = generate_corpus(1, 1, 1, 0.0).groups[0].images[0].image;
    ConceptEmbedding bad;
    bad.vector = {1.0f, 2.0f};
    CHECK_THROWS(purify(model, nullptr, img, bad, schedule(), config(10)));
}
