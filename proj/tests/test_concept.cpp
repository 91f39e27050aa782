#include <cmath>
#include <filesystem>
#include <vector>

#include "conpure/concept_learning.hpp"
#include "conpure/corpus.hpp"
#include "conpure/error.hpp"
#include "conpure/noise_schedule.hpp"
#include "conpure/t2i_model.hpp"
#include "doctest.h"

using namespace conpure;
namespace fs = std::filesystem;

namespace {

ToyT2IModel small_model() {
    T2IConfig c;
    c.base_channels = 4;
    c.mid_channels = 8;
    c.embedding_dim = 8;
    c.seed = 4;
    return ToyT2IModel(c);
}

NoiseSchedule schedule() { return NoiseSchedule::make(1000, 1e-4, 0.02, BetaShape::linear); }

ConceptConfig quick(int steps, double lr = 5.0) {
    ConceptConfig c;
    c.steps = steps;
    c.learning_rate = lr;
    c.seed = 2;
    return c;
}

double norm(const std::vector<float>& v) {
    double s = 0.0;
    for (float x : v) s += static_cast<double>(x) * x;
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("initialization is the class-token centroid") {
    const auto model = small_model();
    const auto init = concept_initialization(model);
    const auto ids = model.text().class_token_ids();
    for (std::size_t d = 0; d < init.size(); ++d) {
        double s = 0.0;
        for (int id : ids) s += model.text().token_embedding(id)[d];
        CHECK(init[d] == doctest::Approx(s / ids.size()).epsilon(1e-6));
    }
    CHECK(concept_prompt() == "a photo of S*");
}

TEST_CASE("zero steps return the initialization") {
    const auto model = small_model();
    const auto group = generate_corpus(1, 1, 3, 0.0).groups[0];
    const auto c = learn_concept(model, group, schedule(), quick(0));
    CHECK(c.vector == concept_initialization(model));
    CHECK(c.steps_trained == 0);
    CHECK_FALSE(c.final_loss.has_value());
    CHECK(c.losses.empty());
    CHECK(c.source_group == group.name);
}

TEST_CASE("a denoiser without a conditioning path leaves the concept at its initialization") {
    auto model = small_model();
    for (auto* p : model.unet().params()) {
        if (p->name.rfind("cond_proj", 0) == 0) std::fill(p->value.begin(), p->value.end(), 0.0f);
    }
    const auto group = generate_corpus(1, 1, 3, 0.0).groups[0];
    const auto c = learn_concept(model, group, schedule(), quick(40, 50.0));
    CHECK(c.vector == concept_initialization(model));
    CHECK(c.losses.size() == 40);
    CHECK(c.final_loss.has_value());
}

TEST_CASE("learning keeps the model frozen and is deterministic") {
    const auto model = small_model();
    const auto before = model.checksum();
    const auto group = generate_corpus(2, 1, 4, 0.5).groups[0];
    const auto a = learn_concept(model, group, schedule(), quick(30));
    CHECK(model.checksum() == before);
    const auto b = learn_concept(model, group, schedule(), quick(30));
    CHECK(a.vector == b.vector);
    CHECK(a.losses == b.losses);
    CHECK(a.vector != concept_initialization(model));
    CHECK(a.steps_trained == 30);
    for (double l : a.losses) CHECK(std::isfinite(l));

    auto other = quick(30);
    other.seed = 3;
    CHECK(learn_concept(model, group, schedule(), other).vector != a.vector);
}

TEST_CASE("the norm cap holds even with a huge step size") {
    const auto model = small_model();
    const auto group = generate_corpus(3, 1, 3, 0.0).groups[0];
    auto cfg = quick(20, 1e6);
    const auto c = learn_concept(model, group, schedule(), cfg);
    CHECK(norm(c.vector) <= concept_norm_cap(model, cfg.norm_cap_factor) * (1.0 + 1e-5));
}

TEST_CASE("concept learning rejects bad input") {
    const auto model = small_model();
    CHECK_THROWS_AS(learn_concept(model, ImageGroup{}, schedule(), quick(5)), ConfigError);
    auto group = generate_corpus(3, 1, 3, 0.0).groups[0];
    group.images[1].image = Image(32, 32);
    CHECK_THROWS(learn_concept(model, group, schedule(), quick(5)));
}

TEST_CASE("cosine similarity") {
    const std::vector<float> a{1.0f, 2.0f, -3.0f};
    CHECK(concept_similarity(a, a) == doctest::Approx(1.0));
    const std::vector<float> e1{1.0f, 0.0f, 0.0f}, e2{0.0f, 1.0f, 0.0f};
    CHECK(concept_similarity(e1, e2) == 0.0);
    const std::vector<float> neg{-1.0f, -2.0f, 3.0f};
    CHECK(concept_similarity(a, neg) == doctest::Approx(-1.0));
    CHECK_THROWS_AS(concept_similarity(a, std::vector<float>(3, 0.0f)), ConfigError);
    CHECK_THROWS_AS(concept_similarity(a, std::vector<float>{1.0f}), ConfigError);
}

TEST_CASE("nearest token of a class embedding is the class") {
    const auto model = small_model();
    for (const auto& name : shape_classes()) {
        const auto e = model.text().token_embedding(model.text().token_id(name));
        CHECK(nearest_token(model, std::vector<float>(e.begin(), e.end())) == name);
    }
}

TEST_CASE("concept condition substitutes the scaled vector") {
    const auto model = small_model();
    const auto e = model.text().token_embedding(model.text().token_id("ell"));
    const std::vector<float> v(e.begin(), e.end());
    CHECK(concept_condition(model, v) == model.embed_prompt(photo_prompt("ell")));
    std::vector<float> doubled = v;
    for (auto& x : doubled) x *= 2.0f;
    CHECK(concept_condition(model, v, 2.0) == concept_condition(model, doubled));
}

TEST_CASE("concept persistence") {
    const auto model = small_model();
    const auto group = generate_corpus(5, 1, 3, 0.0).groups[0];
    const auto c = learn_concept(model, group, schedule(), quick(10));
    const auto back = ConceptEmbedding::from_json(c.to_json());
    CHECK(back.vector == c.vector);
    CHECK(back.losses == c.losses);
    CHECK(back.final_loss == c.final_loss);
    CHECK(back.steps_trained == c.steps_trained);

    const auto dir = fs::temp_directory_path() / "conpure_test_concepts";
    fs::create_directories(dir);
    save_concepts(dir / "c.json", {{group.name, c}});
    const auto loaded = load_concepts(dir / "c.json");
    REQUIRE(loaded.count(group.name) == 1);
    CHECK(loaded.at(group.name).vector == c.vector);
    fs::remove_all(dir);
}

TEST_CASE("concept visualization is deterministic") {
    const auto model = small_model();
    const auto sched = NoiseSchedule::make(20, 1e-3, 0.2, BetaShape::linear);
    ConceptEmbedding c;
    c.vector = concept_initialization(model);
    const auto a = visualize_concept(model, c, sched, 2, 9);
    const auto b = visualize_concept(model, c, sched, 2, 9);
    REQUIRE(a.size() == 2);
    CHECK(a[0] == b[0]);
    CHECK(a[1] == b[1]);
}
