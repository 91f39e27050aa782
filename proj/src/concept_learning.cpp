#include "conpure/concept_learning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "conpure/error.hpp"
#include "conpure/io.hpp"

namespace conpure {

std::string concept_prompt() { return photo_prompt(kPlaceholderToken); }

nlohmann::json ConceptEmbedding::to_json() const {
    return {{"vector", vector},
            {"source_group", source_group},
            {"steps_trained", steps_trained},
            {"final_loss", final_loss ? nlohmann::json(*final_loss) : nlohmann::json(nullptr)},
            {"losses", losses}};
}

ConceptEmbedding ConceptEmbedding::from_json(const nlohmann::json& j) {
    ConceptEmbedding c;
    c.vector = j.at("vector").get<std::vector<float>>();
    c.source_group = j.value("source_group", std::string());
    c.steps_trained = j.value("steps_trained", 0);
    if (j.contains("final_loss") && !j.at("final_loss").is_null()) c.final_loss = j.at("final_loss").get<double>();
    c.losses = j.value("losses", std::vector<double>{});
    return c;
}

nlohmann::json ConceptConfig::to_json() const {
    return {{"steps", steps}, {"learning_rate", learning_rate}, {"norm_cap_factor", norm_cap_factor}, {"seed", seed}};
}

ConceptConfig ConceptConfig::from_json(const nlohmann::json& j) {
    ConceptConfig c;
    c.steps = j.value("steps", c.steps);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.norm_cap_factor = j.value("norm_cap_factor", c.norm_cap_factor);
    c.seed = j.value("seed", c.seed);
    return c;
}

std::vector<float> concept_initialization(const ToyT2IModel& model) {
    const auto ids = model.text().class_token_ids();
    const int d = model.embedding_dim();
    std::vector<double> acc(d, 0.0);
    for (int id : ids) {
        const auto e = model.text().token_embedding(id);
        for (int k = 0; k < d; ++k) acc[k] += e[k];
    }
    std::vector<float> out(d);
    for (int k = 0; k < d; ++k) out[k] = static_cast<float>(acc[k] / static_cast<double>(ids.size()));
    return out;
}

double concept_norm_cap(const ToyT2IModel& model, double factor) {
    std::vector<double> norms;
    for (int id : model.text().class_token_ids()) {
        double s = 0.0;
        for (float v : model.text().token_embedding(id)) s += static_cast<double>(v) * v;
        norms.push_back(std::sqrt(s));
    }
    std::sort(norms.begin(), norms.end());
    const std::size_t n = norms.size();
    const double median = n % 2 ? norms[n / 2] : 0.5 * (norms[n / 2 - 1] + norms[n / 2]);
    return factor * median;
}

ConceptEmbedding learn_concept(const ToyT2IModel& model, const ImageGroup& group, const NoiseSchedule& schedule,
                               const ConceptConfig& config) {
    if (group.images.empty()) throw ConfigError("learn_concept: group " + group.name + " is empty");
    if (config.steps < 0) throw ConfigError("learn_concept: negative step count");

    ConceptEmbedding out;
    out.source_group = group.name;
    out.vector = concept_initialization(model);
    if (config.steps == 0) return out;

    const double cap = concept_norm_cap(model, config.norm_cap_factor);
    const auto ids = model.text().tokenize(concept_prompt());
    const float slot_share = static_cast<float>(
        std::count(ids.begin(), ids.end(), model.text().placeholder_id()) / static_cast<double>(ids.size()));
    const std::size_t d = static_cast<std::size_t>(model.embedding_dim());

    std::vector<Latent> latents;
    for (const auto& gi : group.images) latents.push_back(model.encode(gi.image));
    const std::size_t m = model.latent_size();

    // Gradients flow through a private copy; the caller's weights are never touched.
    ConditionalUNet unet = model.unet();
    Rng rng(mix_seed(config.seed ^ 0xc0c0c0c0ULL));
    std::vector<float> zt(m), eps(m), dout(m);

    // One bank of (image, t, noise) draws, a tenth of the budget long, is replayed in a fresh
    // order by every block. t is stratified over [1, T_max] within the bank, so every block sees
    // the same samples and block means differ only through the embedding.
    const int block = std::max(1, config.steps / 10);
    const auto shuffle = [&rng](auto& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    };
    struct Draw {
        std::size_t image;
        int t;
        std::vector<float> noise;
    };
    std::vector<Draw> bank(static_cast<std::size_t>(block));
    {
        std::vector<int> strata(bank.size());
        std::iota(strata.begin(), strata.end(), 0);
        shuffle(strata);
        std::vector<std::size_t> order(latents.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t b = 0; b < bank.size(); ++b) {
            if (b % latents.size() == 0) shuffle(order);
            const double u = (strata[b] + rng.uniform()) / block;
            bank[b].image = order[b % latents.size()];
            bank[b].t = std::clamp(1 + static_cast<int>(u * schedule.t_max()), 1, schedule.t_max());
            bank[b].noise.resize(m);
            for (auto& e : bank[b].noise) e = static_cast<float>(rng.normal());
        }
    }
    std::vector<std::size_t> visit(bank.size());
    std::iota(visit.begin(), visit.end(), std::size_t{0});

    for (int step = 0; step < config.steps; ++step) {
        const std::size_t in_block = static_cast<std::size_t>(step % block);
        if (in_block == 0) shuffle(visit);
        const Draw& draw = bank[visit[in_block]];
        const Latent& z0 = latents[draw.image];
        const int t = draw.t;
        const double sa = std::sqrt(schedule.alpha_bar(t));
        const double sb = std::sqrt(1.0 - schedule.alpha_bar(t));
        for (std::size_t k = 0; k < m; ++k) {
            eps[k] = draw.noise[k];
            zt[k] = static_cast<float>(sa * z0[k] + sb * draw.noise[k]);
        }
        const auto cond = model.text().embed(ids, &out.vector);
        UNetTape tape;
        const int ts[1] = {t};
        const auto pred = unet.forward(zt, 1, ts, cond, &tape);
        double loss = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
            const double diff = static_cast<double>(pred[k]) - eps[k];
            loss += diff * diff;
            dout[k] = static_cast<float>(2.0 * diff / static_cast<double>(m));
        }
        loss /= static_cast<double>(m);
        if (!std::isfinite(loss)) {
            throw DivergenceError("concept loss became non-finite at step " + std::to_string(step) + " for group " +
                                  group.name);
        }
        out.losses.push_back(loss);
        const auto dcond = unet.backward(dout, tape, false);
        double norm = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            out.vector[k] -= static_cast<float>(config.learning_rate) * slot_share * dcond[k];
            norm += static_cast<double>(out.vector[k]) * out.vector[k];
        }
        norm = std::sqrt(norm);
        if (norm > cap) {
            for (auto& v : out.vector) v = static_cast<float>(v * (cap / norm));
        }
    }
    out.steps_trained = config.steps;
    const std::size_t tail = std::max<std::size_t>(1, out.losses.size() / 10);
    double s = 0.0;
    for (std::size_t i = out.losses.size() - tail; i < out.losses.size(); ++i) s += out.losses[i];
    out.final_loss = s / static_cast<double>(tail);
    return out;
}

std::vector<float> concept_condition(const ToyT2IModel& model, const std::vector<float>& vector, double scale) {
    std::vector<float> scaled(vector.size());
    for (std::size_t k = 0; k < vector.size(); ++k) scaled[k] = static_cast<float>(vector[k] * scale);
    return model.embed_prompt(concept_prompt(), &scaled);
}

std::vector<Image> visualize_concept(const ToyT2IModel& model, const ConceptEmbedding& embedding,
                                     const NoiseSchedule& schedule, int n_samples, std::uint64_t seed) {
    const auto cond = concept_condition(model, embedding.vector);
    return generate(model, schedule, cond, n_samples, seed);
}

double concept_similarity(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) throw ConfigError("concept_similarity: dimension mismatch");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        ab += static_cast<double>(a[k]) * b[k];
        aa += static_cast<double>(a[k]) * a[k];
        bb += static_cast<double>(b[k]) * b[k];
    }
    if (aa == 0.0 || bb == 0.0) throw ConfigError("concept_similarity: zero-norm vector");
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

double concept_similarity(const ConceptEmbedding& a, const ConceptEmbedding& b) {
    return concept_similarity(a.vector, b.vector);
}

std::string nearest_token(const ToyT2IModel& model, const std::vector<float>& vector) {
    std::string best;
    double best_sim = -2.0;
    for (int id : model.text().class_token_ids()) {
        const auto e = model.text().token_embedding(id);
        const double s = concept_similarity(vector, std::vector<float>(e.begin(), e.end()));
        if (s > best_sim) {
            best_sim = s;
            best = model.text().vocabulary()[static_cast<std::size_t>(id)];
        }
    }
    return best;
}

void save_concepts(const std::filesystem::path& path, const std::map<std::string, ConceptEmbedding>& concepts) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, c] : concepts) j[name] = c.to_json();
    write_json(path, j);
}

std::map<std::string, ConceptEmbedding> load_concepts(const std::filesystem::path& path) {
    const auto j = read_json(path);
    std::map<std::string, ConceptEmbedding> out;
    try {
        for (const auto& [name, v] : j.items()) out[name] = ConceptEmbedding::from_json(v);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
    return out;
}

}  // namespace conpure
