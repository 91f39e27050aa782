#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "conpure/corpus.hpp"
#include "conpure/noise_schedule.hpp"
#include "conpure/t2i_model.hpp"
#include "json.hpp"

namespace conpure {

/// "a photo of S*"
std::string concept_prompt();

struct ConceptEmbedding {
    std::vector<float> vector;
    std::string source_group;
    int steps_trained = 0;
    /// Mean loss over the last 10% of steps; absent when no step was taken.
    std::optional<double> final_loss;
    std::vector<double> losses;

    nlohmann::json to_json() const;
    static ConceptEmbedding from_json(const nlohmann::json& j);
};

struct ConceptConfig {
    int steps = 500;
    double learning_rate = 200.0;
    /// Norm cap as a multiple of the median class-token norm.
    double norm_cap_factor = 3.0;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static ConceptConfig from_json(const nlohmann::json& j);
};

/// Mean of the class-token embeddings.
std::vector<float> concept_initialization(const ToyT2IModel& model);
double concept_norm_cap(const ToyT2IModel& model, double factor);

/// Textual inversion against the frozen model: plain SGD on the S* vector, one image per step,
/// t uniform on [1, T_max]. Throws DivergenceError on a non-finite loss, ConfigError on an empty group.
ConceptEmbedding learn_concept(const ToyT2IModel& model, const ImageGroup& group, const NoiseSchedule& schedule,
                               const ConceptConfig& config);

/// Condition vector for "a photo of S*" with `vector * scale` in the S* slot.
std::vector<float> concept_condition(const ToyT2IModel& model, const std::vector<float>& vector, double scale = 1.0);

/// Full reverse chain from pure noise under the concept prompt.
std::vector<Image> visualize_concept(const ToyT2IModel& model, const ConceptEmbedding& embedding,
                                     const NoiseSchedule& schedule, int n_samples, std::uint64_t seed);

/// Cosine similarity; throws ConfigError on a zero vector or mismatched sizes.
double concept_similarity(const std::vector<float>& a, const std::vector<float>& b);
double concept_similarity(const ConceptEmbedding& a, const ConceptEmbedding& b);

/// Class token with the highest cosine similarity to the vector.
std::string nearest_token(const ToyT2IModel& model, const std::vector<float>& vector);

/// JSON object keyed by group name.
void save_concepts(const std::filesystem::path& path, const std::map<std::string, ConceptEmbedding>& concepts);
std::map<std::string, ConceptEmbedding> load_concepts(const std::filesystem::path& path);

}  // namespace conpure
