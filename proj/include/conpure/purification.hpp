#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "conpure/concept_learning.hpp"
#include "conpure/corpus.hpp"
#include "conpure/image.hpp"
#include "conpure/nn.hpp"
#include "conpure/noise_schedule.hpp"
#include "conpure/t2i_model.hpp"
#include "json.hpp"

namespace conpure {

enum class CRKind { liif, bicubic };
std::string to_string(CRKind kind);
CRKind cr_kind_from_string(const std::string& s);

struct CRConfig {
    CRKind kind = CRKind::liif;
    /// Side of the input neighbourhood fed to the MLP (odd).
    int patch = 5;
    int hidden = 64;
    double learning_rate = 2e-3;
    int batch_images = 8;
    /// Query pixels drawn per training image and epoch.
    int samples_per_image = 256;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static CRConfig from_json(const nlohmann::json& j);
};

/// Continuous-representation preprocessor: resamples an image to any target resolution.
/// The liif kind is a local implicit function: for each output pixel the four surrounding
/// input pixels each contribute (their value + an MLP residual computed from their
/// neighbourhood, the relative offset and the cell size), blended with bilinear weights.
/// The bicubic kind is a fixed resampler and counts as trained.
class CRModel {
public:
    explicit CRModel(CRConfig config = {});
    const CRConfig& config() const { return config_; }
    bool trained() const { return config_.kind == CRKind::bicubic || epochs_trained_ > 0; }
    int epochs_trained() const { return epochs_trained_; }

    /// Output is clamped to [0, 1] and has exactly the requested size.
    Image apply(const Image& input, int out_height, int out_width) const;

    /// One optimizer step on a batch of (input, target) pairs; returns the MSE before the update.
    double train_step(const std::vector<std::pair<const Image*, const Image*>>& batch, Rng& rng, nn::Adam& opt);

    std::vector<nn::Param*> params();
    std::vector<const nn::Param*> params() const;
    void mark_epochs(int epochs) { epochs_trained_ += epochs; }
    std::string checksum() const;

    void save(const std::filesystem::path& path) const;
    static CRModel load(const std::filesystem::path& path);

private:
    int feature_dim() const { return config_.patch * config_.patch + 4; }

    CRConfig config_;
    int epochs_trained_ = 0;
    nn::Linear l1_, l2_, l3_;
};

/// Bicubic (Keys, a = -0.5) resampling with replicated borders; same-size resampling is exact.
Image bicubic_resize(const Image& image, int out_height, int out_width);

struct CRPair {
    Image input;
    Image target;
};

/// Targets are the images; inputs are resized to input_size and get uniform noise whose
/// amplitude is drawn per pair from [0, noise_budget].
std::vector<CRPair> make_cr_pairs(const std::vector<Image>& images, double noise_budget, int input_size,
                                  std::uint64_t seed);

struct CRTrainLog {
    std::vector<double> epoch_losses;
};

/// epochs = 0 leaves the model untrained. Throws DivergenceError on a non-finite loss.
CRTrainLog train_cr(CRModel& model, const std::vector<CRPair>& pairs, int epochs);

struct PurifyConfig {
    int depth = 250;
    bool use_cr = true;
    XiMode xi_mode = XiMode::stochastic;
    std::uint64_t seed = 0;
    /// Multiplier on the concept vector in the S* slot. 1 conditions directly.
    double concept_scale = 1.0;
    int batch_size = 16;

    void validate(const NoiseSchedule& schedule) const;
    nlohmann::json to_json() const;
    static PurifyConfig from_json(const nlohmann::json& j);
};

/// CR (optional) -> encode -> forward_closed to `depth` -> concept-conditioned posterior chain -> decode.
/// Uses config.seed for its noise; depth 0 returns decode(encode(CR(image))).
Image purify(const ToyT2IModel& model, const CRModel* cr, const Image& image, const ConceptEmbedding& embedding,
             const NoiseSchedule& schedule, const PurifyConfig& config);

/// Latent-level core of purify: latent i is noised to config.depth with seed config.seed + i
/// and run back through the chain, with z0 estimates clipped to `clip` when given. Returns the final latents.
std::vector<Latent> purify_latents(const NoisePredictor& predictor, const std::vector<Latent>& z0,
                                   const NoiseSchedule& schedule, const PurifyConfig& config,
                                   std::optional<double> clip = std::nullopt);
std::vector<Latent> purify_latents(const ToyT2IModel& model, const std::vector<Latent>& z0,
                                   const std::vector<float>& cond, const NoiseSchedule& schedule,
                                   const PurifyConfig& config);

/// Purifies every image (clean or not). Image i uses seed config.seed + i, so the result
/// equals purify() on that image alone. Names and flags are preserved.
ImageGroup purify_group(const ToyT2IModel& model, const CRModel* cr, const ImageGroup& group,
                        const ConceptEmbedding& embedding, const NoiseSchedule& schedule, const PurifyConfig& config);

}  // namespace conpure
