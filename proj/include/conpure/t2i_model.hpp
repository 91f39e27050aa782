#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "conpure/corpus.hpp"
#include "conpure/image.hpp"
#include "conpure/nn.hpp"
#include "conpure/noise_schedule.hpp"
#include "conpure/random.hpp"
#include "conpure/tensor.hpp"
#include "conpure/unet.hpp"
#include "json.hpp"

namespace conpure {

inline constexpr const char* kPlaceholderToken = "S*";

/// "a photo of <word>"
std::string photo_prompt(const std::string& word);

/// Token table plus mean pooling. The vocabulary is "a", "photo", "of", one token per
/// shape class and the placeholder S*, whose row is never read.
class TextEncoder {
public:
    TextEncoder() = default;
    TextEncoder(int dim, std::uint64_t seed);

    int dim() const { return dim_; }
    const std::vector<std::string>& vocabulary() const { return vocab_; }
    int token_id(const std::string& token) const;
    int placeholder_id() const { return static_cast<int>(vocab_.size()) - 1; }
    std::vector<int> class_token_ids() const;

    /// Whitespace tokenization; throws ConfigError on out-of-vocabulary words.
    std::vector<int> tokenize(std::string_view prompt) const;
    std::span<const float> token_embedding(int id) const;

    /// Mean of the token embeddings; the S* slot reads `override`. Throws ConfigError
    /// if S* is present without an override or the override has the wrong size.
    std::vector<float> embed(std::span<const int> ids, const std::vector<float>* override = nullptr) const;

    /// Adds dL/d(table) for a pooled-embedding gradient; the S* slot receives nothing.
    void accumulate_grad(std::span<const int> ids, std::span<const float> dpooled);

    nn::Param& table() { return table_; }
    const nn::Param& table() const { return table_; }

private:
    int dim_ = 0;
    std::vector<std::string> vocab_;
    nn::Param table_;
};

enum class AutoencoderKind { identity, downsample2 };
std::string to_string(AutoencoderKind kind);
AutoencoderKind autoencoder_kind_from_string(const std::string& s);

/// Image <-> latent map. identity: z = 2x - 1 on a [1, S, S] latent (exact round trip).
/// downsample2: 2x2 pixel folding plus residual convolutions on a [4, S/2, S/2] latent.
class Autoencoder {
public:
    Autoencoder() = default;
    Autoencoder(AutoencoderKind kind, int image_size, std::uint64_t seed);

    AutoencoderKind kind() const { return kind_; }
    int image_size() const { return image_size_; }
    std::vector<int> latent_shape() const;

    Latent encode(const Image& image) const;
    /// Output is clamped to [0, 1].
    Image decode(const Latent& z) const;

    std::vector<nn::Param*> params();
    std::vector<const nn::Param*> params() const;

    /// Mean squared reconstruction error over the batch; trains when `optimizer` is given.
    double train_step(const std::vector<const Image*>& batch, nn::Adam* optimizer);

private:
    AutoencoderKind kind_ = AutoencoderKind::identity;
    int image_size_ = 0;
    nn::Conv2d enc1_, enc2_, dec1_, dec2_;
};

struct T2IConfig {
    int image_size = 48;
    AutoencoderKind autoencoder = AutoencoderKind::identity;
    int embedding_dim = 16;
    int base_channels = 32;
    int mid_channels = 64;
    std::uint64_t seed = 0;

    UNetConfig unet_config() const;
    nlohmann::json to_json() const;
    static T2IConfig from_json(const nlohmann::json& j);
};

class ToyT2IModel {
public:
    explicit ToyT2IModel(T2IConfig config = {});

    const T2IConfig& config() const { return config_; }
    const TextEncoder& text() const { return text_; }
    TextEncoder& text() { return text_; }
    const Autoencoder& autoencoder() const { return ae_; }
    Autoencoder& autoencoder() { return ae_; }
    const ConditionalUNet& unet() const { return unet_; }
    ConditionalUNet& unet() { return unet_; }

    std::vector<int> latent_shape() const { return ae_.latent_shape(); }
    std::size_t latent_size() const;
    int embedding_dim() const { return text_.dim(); }

    /// Throws ShapeError on a resolution other than config().image_size.
    Latent encode(const Image& image) const;
    Image decode(const Latent& z) const;

    std::vector<float> embed_prompt(std::string_view prompt, const std::vector<float>* override = nullptr) const;

    /// Batched eps prediction. `cond` holds either one embedding shared by all samples or one per sample.
    std::vector<Latent> predict_noise(const std::vector<Latent>& z, std::span<const int> t,
                                      std::span<const float> cond) const;

    std::vector<nn::Param*> params();
    std::vector<const nn::Param*> params() const;
    /// SHA-256 over the configuration and every parameter value.
    std::string checksum() const;

    long trained_steps() const { return trained_steps_; }
    void set_trained_steps(long s) { trained_steps_ = s; }

    void save(const std::filesystem::path& path) const;
    static ToyT2IModel load(const std::filesystem::path& path);

private:
    T2IConfig config_;
    TextEncoder text_;
    Autoencoder ae_;
    ConditionalUNet unet_;
    long trained_steps_ = 0;
};

struct T2ITrainConfig {
    int steps = 6000;
    int batch_size = 16;
    double learning_rate = 2e-3;
    int warmup_steps = 200;
    /// Final learning rate as a fraction of the peak (cosine decay).
    double final_lr_fraction = 0.05;
    double ema_decay = 0.999;
    double grad_clip = 1.0;
    int autoencoder_steps = 1500;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static T2ITrainConfig from_json(const nlohmann::json& j);
};

struct TrainingLog {
    std::vector<double> losses;
    std::vector<double> autoencoder_losses;

    bool empty() const { return losses.empty(); }
    /// Mean of the first / last `fraction` of the recorded losses.
    double leading_mean(double fraction = 0.1) const;
    double trailing_mean(double fraction = 0.1) const;
};

using ProgressFn = std::function<void(int step, double loss)>;

/// Conditional DDPM training of the denoiser and token table on "a photo of <class>" prompts,
/// t uniform on [1, T_max]. The EMA weights are installed at the end. Throws DivergenceError
/// on a non-finite loss.
TrainingLog train_t2i(ToyT2IModel& model, const ShapeGroupCorpus& corpus, const NoiseSchedule& schedule,
                      const T2ITrainConfig& config, const ProgressFn& progress = {});

enum class XiMode { stochastic, zero };
std::string to_string(XiMode mode);
XiMode xi_mode_from_string(const std::string& s);

/// eps(z_t, t) for a batch of latents.
using NoisePredictor = std::function<std::vector<Latent>(const std::vector<Latent>& z, std::span<const int> t)>;

struct ChainOptions {
    XiMode xi_mode = XiMode::stochastic;
    int batch_size = 16;
    /// When set, the predicted z0 is clipped to [-clip, clip] before each posterior step.
    std::optional<double> clip;
};

/// Runs posterior steps t_start..1 on every latent with an arbitrary noise predictor.
/// Sample i draws xi from its own Rng(seeds[i]), so results do not depend on batch composition.
std::vector<Latent> reverse_chain(const NoisePredictor& predictor, const NoiseSchedule& schedule, std::vector<Latent> z,
                                  int t_start, std::span<const std::uint64_t> seeds, const ChainOptions& options);

/// Model-backed chain. `cond` is shared or per-sample.
std::vector<Latent> reverse_chain(const ToyT2IModel& model, const NoiseSchedule& schedule, std::vector<Latent> z,
                                  int t_start, std::span<const float> cond, std::span<const std::uint64_t> seeds,
                                  const ChainOptions& options);

/// Latent range the chain may clip to: [-1, 1] for the identity autoencoder, none otherwise.
std::optional<double> latent_clip(const ToyT2IModel& model);

/// Samples images from pure noise through the full chain.
std::vector<Image> generate(const ToyT2IModel& model, const NoiseSchedule& schedule, std::span<const float> cond,
                            int n_samples, std::uint64_t seed);

}  // namespace conpure
