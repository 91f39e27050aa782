#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "conpure/nn.hpp"
#include "json.hpp"

namespace conpure {

struct UNetConfig {
    int latent_channels = 1;
    int latent_size = 48;
    /// Fold 2x2 pixel blocks into channels before the first convolution.
    bool space_to_depth = true;
    int base_channels = 16;
    int mid_channels = 32;
    int cond_dim = 16;
    int emb_dim = 64;
    int time_dim = 32;

    nlohmann::json to_json() const;
    static UNetConfig from_json(const nlohmann::json& j);
    friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

/// Activation record of one forward pass, consumed by ConditionalUNet::backward.
class UNetTape {
public:
    UNetTape();
    ~UNetTape();
    UNetTape(UNetTape&&) noexcept;
    UNetTape& operator=(UNetTape&&) noexcept;

private:
    friend class ConditionalUNet;
    struct State;
    std::unique_ptr<State> state_;
};

/// Noise predictor eps(z_t, t, cond): two-level convolutional U-Net with a sinusoidal
/// time embedding; time and condition enter every residual block through feature-wise
/// affine modulation.
class ConditionalUNet {
public:
    ConditionalUNet(UNetConfig config, std::uint64_t seed);
    ~ConditionalUNet();
    ConditionalUNet(const ConditionalUNet&);
    ConditionalUNet& operator=(const ConditionalUNet&);
    ConditionalUNet(ConditionalUNet&&) noexcept;
    ConditionalUNet& operator=(ConditionalUNet&&) noexcept;

    const UNetConfig& config() const { return config_; }

    /// z is sample-major [n][C][H][W]; t holds one step per sample; cond is [n][cond_dim].
    /// Returns predicted noise with the layout of z. Records activations into `tape` when given.
    std::vector<float> forward(std::span<const float> z, int n, std::span<const int> t,
                               std::span<const float> cond, UNetTape* tape) const;

    /// Backpropagates dL/d(output). Returns dL/d(cond) as [n][cond_dim]; parameter
    /// gradients are accumulated only when param_grads is set.
    std::vector<float> backward(std::span<const float> dout, const UNetTape& tape, bool param_grads);

    std::vector<nn::Param*> params();
    std::vector<const nn::Param*> params() const;
    std::size_t parameter_count() const;

private:
    struct Layers;
    UNetConfig config_;
    std::unique_ptr<Layers> layers_;
};

}  // namespace conpure
