#pragma once

// Minimal layer library with explicit backward passes. Activations are stored
// channel-major ([C][N][H][W]) so every convolution is a single GEMM.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "conpure/random.hpp"

namespace conpure::nn {

struct Param {
    std::string name;
    std::vector<float> value;
    std::vector<float> grad;

    Param() = default;
    Param(std::string n, std::size_t count) : name(std::move(n)), value(count, 0.0f), grad(count, 0.0f) {}
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

struct Act {
    int c = 0;
    int n = 0;
    int h = 0;
    int w = 0;
    std::vector<float> data;

    Act() = default;
    Act(int channels, int batch, int height, int width, float fill = 0.0f)
        : c(channels), n(batch), h(height), w(width),
          data(static_cast<std::size_t>(channels) * batch * height * width, fill) {}

    std::size_t plane() const { return static_cast<std::size_t>(n) * h * w; }
    std::size_t image_size() const { return static_cast<std::size_t>(h) * w; }
    float* channel(int ci) { return data.data() + ci * plane(); }
    const float* channel(int ci) const { return data.data() + ci * plane(); }
};

struct ConvCache {
    std::vector<float> cols;
    int n = 0;
    int h = 0;
    int w = 0;
};

/// Square convolution, stride 1, "same" padding; kernel 1 or 3.
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::string name, int in_channels, int out_channels, int kernel, Rng& rng, float init_scale = 1.0f);

    Act forward(const Act& x, ConvCache* cache) const;
    /// Returns dL/dx; accumulates weight and bias gradients when param_grads is set.
    Act backward(const Act& dy, const ConvCache& cache, bool param_grads);

    int in_channels() const { return in_; }
    int out_channels() const { return out_; }
    void collect(std::vector<Param*>& out) { out.push_back(&weight_); out.push_back(&bias_); }

private:
    int in_ = 0;
    int out_ = 0;
    int k_ = 3;
    Param weight_;
    Param bias_;
};

/// Dense layer on row-major [N, in] batches.
class Linear {
public:
    Linear() = default;
    Linear(std::string name, int in_features, int out_features, Rng& rng, float init_scale = 1.0f);

    std::vector<float> forward(std::span<const float> x, int n) const;
    std::vector<float> backward(std::span<const float> x, std::span<const float> dy, int n, bool param_grads);

    int in_features() const { return in_; }
    int out_features() const { return out_; }
    void collect(std::vector<Param*>& out) { out.push_back(&weight_); out.push_back(&bias_); }

private:
    int in_ = 0;
    int out_ = 0;
    Param weight_;
    Param bias_;
};

float silu(float x);
float silu_grad(float x);
Act silu(const Act& x);
/// dy * silu'(x)
Act silu_backward(const Act& x, const Act& dy);
void silu_inplace(std::span<float> v);

Act avg_pool2(const Act& x);
Act avg_pool2_backward(const Act& dy);
Act upsample2(const Act& x);
Act upsample2_backward(const Act& dy);

Act concat_channels(const Act& a, const Act& b);
/// Splits dy of a concatenation back into the first `first_channels` and the rest.
std::pair<Act, Act> split_channels(const Act& dy, int first_channels);

/// [C][N][H][W] -> [4C][N][H/2][W/2] and its inverse.
Act pixel_unshuffle(const Act& x);
Act pixel_shuffle(const Act& x);

void add_inplace(Act& a, const Act& b);

/// Converts a sample-major [N][C][H][W] buffer to channel-major activations and back.
Act from_sample_major(std::span<const float> v, int n, int c, int h, int w);
std::vector<float> to_sample_major(const Act& a);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    /// Global L2 gradient-norm clip; <= 0 disables.
    double grad_clip = 1.0;
};

class Adam {
public:
    Adam(std::vector<Param*> params, AdamConfig config);
    void zero_grad();
    /// Returns the pre-clip gradient norm.
    double step(double lr_scale = 1.0);

private:
    std::vector<Param*> params_;
    AdamConfig config_;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
    long step_ = 0;
};

/// Flat copy of all parameter values; used for EMA weights and checksums.
std::vector<float> snapshot(const std::vector<Param*>& params);
void restore(const std::vector<Param*>& params, std::span<const float> flat);

}  // namespace conpure::nn
