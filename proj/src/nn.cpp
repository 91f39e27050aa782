#include "conpure/nn.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "conpure/error.hpp"

namespace conpure::nn {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXf>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXf>;

void init_uniform(Param& p, int fan_in, Rng& rng, float scale) {
    // He-uniform bound for SiLU/ReLU-like activations.
    const double bound = scale * std::sqrt(6.0 / std::max(fan_in, 1));
    for (auto& v : p.value) {
        v = static_cast<float>(rng.uniform(-bound, bound));
    }
}

void im2col3(const Act& x, float* cols) {
    const std::size_t plane = x.plane();
    const int h = x.h;
    const int w = x.w;
    for (int c = 0; c < x.c; ++c) {
        const float* src = x.channel(c);
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                float* dst = cols + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * plane;
                const int dy = ky - 1;
                const int dx = kx - 1;
                const int x0 = std::max(0, -dx);
                const int x1 = std::min(w, w - dx);
                for (int n = 0; n < x.n; ++n) {
                    const float* s = src + static_cast<std::size_t>(n) * h * w;
                    float* d = dst + static_cast<std::size_t>(n) * h * w;
                    for (int y = 0; y < h; ++y) {
                        float* drow = d + static_cast<std::size_t>(y) * w;
                        const int yy = y + dy;
                        if (yy < 0 || yy >= h) {
                            std::memset(drow, 0, sizeof(float) * w);
                            continue;
                        }
                        const float* srow = s + static_cast<std::size_t>(yy) * w;
                        if (x0 > 0) drow[0] = 0.0f;
                        if (x1 < w) drow[w - 1] = 0.0f;
                        std::memcpy(drow + x0, srow + x0 + dx, sizeof(float) * (x1 - x0));
                    }
                }
            }
        }
    }
}

void col2im3(const float* cols, Act& dx) {
    const std::size_t plane = dx.plane();
    const int h = dx.h;
    const int w = dx.w;
    for (int c = 0; c < dx.c; ++c) {
        float* dst = dx.channel(c);
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const float* src = cols + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * plane;
                const int dy = ky - 1;
                const int ddx = kx - 1;
                const int x0 = std::max(0, -ddx);
                const int x1 = std::min(w, w - ddx);
                for (int n = 0; n < dx.n; ++n) {
                    const float* s = src + static_cast<std::size_t>(n) * h * w;
                    float* d = dst + static_cast<std::size_t>(n) * h * w;
                    for (int y = 0; y < h; ++y) {
                        const int yy = y + dy;
                        if (yy < 0 || yy >= h) continue;
                        const float* srow = s + static_cast<std::size_t>(y) * w;
                        float* drow = d + static_cast<std::size_t>(yy) * w + ddx;
                        for (int xx = x0; xx < x1; ++xx) {
                            drow[xx] += srow[xx];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, Rng& rng, float init_scale)
    : in_(in_channels), out_(out_channels), k_(kernel),
      weight_(name + ".weight", static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel),
      bias_(name + ".bias", static_cast<std::size_t>(out_channels)) {
    if (kernel != 1 && kernel != 3) {
        throw ConfigError("Conv2d supports kernel 1 or 3");
    }
    init_uniform(weight_, in_channels * kernel * kernel, rng, init_scale);
}

Act Conv2d::forward(const Act& x, ConvCache* cache) const {
    if (x.c != in_) {
        throw ShapeError("Conv2d " + weight_.name + ": expected " + std::to_string(in_) + " channels, got " +
                         std::to_string(x.c));
    }
    const std::size_t plane = x.plane();
    const int kdim = in_ * k_ * k_;
    Act y(out_, x.n, x.h, x.w);
    ConstMatMap wmat(weight_.value.data(), out_, kdim);
    MatMap ymat(y.data.data(), out_, static_cast<Eigen::Index>(plane));

    std::vector<float> local;
    const float* cols = nullptr;
    if (k_ == 1) {
        cols = x.data.data();
        if (cache) {
            cache->cols = x.data;
        }
    } else {
        std::vector<float>& buf = cache ? cache->cols : local;
        buf.resize(static_cast<std::size_t>(kdim) * plane);
        im2col3(x, buf.data());
        cols = buf.data();
    }
    if (cache) {
        cache->n = x.n;
        cache->h = x.h;
        cache->w = x.w;
    }
    ConstMatMap cmat(cols, kdim, static_cast<Eigen::Index>(plane));
    // One product per sample: GEMM blocking depends on the column count, so a batched
    // product would round differently from the same sample run alone.
    const auto hw = static_cast<Eigen::Index>(x.image_size());
    for (int i = 0; i < x.n; ++i) {
        ymat.middleCols(i * hw, hw).noalias() = wmat * cmat.middleCols(i * hw, hw);
    }
    ymat.colwise() += ConstVecMap(bias_.value.data(), out_);
    return y;
}

Act Conv2d::backward(const Act& dy, const ConvCache& cache, bool param_grads) {
    const std::size_t plane = dy.plane();
    const int kdim = in_ * k_ * k_;
    ConstMatMap dymat(dy.data.data(), out_, static_cast<Eigen::Index>(plane));
    ConstMatMap cmat(cache.cols.data(), kdim, static_cast<Eigen::Index>(plane));
    ConstMatMap wmat(weight_.value.data(), out_, kdim);
    if (param_grads) {
        MatMap dw(weight_.grad.data(), out_, kdim);
        dw.noalias() += dymat * cmat.transpose();
        VecMap(bias_.grad.data(), out_) += dymat.rowwise().sum();
    }
    Act dx(in_, cache.n, cache.h, cache.w);
    if (k_ == 1) {
        MatMap dxmat(dx.data.data(), in_, static_cast<Eigen::Index>(plane));
        dxmat.noalias() = wmat.transpose() * dymat;
    } else {
        std::vector<float> dcols(static_cast<std::size_t>(kdim) * plane);
        MatMap dc(dcols.data(), kdim, static_cast<Eigen::Index>(plane));
        dc.noalias() = wmat.transpose() * dymat;
        col2im3(dcols.data(), dx);
    }
    return dx;
}

Linear::Linear(std::string name, int in_features, int out_features, Rng& rng, float init_scale)
    : in_(in_features), out_(out_features),
      weight_(name + ".weight", static_cast<std::size_t>(out_features) * in_features),
      bias_(name + ".bias", static_cast<std::size_t>(out_features)) {
    init_uniform(weight_, in_features, rng, init_scale);
}

std::vector<float> Linear::forward(std::span<const float> x, int n) const {
    if (x.size() != static_cast<std::size_t>(n) * in_) {
        throw ShapeError("Linear " + weight_.name + ": input size mismatch");
    }
    std::vector<float> y(static_cast<std::size_t>(n) * out_);
    ConstMatMap xm(x.data(), n, in_);
    ConstMatMap wm(weight_.value.data(), out_, in_);
    MatMap ym(y.data(), n, out_);
    for (int i = 0; i < n; ++i) {
        ym.row(i).noalias() = xm.row(i) * wm.transpose();
    }
    ym.rowwise() += ConstVecMap(bias_.value.data(), out_).transpose();
    return y;
}

std::vector<float> Linear::backward(std::span<const float> x, std::span<const float> dy, int n, bool param_grads) {
    ConstMatMap xm(x.data(), n, in_);
    ConstMatMap dym(dy.data(), n, out_);
    ConstMatMap wm(weight_.value.data(), out_, in_);
    if (param_grads) {
        MatMap(weight_.grad.data(), out_, in_).noalias() += dym.transpose() * xm;
        VecMap(bias_.grad.data(), out_) += dym.colwise().sum().transpose();
    }
    std::vector<float> dx(static_cast<std::size_t>(n) * in_);
    MatMap(dx.data(), n, in_).noalias() = dym * wm;
    return dx;
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

float silu_grad(float x) {
    const float s = 1.0f / (1.0f + std::exp(-x));
    return s * (1.0f + x * (1.0f - s));
}

Act silu(const Act& x) {
    Act y = x;
    silu_inplace(y.data);
    return y;
}

void silu_inplace(std::span<float> v) {
    for (auto& e : v) e = silu(e);
}

Act silu_backward(const Act& x, const Act& dy) {
    Act dx = dy;
    for (std::size_t i = 0; i < dx.data.size(); ++i) {
        dx.data[i] *= silu_grad(x.data[i]);
    }
    return dx;
}

Act avg_pool2(const Act& x) {
    if (x.h % 2 || x.w % 2) {
        throw ShapeError("avg_pool2 needs even spatial dims");
    }
    Act y(x.c, x.n, x.h / 2, x.w / 2);
    const std::size_t planes = static_cast<std::size_t>(x.c) * x.n;
    for (std::size_t p = 0; p < planes; ++p) {
        const float* s = x.data.data() + p * x.image_size();
        float* d = y.data.data() + p * y.image_size();
        for (int yy = 0; yy < y.h; ++yy) {
            const float* r0 = s + static_cast<std::size_t>(2 * yy) * x.w;
            const float* r1 = r0 + x.w;
            for (int xx = 0; xx < y.w; ++xx) {
                d[yy * y.w + xx] = 0.25f * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
            }
        }
    }
    return y;
}

Act avg_pool2_backward(const Act& dy) {
    Act dx(dy.c, dy.n, dy.h * 2, dy.w * 2);
    const std::size_t planes = static_cast<std::size_t>(dy.c) * dy.n;
    for (std::size_t p = 0; p < planes; ++p) {
        const float* s = dy.data.data() + p * dy.image_size();
        float* d = dx.data.data() + p * dx.image_size();
        for (int yy = 0; yy < dx.h; ++yy) {
            for (int xx = 0; xx < dx.w; ++xx) {
                d[yy * dx.w + xx] = 0.25f * s[(yy / 2) * dy.w + xx / 2];
            }
        }
    }
    return dx;
}

Act upsample2(const Act& x) {
    Act y(x.c, x.n, x.h * 2, x.w * 2);
    const std::size_t planes = static_cast<std::size_t>(x.c) * x.n;
    for (std::size_t p = 0; p < planes; ++p) {
        const float* s = x.data.data() + p * x.image_size();
        float* d = y.data.data() + p * y.image_size();
        for (int yy = 0; yy < y.h; ++yy) {
            for (int xx = 0; xx < y.w; ++xx) {
                d[yy * y.w + xx] = s[(yy / 2) * x.w + xx / 2];
            }
        }
    }
    return y;
}

Act upsample2_backward(const Act& dy) {
    Act dx(dy.c, dy.n, dy.h / 2, dy.w / 2);
    const std::size_t planes = static_cast<std::size_t>(dy.c) * dy.n;
    for (std::size_t p = 0; p < planes; ++p) {
        const float* s = dy.data.data() + p * dy.image_size();
        float* d = dx.data.data() + p * dx.image_size();
        for (int yy = 0; yy < dy.h; ++yy) {
            for (int xx = 0; xx < dy.w; ++xx) {
                d[(yy / 2) * dx.w + xx / 2] += s[yy * dy.w + xx];
            }
        }
    }
    return dx;
}

Act concat_channels(const Act& a, const Act& b) {
    if (a.n != b.n || a.h != b.h || a.w != b.w) {
        throw ShapeError("concat_channels: spatial/batch mismatch");
    }
    Act y(a.c + b.c, a.n, a.h, a.w);
    std::copy(a.data.begin(), a.data.end(), y.data.begin());
    std::copy(b.data.begin(), b.data.end(), y.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
    return y;
}

std::pair<Act, Act> split_channels(const Act& dy, int first_channels) {
    Act a(first_channels, dy.n, dy.h, dy.w);
    Act b(dy.c - first_channels, dy.n, dy.h, dy.w);
    const auto cut = dy.data.begin() + static_cast<std::ptrdiff_t>(a.data.size());
    std::copy(dy.data.begin(), cut, a.data.begin());
    std::copy(cut, dy.data.end(), b.data.begin());
    return {std::move(a), std::move(b)};
}

Act pixel_unshuffle(const Act& x) {
    if (x.h % 2 || x.w % 2) {
        throw ShapeError("pixel_unshuffle needs even spatial dims");
    }
    Act y(x.c * 4, x.n, x.h / 2, x.w / 2);
    for (int c = 0; c < x.c; ++c) {
        for (int n = 0; n < x.n; ++n) {
            const float* s = x.channel(c) + static_cast<std::size_t>(n) * x.image_size();
            for (int sub = 0; sub < 4; ++sub) {
                const int oy = sub / 2;
                const int ox = sub % 2;
                float* d = y.channel(c * 4 + sub) + static_cast<std::size_t>(n) * y.image_size();
                for (int yy = 0; yy < y.h; ++yy) {
                    for (int xx = 0; xx < y.w; ++xx) {
                        d[yy * y.w + xx] = s[(2 * yy + oy) * x.w + 2 * xx + ox];
                    }
                }
            }
        }
    }
    return y;
}

Act pixel_shuffle(const Act& x) {
    if (x.c % 4) {
        throw ShapeError("pixel_shuffle needs channels divisible by 4");
    }
    Act y(x.c / 4, x.n, x.h * 2, x.w * 2);
    for (int c = 0; c < y.c; ++c) {
        for (int n = 0; n < x.n; ++n) {
            float* d = y.channel(c) + static_cast<std::size_t>(n) * y.image_size();
            for (int sub = 0; sub < 4; ++sub) {
                const int oy = sub / 2;
                const int ox = sub % 2;
                const float* s = x.channel(c * 4 + sub) + static_cast<std::size_t>(n) * x.image_size();
                for (int yy = 0; yy < x.h; ++yy) {
                    for (int xx = 0; xx < x.w; ++xx) {
                        d[(2 * yy + oy) * y.w + 2 * xx + ox] = s[yy * x.w + xx];
                    }
                }
            }
        }
    }
    return y;
}

void add_inplace(Act& a, const Act& b) {
    if (a.data.size() != b.data.size()) {
        throw ShapeError("add_inplace: size mismatch");
    }
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

Act from_sample_major(std::span<const float> v, int n, int c, int h, int w) {
    Act a(c, n, h, w);
    if (v.size() != a.data.size()) {
        throw ShapeError("from_sample_major: size mismatch");
    }
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int ni = 0; ni < n; ++ni) {
        for (int ci = 0; ci < c; ++ci) {
            std::copy_n(v.data() + (static_cast<std::size_t>(ni) * c + ci) * hw, hw,
                        a.channel(ci) + static_cast<std::size_t>(ni) * hw);
        }
    }
    return a;
}

std::vector<float> to_sample_major(const Act& a) {
    std::vector<float> v(a.data.size());
    const std::size_t hw = a.image_size();
    for (int ni = 0; ni < a.n; ++ni) {
        for (int ci = 0; ci < a.c; ++ci) {
            std::copy_n(a.channel(ci) + static_cast<std::size_t>(ni) * hw, hw,
                        v.data() + (static_cast<std::size_t>(ni) * a.c + ci) * hw);
        }
    }
    return v;
}

Adam::Adam(std::vector<Param*> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    for (auto* p : params_) {
        m_.emplace_back(p->value.size(), 0.0f);
        v_.emplace_back(p->value.size(), 0.0f);
    }
}

void Adam::zero_grad() {
    for (auto* p : params_) p->zero_grad();
}

double Adam::step(double lr_scale) {
    double sq = 0.0;
    for (auto* p : params_) {
        for (float g : p->grad) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    double clip = 1.0;
    if (config_.grad_clip > 0.0 && norm > config_.grad_clip) {
        clip = config_.grad_clip / norm;
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    const double lr = config_.learning_rate * lr_scale;
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = *params_[k];
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i] * clip;
            m[i] = static_cast<float>(config_.beta1 * m[i] + (1.0 - config_.beta1) * g);
            v[i] = static_cast<float>(config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g);
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            p.value[i] -= static_cast<float>(lr * mh / (std::sqrt(vh) + config_.epsilon));
        }
    }
    return norm;
}

std::vector<float> snapshot(const std::vector<Param*>& params) {
    std::vector<float> flat;
    for (auto* p : params) flat.insert(flat.end(), p->value.begin(), p->value.end());
    return flat;
}

void restore(const std::vector<Param*>& params, std::span<const float> flat) {
    std::size_t off = 0;
    for (auto* p : params) {
        if (off + p->value.size() > flat.size()) {
            throw ShapeError("restore: flat parameter buffer too small");
        }
        std::copy_n(flat.data() + off, p->value.size(), p->value.begin());
        off += p->value.size();
    }
    if (off != flat.size()) {
        throw ShapeError("restore: flat parameter buffer size mismatch");
    }
}

}  // namespace conpure::nn
