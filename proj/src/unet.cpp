#include "conpure/unet.hpp"

#include <cmath>

#include "conpure/error.hpp"

namespace conpure {

using nn::Act;

nlohmann::json UNetConfig::to_json() const {
    return {{"latent_channels", latent_channels}, {"latent_size", latent_size},
            {"space_to_depth", space_to_depth}, {"base_channels", base_channels},
            {"mid_channels", mid_channels},     {"cond_dim", cond_dim},
            {"emb_dim", emb_dim},               {"time_dim", time_dim}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.latent_channels = j.at("latent_channels").get<int>();
    c.latent_size = j.at("latent_size").get<int>();
    c.space_to_depth = j.at("space_to_depth").get<bool>();
    c.base_channels = j.at("base_channels").get<int>();
    c.mid_channels = j.at("mid_channels").get<int>();
    c.cond_dim = j.at("cond_dim").get<int>();
    c.emb_dim = j.at("emb_dim").get<int>();
    c.time_dim = j.at("time_dim").get<int>();
    return c;
}

namespace {

struct ResBlock {
    struct Cache {
        Act x;
        nn::ConvCache c1;
        nn::ConvCache c2;
        nn::ConvCache skip;
        Act h1;
        Act f;
        std::vector<float> film;
    };

    nn::Conv2d conv1;
    nn::Conv2d conv2;
    bool has_skip = false;
    nn::Conv2d skip;
    nn::Linear film;
    int cout = 0;

    ResBlock() = default;
    ResBlock(const std::string& name, int cin, int cout_, int emb_dim, Rng& rng)
        : conv1(name + ".conv1", cin, cout_, 3, rng),
          conv2(name + ".conv2", cout_, cout_, 3, rng, 0.3f),
          has_skip(cin != cout_),
          film(name + ".film", emb_dim, 2 * cout_, rng, 0.1f),
          cout(cout_) {
        if (has_skip) {
            skip = nn::Conv2d(name + ".skip", cin, cout_, 1, rng);
        }
    }

    Act forward(const Act& x, std::span<const float> emb, Cache* cache) const {
        const int n = x.n;
        Act a1 = nn::silu(x);
        Act h1 = conv1.forward(a1, cache ? &cache->c1 : nullptr);
        std::vector<float> gb = film.forward(emb, n);
        Act f = h1;
        const std::size_t hw = f.image_size();
        for (int c = 0; c < cout; ++c) {
            float* fc = f.channel(c);
            for (int s = 0; s < n; ++s) {
                const float g = 1.0f + gb[static_cast<std::size_t>(s) * 2 * cout + c];
                const float b = gb[static_cast<std::size_t>(s) * 2 * cout + cout + c];
                float* p = fc + s * hw;
                for (std::size_t i = 0; i < hw; ++i) p[i] = p[i] * g + b;
            }
        }
        Act a2 = nn::silu(f);
        Act out = conv2.forward(a2, cache ? &cache->c2 : nullptr);
        if (has_skip) {
            nn::add_inplace(out, skip.forward(x, cache ? &cache->skip : nullptr));
        } else {
            nn::add_inplace(out, x);
        }
        if (cache) {
            cache->x = x;
            cache->h1 = std::move(h1);
            cache->f = std::move(f);
            cache->film = std::move(gb);
        }
        return out;
    }

    Act backward(const Act& dy, const Cache& cache, std::span<const float> emb, std::span<float> demb,
                 bool param_grads) {
        const int n = dy.n;
        Act da2 = conv2.backward(dy, cache.c2, param_grads);
        Act df = nn::silu_backward(cache.f, da2);
        std::vector<float> dgb(static_cast<std::size_t>(n) * 2 * cout, 0.0f);
        const std::size_t hw = df.image_size();
        Act dh1 = df;
        for (int c = 0; c < cout; ++c) {
            const float* dfc = df.channel(c);
            const float* h1c = cache.h1.channel(c);
            float* dh1c = dh1.channel(c);
            for (int s = 0; s < n; ++s) {
                const float g = 1.0f + cache.film[static_cast<std::size_t>(s) * 2 * cout + c];
                double sg = 0.0;
                double sb = 0.0;
                for (std::size_t i = 0; i < hw; ++i) {
                    const std::size_t k = s * hw + i;
                    sg += static_cast<double>(dfc[k]) * h1c[k];
                    sb += dfc[k];
                    dh1c[k] = dfc[k] * g;
                }
                dgb[static_cast<std::size_t>(s) * 2 * cout + c] = static_cast<float>(sg);
                dgb[static_cast<std::size_t>(s) * 2 * cout + cout + c] = static_cast<float>(sb);
            }
        }
        std::vector<float> de = film.backward(emb, dgb, n, param_grads);
        for (std::size_t i = 0; i < de.size(); ++i) demb[i] += de[i];
        Act da1 = conv1.backward(dh1, cache.c1, param_grads);
        Act dx = nn::silu_backward(cache.x, da1);
        if (has_skip) {
            nn::add_inplace(dx, skip.backward(dy, cache.skip, param_grads));
        } else {
            nn::add_inplace(dx, dy);
        }
        return dx;
    }

    void collect(std::vector<nn::Param*>& out) {
        conv1.collect(out);
        conv2.collect(out);
        if (has_skip) skip.collect(out);
        film.collect(out);
    }
};

std::vector<float> sinusoid(std::span<const int> t, int dim) {
    const int half = dim / 2;
    std::vector<float> out(t.size() * dim);
    for (std::size_t s = 0; s < t.size(); ++s) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            out[s * dim + i] = static_cast<float>(std::sin(t[s] * freq));
            out[s * dim + half + i] = static_cast<float>(std::cos(t[s] * freq));
        }
    }
    return out;
}

}  // namespace

struct ConditionalUNet::Layers {
    nn::Linear time1;
    nn::Linear time2;
    nn::Linear cond_proj;
    nn::Conv2d conv_in;
    ResBlock down1;
    ResBlock down2;
    ResBlock mid;
    ResBlock up2;
    ResBlock up1;
    nn::Conv2d conv_out;

    void collect(std::vector<nn::Param*>& out) {
        time1.collect(out);
        time2.collect(out);
        cond_proj.collect(out);
        conv_in.collect(out);
        down1.collect(out);
        down2.collect(out);
        mid.collect(out);
        up2.collect(out);
        up1.collect(out);
        conv_out.collect(out);
    }
};

struct UNetTape::State {
    int n = 0;
    std::vector<float> time_in;
    std::vector<float> e1;
    std::vector<float> e1_act;
    std::vector<float> cond;
    std::vector<float> pre;
    std::vector<float> emb;
    nn::ConvCache conv_in;
    ResBlock::Cache down1;
    ResBlock::Cache down2;
    ResBlock::Cache mid;
    ResBlock::Cache up2;
    ResBlock::Cache up1;
    Act h5;
    nn::ConvCache conv_out;
};

ConditionalUNet::ConditionalUNet(UNetConfig config, std::uint64_t seed) : config_(config) {
    if (config_.latent_size % 8 != 0 && config_.space_to_depth) {
        throw ConfigError("latent_size must be divisible by 8 with space_to_depth");
    }
    if (config_.latent_size % 4 != 0) {
        throw ConfigError("latent_size must be divisible by 4");
    }
    Rng rng(seed);
    const int in_ch = config_.latent_channels * (config_.space_to_depth ? 4 : 1);
    const int c1 = config_.base_channels;
    const int c2 = config_.mid_channels;
    const int e = config_.emb_dim;
    layers_ = std::make_unique<Layers>();
    auto& L = *layers_;
    L.time1 = nn::Linear("time1", config_.time_dim, e, rng);
    L.time2 = nn::Linear("time2", e, e, rng);
    L.cond_proj = nn::Linear("cond_proj", config_.cond_dim, e, rng);
    L.conv_in = nn::Conv2d("conv_in", in_ch, c1, 3, rng);
    L.down1 = ResBlock("down1", c1, c1, e, rng);
    L.down2 = ResBlock("down2", c1, c2, e, rng);
    L.mid = ResBlock("mid", c2, c2, e, rng);
    L.up2 = ResBlock("up2", c2 + c2, c2, e, rng);
    L.up1 = ResBlock("up1", c2 + c1, c1, e, rng);
    L.conv_out = nn::Conv2d("conv_out", c1, in_ch, 3, rng, 0.1f);
}

ConditionalUNet::~ConditionalUNet() = default;
ConditionalUNet::ConditionalUNet(ConditionalUNet&&) noexcept = default;
ConditionalUNet& ConditionalUNet::operator=(ConditionalUNet&&) noexcept = default;

ConditionalUNet::ConditionalUNet(const ConditionalUNet& other)
    : config_(other.config_), layers_(std::make_unique<Layers>(*other.layers_)) {}

ConditionalUNet& ConditionalUNet::operator=(const ConditionalUNet& other) {
    if (this != &other) {
        config_ = other.config_;
        layers_ = std::make_unique<Layers>(*other.layers_);
    }
    return *this;
}

UNetTape::UNetTape() : state_(std::make_unique<State>()) {}
UNetTape::~UNetTape() = default;
UNetTape::UNetTape(UNetTape&&) noexcept = default;
UNetTape& UNetTape::operator=(UNetTape&&) noexcept = default;

std::vector<float> ConditionalUNet::forward(std::span<const float> z, int n, std::span<const int> t,
                                            std::span<const float> cond, UNetTape* record) const {
    UNetTape::State* tape = record ? record->state_.get() : nullptr;
    const auto& c = config_;
    const std::size_t per = static_cast<std::size_t>(c.latent_channels) * c.latent_size * c.latent_size;
    if (z.size() != per * n || t.size() != static_cast<std::size_t>(n) ||
        cond.size() != static_cast<std::size_t>(n) * c.cond_dim) {
        throw ShapeError("ConditionalUNet::forward: input sizes do not match the configured latent shape");
    }
    const auto& L = *layers_;

    std::vector<float> tin = sinusoid(t, c.time_dim);
    std::vector<float> e1 = L.time1.forward(tin, n);
    std::vector<float> e1a = e1;
    nn::silu_inplace(e1a);
    std::vector<float> pre = L.time2.forward(e1a, n);
    std::vector<float> ce = L.cond_proj.forward(cond, n);
    for (std::size_t i = 0; i < pre.size(); ++i) pre[i] += ce[i];
    std::vector<float> emb = pre;
    nn::silu_inplace(emb);

    Act x = nn::from_sample_major(z, n, c.latent_channels, c.latent_size, c.latent_size);
    if (c.space_to_depth) x = nn::pixel_unshuffle(x);

    Act h0 = L.conv_in.forward(x, tape ? &tape->conv_in : nullptr);
    Act h1 = L.down1.forward(h0, emb, tape ? &tape->down1 : nullptr);
    Act h2 = L.down2.forward(nn::avg_pool2(h1), emb, tape ? &tape->down2 : nullptr);
    Act h3 = L.mid.forward(nn::avg_pool2(h2), emb, tape ? &tape->mid : nullptr);
    Act h4 = L.up2.forward(nn::concat_channels(nn::upsample2(h3), h2), emb, tape ? &tape->up2 : nullptr);
    Act h5 = L.up1.forward(nn::concat_channels(nn::upsample2(h4), h1), emb, tape ? &tape->up1 : nullptr);
    Act o = L.conv_out.forward(nn::silu(h5), tape ? &tape->conv_out : nullptr);
    if (c.space_to_depth) o = nn::pixel_shuffle(o);

    if (tape) {
        tape->n = n;
        tape->time_in = std::move(tin);
        tape->e1 = std::move(e1);
        tape->e1_act = std::move(e1a);
        tape->cond.assign(cond.begin(), cond.end());
        tape->pre = std::move(pre);
        tape->emb = std::move(emb);
        tape->h5 = std::move(h5);
    }
    return nn::to_sample_major(o);
}

std::vector<float> ConditionalUNet::backward(std::span<const float> dout, const UNetTape& record, bool param_grads) {
    const UNetTape::State& tape = *record.state_;
    const auto& c = config_;
    auto& L = *layers_;
    const int n = tape.n;
    const int c1 = c.base_channels;
    const int c2 = c.mid_channels;

    Act d = nn::from_sample_major(dout, n, c.latent_channels, c.latent_size, c.latent_size);
    if (c.space_to_depth) d = nn::pixel_unshuffle(d);

    std::vector<float> demb(tape.emb.size(), 0.0f);
    Act da5 = L.conv_out.backward(d, tape.conv_out, param_grads);
    Act dh5 = nn::silu_backward(tape.h5, da5);
    Act dcat1 = L.up1.backward(dh5, tape.up1, tape.emb, demb, param_grads);
    auto [du1, dh1_skip] = nn::split_channels(dcat1, c2);
    Act dh4 = nn::upsample2_backward(du1);
    Act dcat2 = L.up2.backward(dh4, tape.up2, tape.emb, demb, param_grads);
    auto [du2, dh2_skip] = nn::split_channels(dcat2, c2);
    Act dh3 = nn::upsample2_backward(du2);
    Act dd2 = L.mid.backward(dh3, tape.mid, tape.emb, demb, param_grads);
    Act dh2 = nn::avg_pool2_backward(dd2);
    nn::add_inplace(dh2, dh2_skip);
    Act dd1 = L.down2.backward(dh2, tape.down2, tape.emb, demb, param_grads);
    Act dh1 = nn::avg_pool2_backward(dd1);
    nn::add_inplace(dh1, dh1_skip);
    Act dh0 = L.down1.backward(dh1, tape.down1, tape.emb, demb, param_grads);
    (void)c1;
    if (param_grads) {
        L.conv_in.backward(dh0, tape.conv_in, true);
    }

    std::vector<float> dpre(demb.size());
    for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] = demb[i] * nn::silu_grad(tape.pre[i]);
    std::vector<float> dcond = L.cond_proj.backward(tape.cond, dpre, n, param_grads);
    if (param_grads) {
        std::vector<float> de1a = L.time2.backward(tape.e1_act, dpre, n, true);
        for (std::size_t i = 0; i < de1a.size(); ++i) de1a[i] *= nn::silu_grad(tape.e1[i]);
        L.time1.backward(tape.time_in, de1a, n, true);
    }
    return dcond;
}

std::vector<nn::Param*> ConditionalUNet::params() {
    std::vector<nn::Param*> out;
    layers_->collect(out);
    return out;
}

std::vector<const nn::Param*> ConditionalUNet::params() const {
    auto mut = const_cast<ConditionalUNet*>(this)->params();
    return {mut.begin(), mut.end()};
}

std::size_t ConditionalUNet::parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : params()) n += p->value.size();
    return n;
}

}  // namespace conpure
