#include <algorithm>
#include <cmath>
#include <vector>

#include "conpure/nn.hpp"
#include "conpure/random.hpp"
#include "conpure/unet.hpp"
#include "doctest.h"

using namespace conpure;

namespace {

std::vector<float> random_vec(Rng& rng, std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

double dot(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

// Central difference of f around v[i].
template <typename F>
double numeric_grad(std::vector<float>& v, std::size_t i, F&& f, float h = 1e-2f) {
    const float keep = v[i];
    v[i] = keep + h;
    const double up = f();
    v[i] = keep - h;
    const double down = f();
    v[i] = keep;
    return (up - down) / (2.0 * h);
}

void check_close(double analytic, double numeric, const char* what) {
    const double scale = std::max({1.0, std::abs(analytic), std::abs(numeric)});
    CHECK_MESSAGE(std::abs(analytic - numeric) < 2e-2 * scale, what << ": analytic " << analytic << " numeric " << numeric);
}

UNetConfig tiny_unet(bool space_to_depth) {
    UNetConfig c;
    c.latent_channels = 1;
    c.latent_size = 8;
    c.space_to_depth = space_to_depth;
    c.base_channels = 4;
    c.mid_channels = 6;
    c.cond_dim = 3;
    c.emb_dim = 8;
    c.time_dim = 8;
    return c;
}

}  // namespace

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(20);
    for (int kernel : {1, 3}) {
        nn::Conv2d conv("c", 2, 3, kernel, rng);
        nn::Act x(2, 2, 5, 4);
        x.data = random_vec(rng, x.data.size());
        const auto w = random_vec(rng, 3 * 2 * 5 * 4);
        auto loss = [&] { return dot(conv.forward(x, nullptr).data, w); };

        nn::ConvCache cache;
        const auto y = conv.forward(x, &cache);
        nn::Act dy(y.c, y.n, y.h, y.w);
        dy.data = w;
        std::vector<nn::Param*> params;
        conv.collect(params);
        for (auto* p : params) p->zero_grad();
        const auto dx = conv.backward(dy, cache, true);

        for (std::size_t i = 0; i < x.data.size(); i += 3) {
            check_close(dx.data[i], numeric_grad(x.data, i, loss), "conv input");
        }
        for (auto* p : params) {
            for (std::size_t i = 0; i < p->value.size(); i += 2) {
                check_close(p->grad[i], numeric_grad(p->value, i, loss), p->name.c_str());
            }
        }
    }
}

TEST_CASE("linear gradients match finite differences") {
    Rng rng(21);
    nn::Linear lin("l", 4, 3, rng);
    auto x = random_vec(rng, 2 * 4);
    const auto w = random_vec(rng, 2 * 3);
    auto loss = [&] { return dot(lin.forward(x, 2), w); };
    std::vector<nn::Param*> params;
    lin.collect(params);
    for (auto* p : params) p->zero_grad();
    const auto dx = lin.backward(x, w, 2, true);
    for (std::size_t i = 0; i < x.size(); ++i) check_close(dx[i], numeric_grad(x, i, loss), "linear input");
    for (auto* p : params) {
        for (std::size_t i = 0; i < p->value.size(); ++i) check_close(p->grad[i], numeric_grad(p->value, i, loss), "linear param");
    }
}

TEST_CASE("elementwise and resampling helpers") {
    for (float v : {-3.0f, -0.5f, 0.0f, 0.7f, 4.0f}) {
        const double fd = (nn::silu(v + 1e-3f) - nn::silu(v - 1e-3f)) / 2e-3;
        CHECK(nn::silu_grad(v) == doctest::Approx(fd).epsilon(1e-2));
    }
    Rng rng(22);
    nn::Act x(3, 2, 4, 6);
    x.data = random_vec(rng, x.data.size());
    const auto back = nn::pixel_shuffle(nn::pixel_unshuffle(x));
    CHECK(back.data == x.data);

    // Adjoint identities: <A x, y> = <x, A^T y>.
    const auto pooled = nn::avg_pool2(x);
    nn::Act y(pooled.c, pooled.n, pooled.h, pooled.w);
    y.data = random_vec(rng, y.data.size());
    CHECK(dot(pooled.data, y.data) == doctest::Approx(dot(x.data, nn::avg_pool2_backward(y).data)));
    const auto up = nn::upsample2(y);
    CHECK(dot(up.data, x.data) == doctest::Approx(dot(y.data, nn::upsample2_backward(x).data)));

    nn::Act x2(2, 2, 4, 6);
    x2.data = random_vec(rng, x2.data.size());
    const auto [a, b] = nn::split_channels(nn::concat_channels(x, x2), 3);
    CHECK(a.data == x.data);
    CHECK(b.data == x2.data);
}

TEST_CASE("unet gradients match finite differences") {
    for (bool s2d : {true, false}) {
        ConditionalUNet net(tiny_unet(s2d), 23);
        Rng rng(24);
        const int n = 2;
        auto z = random_vec(rng, static_cast<std::size_t>(n) * 64);
        auto cond = random_vec(rng, static_cast<std::size_t>(n) * 3);
        const std::vector<int> t{5, 700};
        const auto w = random_vec(rng, z.size());
        auto loss = [&] { return dot(net.forward(z, n, t, cond, nullptr), w); };

        UNetTape tape;
        net.forward(z, n, t, cond, &tape);
        for (auto* p : net.params()) p->zero_grad();
        const auto dcond = net.backward(w, tape, true);
        REQUIRE(dcond.size() == cond.size());
        for (std::size_t i = 0; i < cond.size(); ++i) check_close(dcond[i], numeric_grad(cond, i, loss), "cond");

        Rng pick(25);
        for (auto* p : net.params()) {
            for (int k = 0; k < 3; ++k) {
                const auto i = static_cast<std::size_t>(pick.uniform_int(0, static_cast<int>(p->value.size()) - 1));
                check_close(p->grad[i], numeric_grad(p->value, i, loss), p->name.c_str());
            }
        }
    }
}

TEST_CASE("unet is deterministic and shape preserving") {
    ConditionalUNet net(tiny_unet(true), 26);
    Rng rng(27);
    const auto z = random_vec(rng, 3 * 64);
    const auto cond = random_vec(rng, 3 * 3);
    const std::vector<int> t{1, 2, 3};
    const auto a = net.forward(z, 3, t, cond, nullptr);
    CHECK(a.size() == z.size());
    CHECK(a == net.forward(z, 3, t, cond, nullptr));
    const ConditionalUNet copy = net;
    CHECK(a == copy.forward(z, 3, t, cond, nullptr));
}

TEST_CASE("adam reduces a quadratic") {
    nn::Param p("p", 4);
    p.value = {3.0f, -2.0f, 1.0f, 0.5f};
    nn::Adam opt({&p}, {.learning_rate = 0.1, .grad_clip = 0.0});
    for (int step = 0; step < 300; ++step) {
        opt.zero_grad();
        for (std::size_t i = 0; i < 4; ++i) p.grad[i] = 2.0f * p.value[i];
        opt.step();
    }
    for (float v : p.value) CHECK(std::abs(v) < 0.05f);

    const auto flat = nn::snapshot({&p});
    p.value.assign(4, 9.0f);
    nn::restore({&p}, flat);
    CHECK(p.value == flat);
}

TEST_CASE("unet output for a sample does not depend on the rest of the batch") {
    ConditionalUNet net(tiny_unet(true), 28);
    Rng rng(29);
    const auto z = random_vec(rng, 5 * 64);
    const auto cond = random_vec(rng, 5 * 3);
    const std::vector<int> t{3, 30, 300, 900, 1};
    const auto batched = net.forward(z, 5, t, cond, nullptr);
    for (int i = 0; i < 5; ++i) {
        const auto one = net.forward(std::span(z).subspan(i * 64, 64), 1, std::span(t).subspan(i, 1),
                                     std::span(cond).subspan(i * 3, 3), nullptr);
        CHECK(std::equal(one.begin(), one.end(), batched.begin() + i * 64));
    }
}
