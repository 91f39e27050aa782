#include "conpure/purification.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "conpure/checkpoint.hpp"
#include "conpure/error.hpp"
#include "conpure/hashing.hpp"

namespace conpure {
namespace {

double keys(double t) {
    constexpr double a = -0.5;
    t = std::abs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
    return 0.0;
}

// Source coordinate of an output pixel centre, in input pixel units.
double source_coord(int out_index, int in_size, int out_size) {
    return (out_index + 0.5) * static_cast<double>(in_size) / out_size - 0.5;
}

struct Query {
    // One (output pixel, input neighbour) pair with a non-zero blend weight.
    int out_index;
    int ny, nx;
    double dy, dx;
    double weight;
};

std::vector<Query> neighbour_queries(int in_h, int in_w, int out_h, int out_w, const std::vector<int>& out_pixels) {
    std::vector<Query> q;
    q.reserve(out_pixels.size() * 4);
    for (int p : out_pixels) {
        const int oy = p / out_w;
        const int ox = p % out_w;
        const double cy = std::clamp(source_coord(oy, in_h, out_h), 0.0, static_cast<double>(in_h - 1));
        const double cx = std::clamp(source_coord(ox, in_w, out_w), 0.0, static_cast<double>(in_w - 1));
        const int y0 = static_cast<int>(std::floor(cy));
        const int x0 = static_cast<int>(std::floor(cx));
        const double wy = cy - y0;
        const double wx = cx - x0;
        const int ys[2] = {y0, std::min(y0 + 1, in_h - 1)};
        const int xs[2] = {x0, std::min(x0 + 1, in_w - 1)};
        const double wys[2] = {1.0 - wy, wy};
        const double wxs[2] = {1.0 - wx, wx};
        for (int a = 0; a < 2; ++a) {
            for (int b = 0; b < 2; ++b) {
                const double w = wys[a] * wxs[b];
                if (w == 0.0) continue;
                q.push_back({p, ys[a], xs[b], cy - ys[a], cx - xs[b], w});
            }
        }
    }
    return q;
}

}  // namespace

std::string to_string(CRKind kind) { return kind == CRKind::liif ? "liif" : "bicubic"; }

CRKind cr_kind_from_string(const std::string& s) {
    if (s == "liif") return CRKind::liif;
    if (s == "bicubic") return CRKind::bicubic;
    throw ConfigError("unknown CR kind '" + s + "'");
}

nlohmann::json CRConfig::to_json() const {
    return {{"kind", to_string(kind)},
            {"patch", patch},
            {"hidden", hidden},
            {"learning_rate", learning_rate},
            {"batch_images", batch_images},
            {"samples_per_image", samples_per_image},
            {"seed", seed}};
}

CRConfig CRConfig::from_json(const nlohmann::json& j) {
    CRConfig c;
    c.kind = cr_kind_from_string(j.value("kind", to_string(c.kind)));
    c.patch = j.value("patch", c.patch);
    c.hidden = j.value("hidden", c.hidden);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_images = j.value("batch_images", c.batch_images);
    c.samples_per_image = j.value("samples_per_image", c.samples_per_image);
    c.seed = j.value("seed", c.seed);
    return c;
}

Image bicubic_resize(const Image& image, int out_height, int out_width) {
    if (out_height < 1 || out_width < 1 || image.empty()) throw ShapeError("bicubic_resize: empty size");
    const int h = image.height();
    const int w = image.width();
    Image out(out_height, out_width);
    for (int oy = 0; oy < out_height; ++oy) {
        const double cy = source_coord(oy, h, out_height);
        const int y0 = static_cast<int>(std::floor(cy));
        const double ty = cy - y0;
        double wy[4];
        for (int k = 0; k < 4; ++k) wy[k] = keys(ty - (k - 1));
        for (int ox = 0; ox < out_width; ++ox) {
            const double cx = source_coord(ox, w, out_width);
            const int x0 = static_cast<int>(std::floor(cx));
            const double tx = cx - x0;
            double acc = 0.0;
            for (int a = 0; a < 4; ++a) {
                if (wy[a] == 0.0) continue;
                const int yy = std::clamp(y0 + a - 1, 0, h - 1);
                for (int b = 0; b < 4; ++b) {
                    const double wx = keys(tx - (b - 1));
                    if (wx == 0.0) continue;
                    acc += wy[a] * wx * image(yy, std::clamp(x0 + b - 1, 0, w - 1));
                }
            }
            out(oy, ox) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
        }
    }
    return out;
}

CRModel::CRModel(CRConfig config) : config_(config) {
    if (config_.patch < 1 || config_.patch % 2 == 0) throw ConfigError("CR patch size must be odd and >= 1");
    if (config_.hidden < 1) throw ConfigError("CR hidden width must be >= 1");
    Rng rng(mix_seed(config_.seed ^ 0xc4c4ULL));
    l1_ = nn::Linear("cr.l1", feature_dim(), config_.hidden, rng);
    l2_ = nn::Linear("cr.l2", config_.hidden, config_.hidden, rng);
    l3_ = nn::Linear("cr.l3", config_.hidden, 1, rng, 0.1f);
}

std::vector<nn::Param*> CRModel::params() {
    std::vector<nn::Param*> out;
    l1_.collect(out);
    l2_.collect(out);
    l3_.collect(out);
    return out;
}

std::vector<const nn::Param*> CRModel::params() const {
    auto p = const_cast<CRModel*>(this)->params();
    return {p.begin(), p.end()};
}

namespace {

std::vector<float> build_features(const Image& in, const std::vector<Query>& qs, int patch, double cell_h,
                                  double cell_w) {
    const int r = patch / 2;
    const int fd = patch * patch + 4;
    std::vector<float> f(qs.size() * static_cast<std::size_t>(fd));
    for (std::size_t i = 0; i < qs.size(); ++i) {
        float* row = f.data() + i * fd;
        int k = 0;
        for (int dy = -r; dy <= r; ++dy) {
            const int yy = std::clamp(qs[i].ny + dy, 0, in.height() - 1);
            for (int dx = -r; dx <= r; ++dx) {
                row[k++] = in(yy, std::clamp(qs[i].nx + dx, 0, in.width() - 1)) - 0.5f;
            }
        }
        row[k++] = static_cast<float>(qs[i].dy);
        row[k++] = static_cast<float>(qs[i].dx);
        row[k++] = static_cast<float>(cell_h);
        row[k++] = static_cast<float>(cell_w);
    }
    return f;
}

}  // namespace

Image CRModel::apply(const Image& input, int out_height, int out_width) const {
    if (config_.kind == CRKind::bicubic) return bicubic_resize(input, out_height, out_width);
    if (out_height < 1 || out_width < 1 || input.empty()) throw ShapeError("CR apply: empty size");
    std::vector<int> pixels(static_cast<std::size_t>(out_height) * out_width);
    std::iota(pixels.begin(), pixels.end(), 0);
    const auto qs = neighbour_queries(input.height(), input.width(), out_height, out_width, pixels);
    const auto feats = build_features(input, qs, config_.patch, static_cast<double>(input.height()) / out_height,
                                      static_cast<double>(input.width()) / out_width);
    const int n = static_cast<int>(qs.size());
    auto h = l1_.forward(feats, n);
    nn::silu_inplace(h);
    h = l2_.forward(h, n);
    nn::silu_inplace(h);
    const auto res = l3_.forward(h, n);
    std::vector<double> acc(pixels.size(), 0.0);
    for (std::size_t i = 0; i < qs.size(); ++i) {
        acc[qs[i].out_index] += qs[i].weight * (static_cast<double>(input(qs[i].ny, qs[i].nx)) + res[i]);
    }
    Image out(out_height, out_width);
    auto px = out.pixels();
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(std::clamp(acc[i], 0.0, 1.0));
    return out;
}

double CRModel::train_step(const std::vector<std::pair<const Image*, const Image*>>& batch, Rng& rng,
                           nn::Adam& opt) {
    if (config_.kind == CRKind::bicubic || batch.empty()) return 0.0;
    std::vector<float> feats;
    std::vector<float> centers, weights, targets;
    std::vector<int> owner;  // query index -> target slot
    int slot = 0;
    for (const auto& [in, tgt] : batch) {
        const int oh = tgt->height();
        const int ow = tgt->width();
        std::vector<int> pixels;
        for (int s = 0; s < config_.samples_per_image; ++s) pixels.push_back(rng.uniform_int(0, oh * ow - 1));
        const auto qs = neighbour_queries(in->height(), in->width(), oh, ow, pixels);
        const auto f = build_features(*in, qs, config_.patch, static_cast<double>(in->height()) / oh,
                                      static_cast<double>(in->width()) / ow);
        feats.insert(feats.end(), f.begin(), f.end());
        // Queries come out grouped by output pixel in the order of `pixels`.
        std::size_t qi = 0;
        for (int p : pixels) {
            while (qi < qs.size() && qs[qi].out_index == p) {
                centers.push_back((*in)(qs[qi].ny, qs[qi].nx));
                weights.push_back(static_cast<float>(qs[qi].weight));
                owner.push_back(slot);
                ++qi;
            }
            targets.push_back(tgt->pixels()[static_cast<std::size_t>(p)]);
            ++slot;
        }
    }
    const int n = static_cast<int>(owner.size());
    auto h1 = l1_.forward(feats, n);
    auto a1 = h1;
    nn::silu_inplace(a1);
    auto h2 = l2_.forward(a1, n);
    auto a2 = h2;
    nn::silu_inplace(a2);
    const auto res = l3_.forward(a2, n);

    std::vector<double> pred(targets.size(), 0.0);
    for (int i = 0; i < n; ++i) pred[owner[i]] += weights[i] * (static_cast<double>(centers[i]) + res[i]);
    double loss = 0.0;
    std::vector<double> dpred(targets.size());
    for (std::size_t k = 0; k < targets.size(); ++k) {
        const double d = pred[k] - targets[k];
        loss += d * d;
        dpred[k] = 2.0 * d / static_cast<double>(targets.size());
    }
    loss /= static_cast<double>(targets.size());
    if (!std::isfinite(loss)) throw DivergenceError("CR training loss is not finite");

    opt.zero_grad();
    std::vector<float> dres(n);
    for (int i = 0; i < n; ++i) dres[i] = static_cast<float>(weights[i] * dpred[owner[i]]);
    auto da2 = l3_.backward(a2, dres, n, true);
    for (std::size_t i = 0; i < da2.size(); ++i) da2[i] *= nn::silu_grad(h2[i]);
    auto da1 = l2_.backward(a1, da2, n, true);
    for (std::size_t i = 0; i < da1.size(); ++i) da1[i] *= nn::silu_grad(h1[i]);
    l1_.backward(feats, da1, n, true);
    opt.step();
    return loss;
}

std::string CRModel::checksum() const {
    std::string acc = config_.to_json().dump() + std::to_string(epochs_trained_);
    for (const auto* p : params()) acc += sha256_hex(std::span<const float>(p->value));
    return sha256_hex(acc);
}

void CRModel::save(const std::filesystem::path& path) const {
    Checkpoint ck;
    ck.metadata = {{"kind", "cr"}, {"config", config_.to_json()}, {"epochs_trained", epochs_trained_},
                   {"checksum", checksum()}};
    for (const auto* p : params()) ck.arrays.push_back({p->name, p->value});
    save_checkpoint(path, ck);
}

CRModel CRModel::load(const std::filesystem::path& path) {
    const Checkpoint ck = load_checkpoint(path);
    if (ck.metadata.value("kind", std::string()) != "cr") throw IoError(path.string() + ": not a CR checkpoint");
    CRModel m(CRConfig::from_json(ck.metadata.at("config")));
    for (auto* p : m.params()) {
        const auto& a = ck.array(p->name);
        if (a.data.size() != p->value.size()) throw IoError(path.string() + ": size mismatch for '" + p->name + "'");
        p->value = a.data;
    }
    m.epochs_trained_ = ck.metadata.value("epochs_trained", 0);
    return m;
}

std::vector<CRPair> make_cr_pairs(const std::vector<Image>& images, double noise_budget, int input_size,
                                  std::uint64_t seed) {
    if (input_size < 1) throw ConfigError("CR input size must be >= 1");
    Rng rng(mix_seed(seed ^ 0x9a125ULL));
    std::vector<CRPair> pairs;
    pairs.reserve(images.size());
    for (const auto& img : images) {
        CRPair p;
        p.target = img;
        p.input = (input_size == img.height() && input_size == img.width())
                      ? img
                      : bicubic_resize(img, input_size, input_size);
        const double amp = rng.uniform(0.0, noise_budget);
        for (auto& v : p.input.pixels()) v = static_cast<float>(v + rng.uniform(-amp, amp));
        quantize_8bit(p.input);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

CRTrainLog train_cr(CRModel& model, const std::vector<CRPair>& pairs, int epochs) {
    CRTrainLog log;
    if (epochs < 0) throw ConfigError("train_cr: negative epoch count");
    if (epochs == 0 || model.config().kind == CRKind::bicubic) return log;
    if (pairs.empty()) throw ConfigError("train_cr: no training pairs");
    nn::AdamConfig ac;
    ac.learning_rate = model.config().learning_rate;
    nn::Adam opt(model.params(), ac);
    Rng rng(mix_seed(model.config().seed ^ 0x7a1aULL));
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t bs = static_cast<std::size_t>(std::max(1, model.config().batch_images));
    for (int e = 0; e < epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        double total = 0.0;
        int steps = 0;
        for (std::size_t s = 0; s < order.size(); s += bs) {
            std::vector<std::pair<const Image*, const Image*>> batch;
            for (std::size_t k = s; k < std::min(order.size(), s + bs); ++k) {
                batch.emplace_back(&pairs[order[k]].input, &pairs[order[k]].target);
            }
            total += model.train_step(batch, rng, opt);
            ++steps;
        }
        log.epoch_losses.push_back(total / steps);
    }
    model.mark_epochs(epochs);
    return log;
}

void PurifyConfig::validate(const NoiseSchedule& schedule) const {
    if (depth < 0 || depth > schedule.t_max()) {
        throw ConfigError("purification depth " + std::to_string(depth) + " outside [0, " +
                          std::to_string(schedule.t_max()) + "]");
    }
    if (batch_size < 1) throw ConfigError("purification batch size must be >= 1");
}

nlohmann::json PurifyConfig::to_json() const {
    return {{"depth", depth},
            {"use_cr", use_cr},
            {"xi_mode", to_string(xi_mode)},
            {"seed", seed},
            {"concept_scale", concept_scale},
            {"batch_size", batch_size}};
}

PurifyConfig PurifyConfig::from_json(const nlohmann::json& j) {
    PurifyConfig c;
    c.depth = j.value("depth", c.depth);
    c.use_cr = j.value("use_cr", c.use_cr);
    c.xi_mode = xi_mode_from_string(j.value("xi_mode", to_string(c.xi_mode)));
    c.seed = j.value("seed", c.seed);
    c.concept_scale = j.value("concept_scale", c.concept_scale);
    c.batch_size = j.value("batch_size", c.batch_size);
    return c;
}

std::vector<Latent> purify_latents(const NoisePredictor& predictor, const std::vector<Latent>& z0,
                                   const NoiseSchedule& schedule, const PurifyConfig& config,
                                   std::optional<double> clip) {
    config.validate(schedule);
    if (config.depth == 0) return z0;
    std::vector<Latent> zt;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < z0.size(); ++i) {
        const std::uint64_t s = config.seed + i;
        Rng rng(mix_seed(s));
        Latent noise(z0[i].shape());
        rng.fill_normal(noise.values());
        zt.push_back(forward_closed(z0[i], config.depth, schedule, noise));
        seeds.push_back(mix_seed(s ^ 0x5eed5eedULL));
    }
    ChainOptions options;
    options.xi_mode = config.xi_mode;
    options.batch_size = config.batch_size;
    options.clip = clip;
    return reverse_chain(predictor, schedule, std::move(zt), config.depth, seeds, options);
}

std::vector<Latent> purify_latents(const ToyT2IModel& model, const std::vector<Latent>& z0,
                                   const std::vector<float>& cond, const NoiseSchedule& schedule,
                                   const PurifyConfig& config) {
    if (cond.size() != static_cast<std::size_t>(model.embedding_dim())) {
        throw ShapeError("purify: condition size does not match the model");
    }
    NoisePredictor pred = [&model, &cond](const std::vector<Latent>& z, std::span<const int> t) {
        return model.predict_noise(z, t, cond);
    };
    return purify_latents(pred, z0, schedule, config, latent_clip(model));
}

namespace {

Latent prepare(const ToyT2IModel& model, const CRModel* cr, const Image& image, const PurifyConfig& config) {
    if (config.use_cr) {
        if (cr == nullptr) throw ConfigError("purify: use_cr is set but no CR model was given");
        if (!cr->trained()) throw ConfigError("purify: CR model is untrained");
        const int s = model.config().image_size;
        return model.encode(cr->apply(image, s, s));
    }
    return model.encode(image);
}

}  // namespace

Image purify(const ToyT2IModel& model, const CRModel* cr, const Image& image, const ConceptEmbedding& embedding,
             const NoiseSchedule& schedule, const PurifyConfig& config) {
    config.validate(schedule);
    const auto cond = concept_condition(model, embedding.vector, config.concept_scale);
    const auto z = purify_latents(model, {prepare(model, cr, image, config)}, cond, schedule, config);
    return model.decode(z.front());
}

ImageGroup purify_group(const ToyT2IModel& model, const CRModel* cr, const ImageGroup& group,
                        const ConceptEmbedding& embedding, const NoiseSchedule& schedule, const PurifyConfig& config) {
    config.validate(schedule);
    const auto cond = concept_condition(model, embedding.vector, config.concept_scale);
    std::vector<Latent> z0;
    for (const auto& gi : group.images) {
        try {
            z0.push_back(prepare(model, cr, gi.image, config));
        } catch (const Error& e) {
            throw Error("group " + group.name + ", image " + gi.name + ": " + e.what());
        }
    }
    const auto z = purify_latents(model, z0, cond, schedule, config);
    ImageGroup out = group;
    for (std::size_t i = 0; i < out.images.size(); ++i) out.images[i].image = model.decode(z[i]);
    return out;
}

}  // namespace conpure
