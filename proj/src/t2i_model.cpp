#include "conpure/t2i_model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "conpure/checkpoint.hpp"
#include "conpure/error.hpp"
#include "conpure/hashing.hpp"

namespace conpure {

std::string photo_prompt(const std::string& word) { return "a photo of " + word; }

// ---------------------------------------------------------------- TextEncoder

TextEncoder::TextEncoder(int dim, std::uint64_t seed) : dim_(dim) {
    if (dim < 1) throw ConfigError("embedding dim must be >= 1");
    vocab_ = {"a", "photo", "of"};
    for (const auto& c : shape_classes()) vocab_.push_back(c);
    vocab_.push_back(kPlaceholderToken);
    table_ = nn::Param("text.table", vocab_.size() * static_cast<std::size_t>(dim));
    Rng rng(seed ^ 0x7e47e47eULL);
    rng.fill_normal(std::span<float>(table_.value));
    // The placeholder row is unused; keep it zero so it never leaks into anything.
    std::fill_n(table_.value.begin() + static_cast<std::ptrdiff_t>(placeholder_id()) * dim, dim, 0.0f);
}

int TextEncoder::token_id(const std::string& token) const {
    auto it = std::find(vocab_.begin(), vocab_.end(), token);
    if (it == vocab_.end()) throw ConfigError("unknown token '" + token + "'");
    return static_cast<int>(it - vocab_.begin());
}

std::vector<int> TextEncoder::class_token_ids() const {
    std::vector<int> ids;
    for (const auto& c : shape_classes()) ids.push_back(token_id(c));
    return ids;
}

std::vector<int> TextEncoder::tokenize(std::string_view prompt) const {
    std::istringstream ss{std::string(prompt)};
    std::vector<int> ids;
    std::string word;
    while (ss >> word) ids.push_back(token_id(word));
    if (ids.empty()) throw ConfigError("empty prompt");
    return ids;
}

std::span<const float> TextEncoder::token_embedding(int id) const {
    if (id < 0 || id >= static_cast<int>(vocab_.size())) throw ConfigError("token id out of range");
    return std::span<const float>(table_.value).subspan(static_cast<std::size_t>(id) * dim_, dim_);
}

std::vector<float> TextEncoder::embed(std::span<const int> ids, const std::vector<float>* override) const {
    if (ids.empty()) throw ConfigError("empty token sequence");
    std::vector<double> acc(dim_, 0.0);
    for (int id : ids) {
        std::span<const float> row;
        if (id == placeholder_id()) {
            if (override == nullptr) throw ConfigError("prompt uses S* but no concept vector was supplied");
            if (override->size() != static_cast<std::size_t>(dim_)) {
                throw ConfigError("concept vector has size " + std::to_string(override->size()) + ", expected " +
                                  std::to_string(dim_));
            }
            row = *override;
        } else {
            row = token_embedding(id);
        }
        for (int k = 0; k < dim_; ++k) acc[k] += row[k];
    }
    std::vector<float> out(dim_);
    for (int k = 0; k < dim_; ++k) out[k] = static_cast<float>(acc[k] / static_cast<double>(ids.size()));
    return out;
}

void TextEncoder::accumulate_grad(std::span<const int> ids, std::span<const float> dpooled) {
    const float inv = 1.0f / static_cast<float>(ids.size());
    for (int id : ids) {
        if (id == placeholder_id()) continue;
        float* g = table_.grad.data() + static_cast<std::size_t>(id) * dim_;
        for (int k = 0; k < dim_; ++k) g[k] += dpooled[k] * inv;
    }
}

// ---------------------------------------------------------------- Autoencoder

std::string to_string(AutoencoderKind kind) {
    return kind == AutoencoderKind::identity ? "identity" : "downsample2";
}

AutoencoderKind autoencoder_kind_from_string(const std::string& s) {
    if (s == "identity") return AutoencoderKind::identity;
    if (s == "downsample2") return AutoencoderKind::downsample2;
    throw ConfigError("unknown autoencoder kind '" + s + "'");
}

Autoencoder::Autoencoder(AutoencoderKind kind, int image_size, std::uint64_t seed)
    : kind_(kind), image_size_(image_size) {
    if (image_size < 2 || (kind == AutoencoderKind::downsample2 && image_size % 2 != 0)) {
        throw ConfigError("unsupported image size for autoencoder");
    }
    if (kind == AutoencoderKind::downsample2) {
        Rng rng(seed ^ 0xae0ae0ULL);
        enc1_ = nn::Conv2d("ae.enc1", 4, 16, 3, rng);
        enc2_ = nn::Conv2d("ae.enc2", 16, 4, 3, rng, 0.05f);
        dec1_ = nn::Conv2d("ae.dec1", 4, 16, 3, rng);
        dec2_ = nn::Conv2d("ae.dec2", 16, 4, 3, rng, 0.05f);
    }
}

std::vector<int> Autoencoder::latent_shape() const {
    if (kind_ == AutoencoderKind::identity) return {1, image_size_, image_size_};
    return {4, image_size_ / 2, image_size_ / 2};
}

std::vector<nn::Param*> Autoencoder::params() {
    std::vector<nn::Param*> out;
    if (kind_ == AutoencoderKind::downsample2) {
        enc1_.collect(out);
        enc2_.collect(out);
        dec1_.collect(out);
        dec2_.collect(out);
    }
    return out;
}

std::vector<const nn::Param*> Autoencoder::params() const {
    auto p = const_cast<Autoencoder*>(this)->params();
    return {p.begin(), p.end()};
}

Latent Autoencoder::encode(const Image& image) const {
    if (image.height() != image_size_ || image.width() != image_size_) {
        throw ShapeError("encode expects " + std::to_string(image_size_) + "x" + std::to_string(image_size_) +
                         " images, got " + std::to_string(image.height()) + "x" + std::to_string(image.width()));
    }
    Latent z(latent_shape());
    const auto px = image.pixels();
    if (kind_ == AutoencoderKind::identity) {
        for (std::size_t i = 0; i < px.size(); ++i) z[i] = 2.0 * static_cast<double>(px[i]) - 1.0;
        return z;
    }
    nn::Act x(1, 1, image_size_, image_size_);
    for (std::size_t i = 0; i < px.size(); ++i) x.data[i] = 2.0f * px[i] - 1.0f;
    nn::Act a = nn::pixel_unshuffle(x);
    nn::Act r = enc2_.forward(nn::silu(enc1_.forward(a, nullptr)), nullptr);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<double>(a.data[i] + r.data[i]);
    return z;
}

Image Autoencoder::decode(const Latent& z) const {
    if (z.shape() != latent_shape()) {
        throw ShapeError("decode expects latent " + shape_string(latent_shape()) + ", got " + shape_string(z.shape()));
    }
    Image img(image_size_, image_size_);
    auto px = img.pixels();
    if (kind_ == AutoencoderKind::identity) {
        for (std::size_t i = 0; i < px.size(); ++i) {
            px[i] = static_cast<float>(std::clamp((z[i] + 1.0) * 0.5, 0.0, 1.0));
        }
        return img;
    }
    const int h = image_size_ / 2;
    nn::Act zz(4, 1, h, h);
    for (std::size_t i = 0; i < z.size(); ++i) zz.data[i] = static_cast<float>(z[i]);
    nn::Act q = dec2_.forward(nn::silu(dec1_.forward(zz, nullptr)), nullptr);
    nn::add_inplace(zz, q);
    nn::Act y = nn::pixel_shuffle(zz);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::clamp((y.data[i] + 1.0f) * 0.5f, 0.0f, 1.0f);
    return img;
}

double Autoencoder::train_step(const std::vector<const Image*>& batch, nn::Adam* optimizer) {
    if (kind_ == AutoencoderKind::identity || batch.empty()) return 0.0;
    const int n = static_cast<int>(batch.size());
    const int s = image_size_;
    nn::Act x(1, n, s, s);
    for (int i = 0; i < n; ++i) {
        const auto px = batch[static_cast<std::size_t>(i)]->pixels();
        for (std::size_t k = 0; k < px.size(); ++k) x.data[static_cast<std::size_t>(i) * s * s + k] = 2.0f * px[k] - 1.0f;
    }
    nn::ConvCache ce1, ce2, cd1, cd2;
    nn::Act a = nn::pixel_unshuffle(x);
    nn::Act h1 = enc1_.forward(a, &ce1);
    nn::Act r = enc2_.forward(nn::silu(h1), &ce2);
    nn::Act z = a;
    nn::add_inplace(z, r);
    nn::Act g1 = dec1_.forward(z, &cd1);
    nn::Act q = dec2_.forward(nn::silu(g1), &cd2);
    nn::Act b = z;
    nn::add_inplace(b, q);
    nn::Act y = nn::pixel_shuffle(b);

    // Loss in pixel units: out = (y + 1) / 2, target = (x + 1) / 2.
    double loss = 0.0;
    nn::Act dy(1, n, s, s);
    const double count = static_cast<double>(y.data.size());
    for (std::size_t i = 0; i < y.data.size(); ++i) {
        const double diff = 0.5 * (static_cast<double>(y.data[i]) - x.data[i]);
        loss += diff * diff;
        dy.data[i] = static_cast<float>(diff / count);  // d/dy of mean(diff^2) = 2 * diff * 0.5 / count
    }
    loss /= count;
    if (!std::isfinite(loss)) throw DivergenceError("autoencoder loss is not finite");
    if (optimizer == nullptr) return loss;

    optimizer->zero_grad();
    nn::Act db = nn::pixel_unshuffle(dy);
    nn::Act dz = db;
    nn::Act ds2 = dec2_.backward(db, cd2, true);
    nn::add_inplace(dz, dec1_.backward(nn::silu_backward(g1, ds2), cd1, true));
    nn::Act ds1 = enc2_.backward(dz, ce2, true);
    enc1_.backward(nn::silu_backward(h1, ds1), ce1, true);
    optimizer->step();
    return loss;
}

// ---------------------------------------------------------------- T2IConfig

UNetConfig T2IConfig::unet_config() const {
    UNetConfig u;
    if (autoencoder == AutoencoderKind::identity) {
        u.latent_channels = 1;
        u.latent_size = image_size;
        u.space_to_depth = true;
    } else {
        u.latent_channels = 4;
        u.latent_size = image_size / 2;
        u.space_to_depth = false;
    }
    u.base_channels = base_channels;
    u.mid_channels = mid_channels;
    u.cond_dim = embedding_dim;
    return u;
}

nlohmann::json T2IConfig::to_json() const {
    return {{"image_size", image_size},
            {"autoencoder", to_string(autoencoder)},
            {"embedding_dim", embedding_dim},
            {"base_channels", base_channels},
            {"mid_channels", mid_channels},
            {"seed", seed}};
}

T2IConfig T2IConfig::from_json(const nlohmann::json& j) {
    T2IConfig c;
    c.image_size = j.value("image_size", c.image_size);
    c.autoencoder = autoencoder_kind_from_string(j.value("autoencoder", std::string("identity")));
    c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.mid_channels = j.value("mid_channels", c.mid_channels);
    c.seed = j.value("seed", c.seed);
    return c;
}

// ---------------------------------------------------------------- ToyT2IModel

ToyT2IModel::ToyT2IModel(T2IConfig config)
    : config_(config),
      text_(config.embedding_dim, config.seed),
      ae_(config.autoencoder, config.image_size, config.seed),
      unet_(config.unet_config(), config.seed) {}

std::size_t ToyT2IModel::latent_size() const { return Tensor<double>::element_count(latent_shape()); }

Latent ToyT2IModel::encode(const Image& image) const { return ae_.encode(image); }
Image ToyT2IModel::decode(const Latent& z) const { return ae_.decode(z); }

std::vector<float> ToyT2IModel::embed_prompt(std::string_view prompt, const std::vector<float>* override) const {
    return text_.embed(text_.tokenize(prompt), override);
}

std::vector<Latent> ToyT2IModel::predict_noise(const std::vector<Latent>& z, std::span<const int> t,
                                               std::span<const float> cond) const {
    const int n = static_cast<int>(z.size());
    if (n == 0) return {};
    if (t.size() != z.size()) throw ShapeError("predict_noise: one timestep per latent required");
    const std::size_t d = static_cast<std::size_t>(embedding_dim());
    std::vector<float> cond_rows;
    if (cond.size() == d) {
        cond_rows.reserve(d * n);
        for (int i = 0; i < n; ++i) cond_rows.insert(cond_rows.end(), cond.begin(), cond.end());
    } else if (cond.size() == d * static_cast<std::size_t>(n)) {
        cond_rows.assign(cond.begin(), cond.end());
    } else {
        throw ShapeError("predict_noise: condition size " + std::to_string(cond.size()) + " does not match");
    }
    const std::size_t m = latent_size();
    std::vector<float> flat(m * n);
    for (int i = 0; i < n; ++i) {
        if (z[i].shape() != latent_shape()) throw ShapeError("predict_noise: latent shape mismatch");
        for (std::size_t k = 0; k < m; ++k) flat[i * m + k] = static_cast<float>(z[i][k]);
    }
    const std::vector<float> eps = unet_.forward(flat, n, t, cond_rows, nullptr);
    std::vector<Latent> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        Latent e(latent_shape());
        for (std::size_t k = 0; k < m; ++k) e[k] = eps[i * m + k];
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<nn::Param*> ToyT2IModel::params() {
    std::vector<nn::Param*> out{&text_.table()};
    for (auto* p : ae_.params()) out.push_back(p);
    for (auto* p : unet_.params()) out.push_back(p);
    return out;
}

std::vector<const nn::Param*> ToyT2IModel::params() const {
    auto p = const_cast<ToyT2IModel*>(this)->params();
    return {p.begin(), p.end()};
}

std::string ToyT2IModel::checksum() const {
    std::string acc = config_.to_json().dump();
    for (const auto* p : params()) {
        acc += p->name;
        acc += sha256_hex(std::span<const float>(p->value));
    }
    return sha256_hex(acc);
}

void ToyT2IModel::save(const std::filesystem::path& path) const {
    Checkpoint ck;
    ck.metadata = {{"kind", "toy_t2i"}, {"config", config_.to_json()}, {"trained_steps", trained_steps_},
                   {"checksum", checksum()}};
    for (const auto* p : params()) ck.arrays.push_back({p->name, p->value});
    save_checkpoint(path, ck);
}

ToyT2IModel ToyT2IModel::load(const std::filesystem::path& path) {
    const Checkpoint ck = load_checkpoint(path);
    if (ck.metadata.value("kind", std::string()) != "toy_t2i") {
        throw IoError(path.string() + ": not a text-to-image checkpoint");
    }
    ToyT2IModel model(T2IConfig::from_json(ck.metadata.at("config")));
    for (auto* p : model.params()) {
        const auto& a = ck.array(p->name);
        if (a.data.size() != p->value.size()) {
            throw IoError(path.string() + ": size mismatch for '" + p->name + "'");
        }
        p->value = a.data;
    }
    model.trained_steps_ = ck.metadata.value("trained_steps", 0L);
    return model;
}

// ---------------------------------------------------------------- training

nlohmann::json T2ITrainConfig::to_json() const {
    return {{"steps", steps},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"warmup_steps", warmup_steps},
            {"final_lr_fraction", final_lr_fraction},
            {"ema_decay", ema_decay},
            {"grad_clip", grad_clip},
            {"autoencoder_steps", autoencoder_steps},
            {"seed", seed}};
}

T2ITrainConfig T2ITrainConfig::from_json(const nlohmann::json& j) {
    T2ITrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.final_lr_fraction = j.value("final_lr_fraction", c.final_lr_fraction);
    c.ema_decay = j.value("ema_decay", c.ema_decay);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.autoencoder_steps = j.value("autoencoder_steps", c.autoencoder_steps);
    c.seed = j.value("seed", c.seed);
    return c;
}

namespace {

double window_mean(const std::vector<double>& v, double fraction, bool leading) {
    if (v.empty()) return std::nan("");
    const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(fraction * v.size())));
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += leading ? v[i] : v[v.size() - 1 - i];
    return s / static_cast<double>(n);
}

double lr_scale(int step, const T2ITrainConfig& c) {
    if (step < c.warmup_steps) return static_cast<double>(step + 1) / c.warmup_steps;
    const double span = std::max(1, c.steps - c.warmup_steps);
    const double p = std::min(1.0, (step - c.warmup_steps) / span);
    return c.final_lr_fraction + (1.0 - c.final_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

}  // namespace

double TrainingLog::leading_mean(double fraction) const { return window_mean(losses, fraction, true); }
double TrainingLog::trailing_mean(double fraction) const { return window_mean(losses, fraction, false); }

TrainingLog train_t2i(ToyT2IModel& model, const ShapeGroupCorpus& corpus, const NoiseSchedule& schedule,
                      const T2ITrainConfig& config, const ProgressFn& progress) {
    TrainingLog log;
    std::vector<const GroupImage*> items;
    std::vector<int> classes;
    for (const auto& g : corpus.groups) {
        for (const auto& gi : g.images) {
            items.push_back(&gi);
            classes.push_back(g.class_id);
        }
    }
    if (items.empty()) throw ConfigError("train_t2i: corpus is empty");
    if (config.steps < 0 || config.batch_size < 1) throw ConfigError("train_t2i: invalid step or batch count");
    if (config.steps == 0) return log;

    Rng rng(mix_seed(config.seed));

    if (model.autoencoder().kind() != AutoencoderKind::identity && config.autoencoder_steps > 0) {
        nn::AdamConfig ac;
        ac.learning_rate = 2e-3;
        nn::Adam opt(model.autoencoder().params(), ac);
        for (int s = 0; s < config.autoencoder_steps; ++s) {
            std::vector<const Image*> batch;
            for (int b = 0; b < config.batch_size; ++b) {
                batch.push_back(&items[rng.uniform_int(0, static_cast<int>(items.size()) - 1)]->image);
            }
            log.autoencoder_losses.push_back(model.autoencoder().train_step(batch, &opt));
        }
    }

    std::vector<Latent> latents;
    latents.reserve(items.size());
    for (const auto* gi : items) latents.push_back(model.encode(gi->image));

    std::vector<std::vector<int>> prompts;
    for (const auto& c : shape_classes()) prompts.push_back(model.text().tokenize(photo_prompt(c)));

    std::vector<nn::Param*> trainable{&model.text().table()};
    for (auto* p : model.unet().params()) trainable.push_back(p);
    nn::AdamConfig ac;
    ac.learning_rate = config.learning_rate;
    ac.grad_clip = config.grad_clip;
    nn::Adam opt(trainable, ac);
    std::vector<float> ema = nn::snapshot(trainable);

    const int n = config.batch_size;
    const std::size_t m = model.latent_size();
    const std::size_t d = static_cast<std::size_t>(model.embedding_dim());
    std::vector<float> zt(m * n), eps(m * n), cond(d * n), dout(m * n);
    std::vector<int> ts(n), idx(n);

    for (int step = 0; step < config.steps; ++step) {
        for (int i = 0; i < n; ++i) {
            idx[i] = rng.uniform_int(0, static_cast<int>(items.size()) - 1);
            ts[i] = rng.uniform_int(1, schedule.t_max());
            const double sa = std::sqrt(schedule.alpha_bar(ts[i]));
            const double sb = std::sqrt(1.0 - schedule.alpha_bar(ts[i]));
            const Latent& z0 = latents[idx[i]];
            for (std::size_t k = 0; k < m; ++k) {
                const double e = rng.normal();
                eps[i * m + k] = static_cast<float>(e);
                zt[i * m + k] = static_cast<float>(sa * z0[k] + sb * e);
            }
            const auto c = model.text().embed(prompts[classes[idx[i]]]);
            std::copy(c.begin(), c.end(), cond.begin() + static_cast<std::ptrdiff_t>(i * d));
        }
        UNetTape tape;
        const std::vector<float> pred = model.unet().forward(zt, n, ts, cond, &tape);
        double loss = 0.0;
        const double count = static_cast<double>(pred.size());
        for (std::size_t k = 0; k < pred.size(); ++k) {
            const double diff = static_cast<double>(pred[k]) - eps[k];
            loss += diff * diff;
            dout[k] = static_cast<float>(2.0 * diff / count);
        }
        loss /= count;
        if (!std::isfinite(loss)) {
            throw DivergenceError("denoiser loss became non-finite at step " + std::to_string(step) +
                                  "; lower the learning rate");
        }
        log.losses.push_back(loss);

        opt.zero_grad();
        const std::vector<float> dcond = model.unet().backward(dout, tape, true);
        for (int i = 0; i < n; ++i) {
            model.text().accumulate_grad(prompts[classes[idx[i]]],
                                         std::span<const float>(dcond).subspan(i * d, d));
        }
        opt.step(lr_scale(step, config));

        const double decay = std::min(config.ema_decay, (1.0 + step) / (10.0 + step));
        std::size_t off = 0;
        for (const auto* p : trainable) {
            for (float v : p->value) {
                ema[off] = static_cast<float>(decay * ema[off] + (1.0 - decay) * v);
                ++off;
            }
        }
        if (progress) progress(step, loss);
    }
    nn::restore(trainable, ema);
    model.set_trained_steps(model.trained_steps() + config.steps);
    return log;
}

// ---------------------------------------------------------------- sampling

std::string to_string(XiMode mode) { return mode == XiMode::stochastic ? "stochastic" : "zero"; }

XiMode xi_mode_from_string(const std::string& s) {
    if (s == "stochastic") return XiMode::stochastic;
    if (s == "zero") return XiMode::zero;
    throw ConfigError("unknown xi mode '" + s + "'");
}

namespace {

// Rewrites eps so that the implied z0 lies in [-clip, clip]; posterior_step then sees the clipped estimate.
void clip_prediction(const Latent& z_t, Latent& eps, int t, const NoiseSchedule& schedule, double clip) {
    const double ab = schedule.alpha_bar(t);
    const double sa = std::sqrt(ab);
    const double sb = std::sqrt(1.0 - ab);
    if (sb <= 0.0) return;
    for (std::size_t k = 0; k < eps.size(); ++k) {
        const double z0 = (z_t[k] - sb * eps[k]) / sa;
        const double c = std::clamp(z0, -clip, clip);
        if (c != z0) eps[k] = (z_t[k] - sa * c) / sb;
    }
}

}  // namespace

std::optional<double> latent_clip(const ToyT2IModel& model) {
    if (model.config().autoencoder == AutoencoderKind::identity) return 1.0;
    return std::nullopt;
}

std::vector<Latent> reverse_chain(const NoisePredictor& predictor, const NoiseSchedule& schedule, std::vector<Latent> z,
                                  int t_start, std::span<const std::uint64_t> seeds, const ChainOptions& options) {
    if (t_start < 0 || t_start > schedule.t_max()) throw ConfigError("reverse_chain: start step out of range");
    if (seeds.size() != z.size()) throw ConfigError("reverse_chain: one seed per latent required");
    const int batch_size = std::max(1, options.batch_size);
    for (std::size_t start = 0; start < z.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t stop = std::min(z.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<Latent> chunk(std::make_move_iterator(z.begin() + static_cast<std::ptrdiff_t>(start)),
                                  std::make_move_iterator(z.begin() + static_cast<std::ptrdiff_t>(stop)));
        std::vector<Rng> rngs;
        for (std::size_t i = start; i < stop; ++i) rngs.emplace_back(seeds[i]);
        std::vector<int> ts(chunk.size());
        for (int t = t_start; t >= 1; --t) {
            std::fill(ts.begin(), ts.end(), t);
            auto eps = predictor(chunk, ts);
            if (eps.size() != chunk.size()) throw ShapeError("reverse_chain: predictor returned the wrong batch size");
            for (std::size_t i = 0; i < chunk.size(); ++i) {
                if (options.clip) clip_prediction(chunk[i], eps[i], t, schedule, *options.clip);
                if (options.xi_mode == XiMode::stochastic) {
                    Latent xi(chunk[i].shape());
                    rngs[i].fill_normal(xi.values());
                    chunk[i] = posterior_step(chunk[i], t, eps[i], schedule, xi).z_prev;
                } else {
                    chunk[i] = posterior_step(chunk[i], t, eps[i], schedule).z_prev;
                }
            }
        }
        std::move(chunk.begin(), chunk.end(), z.begin() + static_cast<std::ptrdiff_t>(start));
    }
    return z;
}

std::vector<Latent> reverse_chain(const ToyT2IModel& model, const NoiseSchedule& schedule, std::vector<Latent> z,
                                  int t_start, std::span<const float> cond, std::span<const std::uint64_t> seeds,
                                  const ChainOptions& options) {
    const std::size_t d = static_cast<std::size_t>(model.embedding_dim());
    const bool per_sample = cond.size() != d;
    if (per_sample && cond.size() != d * z.size()) throw ShapeError("reverse_chain: condition size mismatch");
    if (!per_sample) {
        const std::vector<float> shared(cond.begin(), cond.end());
        NoisePredictor pred = [&model, shared](const std::vector<Latent>& zs, std::span<const int> ts) {
            return model.predict_noise(zs, ts, shared);
        };
        return reverse_chain(pred, schedule, std::move(z), t_start, seeds, options);
    }
    // Per-sample conditions: chain each batch-sized slice with its own condition rows.
    const int batch_size = std::max(1, options.batch_size);
    std::vector<Latent> out;
    for (std::size_t start = 0; start < z.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t stop = std::min(z.size(), start + static_cast<std::size_t>(batch_size));
        const std::vector<float> rows(cond.begin() + static_cast<std::ptrdiff_t>(start * d),
                                      cond.begin() + static_cast<std::ptrdiff_t>(stop * d));
        NoisePredictor pred = [&model, rows](const std::vector<Latent>& zs, std::span<const int> ts) {
            return model.predict_noise(zs, ts, rows);
        };
        std::vector<Latent> chunk(z.begin() + static_cast<std::ptrdiff_t>(start),
                                  z.begin() + static_cast<std::ptrdiff_t>(stop));
        auto done = reverse_chain(pred, schedule, std::move(chunk), t_start, seeds.subspan(start, stop - start), options);
        std::move(done.begin(), done.end(), std::back_inserter(out));
    }
    return out;
}

std::vector<Image> generate(const ToyT2IModel& model, const NoiseSchedule& schedule, std::span<const float> cond,
                            int n_samples, std::uint64_t seed) {
    if (n_samples < 0) throw ConfigError("generate: negative sample count");
    std::vector<Latent> z;
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < n_samples; ++i) {
        const std::uint64_t s = mix_seed(seed) + static_cast<std::uint64_t>(i);
        Rng init(mix_seed(s ^ 0x1217a7e5ULL));
        Latent zi(model.latent_shape());
        init.fill_normal(zi.values());
        z.push_back(std::move(zi));
        seeds.push_back(s);
    }
    ChainOptions options;
    options.clip = latent_clip(model);
    const auto z0 = reverse_chain(model, schedule, std::move(z), schedule.t_max(), cond, seeds, options);
    std::vector<Image> out;
    for (const auto& zi : z0) out.push_back(model.decode(zi));
    return out;
}

}  // namespace conpure
