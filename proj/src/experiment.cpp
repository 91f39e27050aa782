#include "conpure/experiment.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "conpure/error.hpp"
#include "conpure/hashing.hpp"
#include "conpure/io.hpp"

namespace conpure {
namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(AblationMode mode) {
    switch (mode) {
        case AblationMode::source_only: return "source_only";
        case AblationMode::no_inversion: return "no_inversion";
        case AblationMode::none_concept: return "none_concept";
        case AblationMode::learned_concept: return "learned_concept";
    }
    return "unknown";
}

AblationMode ablation_mode_from_string(const std::string& s) {
    for (auto m : {AblationMode::source_only, AblationMode::no_inversion, AblationMode::none_concept,
                   AblationMode::learned_concept}) {
        if (to_string(m) == s) return m;
    }
    throw ConfigError("unknown mode '" + s + "' (source_only, no_inversion, none_concept, learned_concept)");
}

// ---------------------------------------------------------------------------------------------
// Configuration

namespace {

json corpus_json(const CorpusConfig& c) {
    json j = c.options.to_json();
    j["seed"] = c.seed;
    j["groups"] = c.groups;
    j["group_size"] = c.group_size;
    return j;
}

CorpusConfig corpus_from(const json& j) {
    CorpusConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.groups = j.at("groups").get<int>();
    c.group_size = j.at("group_size").get<int>();
    c.options = CorpusOptions::from_json(j);
    return c;
}

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
    for (const auto& [k, v] : j.items()) {
        const std::string key = prefix.empty() ? k : prefix + "." + k;
        if (v.is_object()) {
            flatten(v, key, out);
        } else {
            out.emplace_back(key, v);
        }
    }
}

json::json_pointer pointer_of(const std::string& key) {
    std::string p = "/" + key;
    std::replace(p.begin(), p.end(), '.', '/');
    return json::json_pointer(p);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// Parses `text` into a value of the same JSON type as `like`.
json parse_value(const std::string& key, const std::string& raw, const json& like) {
    std::string text = trim(raw);
    const auto fail = [&](const std::string& what) {
        return ConfigError("config key '" + key + "': " + what + " '" + text + "'");
    };
    if (like.is_string()) {
        if (text.size() >= 2 && text.front() == '"' && text.back() == '"') text = text.substr(1, text.size() - 2);
        return text;
    }
    if (like.is_boolean()) {
        if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
        if (text == "false" || text == "0" || text == "no" || text == "off") return false;
        throw fail("expected a boolean, got");
    }
    std::size_t used = 0;
    try {
        if (like.is_number_unsigned()) {
            if (!text.empty() && text.front() == '-') throw fail("expected a non-negative integer, got");
            const auto v = std::stoull(text, &used, 0);
            if (used == text.size()) return static_cast<std::uint64_t>(v);
        } else if (like.is_number_integer()) {
            const auto v = std::stoll(text, &used);
            if (used == text.size()) return v;
        } else if (like.is_number_float()) {
            // Ratios such as 16/255 are accepted for real-valued keys.
            const auto slash = text.find('/');
            if (slash != std::string::npos) {
                std::size_t used_den = 0;
                const std::string num = trim(text.substr(0, slash));
                const std::string den = trim(text.substr(slash + 1));
                const double a = std::stod(num, &used);
                const double b = std::stod(den, &used_den);
                if (used == num.size() && used_den == den.size() && b != 0.0) return a / b;
            } else {
                const auto v = std::stod(text, &used);
                if (used == text.size()) return v;
            }
        }
    } catch (const std::logic_error&) {
    }
    throw fail("cannot parse value");
}

// Numbers are interchangeable unless a fractional or negative value would land in an integer key.
bool same_kind(const json& given, const json& like) {
    if (given.is_number() && like.is_number()) {
        if (like.is_number_float()) return true;
        const double v = given.get<double>();
        return std::floor(v) == v && !(like.is_number_unsigned() && v < 0);
    }
    return given.type() == like.type();
}

}  // namespace

json ExperimentConfig::to_json() const {
    json cr_j = cr.to_json();
    cr_j["epochs"] = cr_epochs;
    cr_j["input_size"] = cr_input_size;
    cr_j["noise_budget"] = cr_noise_budget;
    return {{"corpus", corpus_json(corpus)},
            {"train_corpus", corpus_json(train_corpus)},
            {"degradation", degradation.to_json()},
            {"schedule",
             {{"t_max", schedule.t_max},
              {"beta_start", schedule.beta_start},
              {"beta_end", schedule.beta_end},
              {"shape", conpure::to_string(schedule.shape)}}},
            {"model", model.to_json()},
            {"t2i", t2i.to_json()},
            {"cr", cr_j},
            {"concept", concept_config.to_json()},
            {"purify", purify.to_json()},
            {"mode", conpure::to_string(mode)},
            {"detector", {{"kind", detector}, {"command", detector_command}}},
            {"output_dir", output_dir},
            {"cache_dir", cache_dir},
            {"workers", workers}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    json merged = ExperimentConfig{}.to_json();
    std::vector<std::pair<std::string, json>> given;
    flatten(j, "", given);
    for (const auto& [key, value] : given) {
        const auto ptr = pointer_of(key);
        if (!merged.contains(ptr) || merged.at(ptr).is_object()) throw ConfigError("unknown config key '" + key + "'");
        if (!same_kind(value, merged.at(ptr))) throw ConfigError("config key '" + key + "' has the wrong type");
        merged[ptr] = value;
    }
    try {
        ExperimentConfig c;
        c.corpus = corpus_from(merged.at("corpus"));
        c.train_corpus = corpus_from(merged.at("train_corpus"));
        c.degradation = DegradationSpec::from_json(merged.at("degradation"));
        const auto& s = merged.at("schedule");
        c.schedule.t_max = s.at("t_max").get<int>();
        c.schedule.beta_start = s.at("beta_start").get<double>();
        c.schedule.beta_end = s.at("beta_end").get<double>();
        c.schedule.shape = beta_shape_from_string(s.at("shape").get<std::string>());
        c.model = T2IConfig::from_json(merged.at("model"));
        c.t2i = T2ITrainConfig::from_json(merged.at("t2i"));
        const auto& crj = merged.at("cr");
        c.cr = CRConfig::from_json(crj);
        c.cr_epochs = crj.at("epochs").get<int>();
        c.cr_input_size = crj.at("input_size").get<int>();
        c.cr_noise_budget = crj.at("noise_budget").get<double>();
        c.concept_config = ConceptConfig::from_json(merged.at("concept"));
        c.purify = PurifyConfig::from_json(merged.at("purify"));
        c.mode = ablation_mode_from_string(merged.at("mode").get<std::string>());
        c.detector = merged.at("detector").at("kind").get<std::string>();
        c.detector_command = merged.at("detector").at("command").get<std::string>();
        c.output_dir = merged.at("output_dir").get<std::string>();
        c.cache_dir = merged.at("cache_dir").get<std::string>();
        c.workers = merged.at("workers").get<int>();
        return c;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid experiment config: ") + e.what());
    }
}

void ExperimentConfig::set(const std::vector<std::string>& assignments) {
    json j = to_json();
    for (const auto& a : assignments) {
        const auto eq = a.find('=');
        if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + a + "'");
        const std::string key = trim(a.substr(0, eq));
        const auto ptr = pointer_of(key);
        if (key.empty() || !j.contains(ptr) || j.at(ptr).is_object()) {
            throw ConfigError("unknown config key '" + key + "'");
        }
        j[ptr] = parse_value(key, a.substr(eq + 1), j.at(ptr));
    }
    *this = from_json(j);
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
    ExperimentConfig c;
    std::istringstream in(text);
    std::string line;
    int number = 0;
    std::vector<std::string> assignments;
    while (std::getline(in, line)) {
        ++number;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.find('=') == std::string::npos) {
            throw ConfigError("config line " + std::to_string(number) + ": expected 'key = value'");
        }
        try {
            c.set({line});
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(number) + ": " + e.what());
        }
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
    return parse(read_text(path));
}

std::vector<std::string> env_overridable_keys() {
    std::vector<std::pair<std::string, json>> flat;
    flatten(ExperimentConfig{}.to_json(), "", flat);
    std::vector<std::string> keys;
    for (const auto& [key, v] : flat) {
        const auto leaf = key.substr(key.rfind('.') == std::string::npos ? 0 : key.rfind('.') + 1);
        if (leaf == "seed" || leaf.ends_with("_dir")) keys.push_back(key);
    }
    return keys;
}

void ExperimentConfig::apply_env(const std::function<std::optional<std::string>(const std::string&)>& getenv) {
    std::vector<std::string> assignments;
    for (const auto& key : env_overridable_keys()) {
        std::string var = "CONPURE_" + key;
        for (auto& ch : var) ch = ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
        if (auto v = getenv(var)) assignments.push_back(key + "=" + *v);
    }
    if (!assignments.empty()) set(assignments);
}

void ExperimentConfig::apply_env() {
    apply_env([](const std::string& name) -> std::optional<std::string> {
        const char* v = std::getenv(name.c_str());
        if (v == nullptr) return std::nullopt;
        return std::string(v);
    });
}

std::string ExperimentConfig::to_text() const {
    std::vector<std::pair<std::string, json>> flat;
    flatten(to_json(), "", flat);
    std::ostringstream out;
    for (const auto& [key, v] : flat) {
        out << key << " = " << (v.is_string() ? v.get<std::string>() : v.dump()) << "\n";
    }
    return out.str();
}

void ExperimentConfig::validate() const {
    const auto check = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError(what);
    };
    check(corpus.groups >= 1 && corpus.group_size >= 1, "corpus needs at least one group of one image");
    check(train_corpus.groups >= 1 && train_corpus.group_size >= 1, "training corpus needs at least one image");
    check(model.image_size == corpus.options.image_size && model.image_size == train_corpus.options.image_size,
          "model.image_size must equal corpus.image_size and train_corpus.image_size");
    check(cr_epochs >= 0, "cr.epochs must be >= 0");
    check(cr_input_size >= 1, "cr.input_size must be >= 1");
    check(cr_noise_budget >= 0.0 && cr_noise_budget <= 1.0, "cr.noise_budget must lie in [0, 1]");
    check(concept_config.steps >= 0, "concept.steps must be >= 0");
    check(t2i.steps >= 0, "t2i.steps must be >= 0");
    check(workers >= 1, "workers must be >= 1");
    check(detector == "template" || detector == "external", "detector.kind must be template or external");
    check(detector != "external" || !detector_command.empty(), "detector.command is required for external");
    check(!output_dir.empty(), "output_dir must not be empty");
    degradation.validate();
    try {
        const auto sched = schedule.make();
        purify.validate(sched);
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
}

// ---------------------------------------------------------------------------------------------
// Logging and locking

JsonLogger::JsonLogger(const fs::path& path, bool echo) : path_(path), echo_(echo) {
    if (!path_.empty() && path_.has_parent_path()) fs::create_directories(path_.parent_path());
}

void JsonLogger::log(const std::string& event, json fields) {
    if (!fields.is_object()) fields = json{{"value", fields}};
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    fields["event"] = event;
    fields["seconds"] = std::round(seconds * 1000.0) / 1000.0;
    const std::string line = fields.dump();
    std::lock_guard<std::mutex> guard(mutex_);
    if (!path_.empty()) {
        std::ofstream out(path_, std::ios::app);
        out << line << "\n";
    }
    if (echo_) std::cerr << line << "\n";
}

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    for (int attempt = 0; attempt < 2; ++attempt) {
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd >= 0) {
            const std::string pid = std::to_string(::getpid()) + "\n";
            const auto written = ::write(fd, pid.data(), pid.size());
            ::close(fd);
            if (written != static_cast<ssize_t>(pid.size())) throw IoError("cannot write lock file " + path_.string());
            return;
        }
        if (errno != EEXIST) throw IoError("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
        long owner = 0;
        {
            std::ifstream in(path_);
            in >> owner;
        }
        const bool alive = owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno == EPERM);
        if (alive) {
            throw Error("output directory " + dir.string() + " is locked by process " + std::to_string(owner));
        }
        fs::remove(path_);
    }
    throw Error("could not acquire lock on " + dir.string());
}

DirectoryLock::~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

// ---------------------------------------------------------------------------------------------
// Hashing

std::string content_key(const json& j) { return sha256_hex(j.dump()).substr(0, 16); }

std::string corpus_hash(const ShapeGroupCorpus& corpus) {
    std::string bytes = "size " + std::to_string(corpus.image_size) + "\n";
    for (const auto& g : corpus.groups) {
        bytes += "group " + g.name + " " + std::to_string(g.class_id) + "\n";
        for (const auto& gi : g.images) {
            bytes += "image " + gi.name + (gi.degraded ? " 1\n" : " 0\n");
            const auto px = gi.image.pixels();
            bytes.append(reinterpret_cast<const char*>(px.data()), px.size_bytes());
            const auto bits = gi.mask.bits();
            bytes.append(reinterpret_cast<const char*>(bits.data()), bits.size());
        }
    }
    return sha256_hex(bytes);
}

namespace {

std::string path_hash(const fs::path& p) {
    if (fs::is_regular_file(p)) return sha256_file(p);
    if (!fs::is_directory(p)) throw IoError("cannot hash missing artifact " + p.string());
    std::vector<std::pair<std::string, std::string>> entries;
    for (const auto& e : fs::recursive_directory_iterator(p)) {
        if (e.is_regular_file()) entries.emplace_back(fs::relative(e.path(), p).generic_string(), sha256_file(e.path()));
    }
    std::sort(entries.begin(), entries.end());
    std::string listing;
    for (const auto& [name, h] : entries) listing += name + " " + h + "\n";
    return sha256_hex(listing);
}

// Writes through a temporary sibling so an interrupted run never leaves a half-written cache entry.
template <typename Write>
void write_atomically(const fs::path& target, Write&& write) {
    fs::path tmp = target;
    tmp += ".tmp" + std::to_string(::getpid());
    std::error_code ec;
    fs::remove_all(tmp, ec);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    write(tmp);
    fs::remove_all(target, ec);
    fs::rename(tmp, target);
}

template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
    for (std::size_t w = 0; w < count; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Pipeline

Pipeline::Pipeline(ExperimentConfig config, fs::path workdir, JsonLogger* log)
    : config_(std::move(config)), workdir_(std::move(workdir)), log_(log), schedule_(config_.schedule.make()) {
    config_.validate();
}

Pipeline::~Pipeline() = default;

void Pipeline::log(const std::string& event, json fields) {
    if (log_) log_->log(event, std::move(fields));
}

void Pipeline::record(const fs::path& path, const std::string& role) {
    const std::string rel = fs::relative(path, workdir_).generic_string();
    const std::string h = path_hash(path);
    for (auto& a : artifacts_) {
        if (a.path == rel) {
            a.sha256 = h;
            return;
        }
    }
    artifacts_.push_back({rel, role, h});
}

fs::path Pipeline::cache_path(const std::string& stage, const json& key) const {
    return workdir_ / config_.cache_dir / (stage + "-" + content_key(key));
}

const ShapeGroupCorpus& Pipeline::corpus() {
    if (!corpus_) {
        const auto& c = config_.corpus;
        const json key = {{"corpus", corpus_json(c)}, {"fraction", config_.degradation.fraction}};
        const fs::path dir = cache_path("corpus", key);
        if (fs::exists(dir / "manifest.json")) {
            corpus_ = load_corpus(dir);
        } else {
            log("generate_corpus", {{"groups", c.groups}, {"group_size", c.group_size}, {"seed", c.seed}});
            corpus_ = generate_corpus(c.seed, c.groups, c.group_size, config_.degradation.fraction, c.options);
            write_atomically(dir, [&](const fs::path& tmp) { save_corpus(*corpus_, tmp); });
        }
        record(dir, "input");
    }
    return *corpus_;
}

const ShapeGroupCorpus& Pipeline::train_corpus() {
    if (!train_corpus_) {
        const auto& c = config_.train_corpus;
        const json key = {{"corpus", corpus_json(c)}, {"fraction", 0.0}};
        const fs::path dir = cache_path("corpus", key);
        if (fs::exists(dir / "manifest.json")) {
            train_corpus_ = load_corpus(dir);
        } else {
            log("generate_corpus", {{"groups", c.groups}, {"group_size", c.group_size}, {"seed", c.seed}});
            train_corpus_ = generate_corpus(c.seed, c.groups, c.group_size, 0.0, c.options);
            write_atomically(dir, [&](const fs::path& tmp) { save_corpus(*train_corpus_, tmp); });
        }
        record(dir, "input");
    }
    return *train_corpus_;
}

const ToyT2IModel& Pipeline::model() {
    if (!model_) {
        const auto& train = train_corpus();
        const json key = {{"model", config_.model.to_json()},
                          {"train", config_.t2i.to_json()},
                          {"schedule", schedule_.hash()},
                          {"corpus", corpus_hash(train)}};
        fs::path path = cache_path("t2i", key);
        path += ".ckpt";
        if (fs::exists(path)) {
            model_ = ToyT2IModel::load(path);
        } else {
            log("train_t2i_start", {{"steps", config_.t2i.steps}, {"images", train.image_count()}});
            ToyT2IModel m(config_.model);
            double window = 0.0;
            int count = 0;
            const auto progress = [&](int step, double loss) {
                window += loss;
                ++count;
                if ((step + 1) % 500 == 0) {
                    log("train_t2i_progress", {{"step", step + 1}, {"loss", window / count}});
                    window = 0.0;
                    count = 0;
                }
            };
            const auto tlog = train_t2i(m, train, schedule_, config_.t2i, progress);
            log("train_t2i_done", {{"leading_loss", tlog.empty() ? 0.0 : tlog.leading_mean()},
                                   {"trailing_loss", tlog.empty() ? 0.0 : tlog.trailing_mean()}});
            write_atomically(path, [&](const fs::path& tmp) { m.save(tmp); });
            model_ = std::move(m);
        }
        record(path, "input");
    }
    return *model_;
}

const CRModel& Pipeline::cr() {
    if (!cr_) {
        if (config_.cr.kind == CRKind::bicubic) {
            cr_ = CRModel(config_.cr);
            return *cr_;
        }
        const auto& train = train_corpus();
        const json key = {{"cr", config_.cr.to_json()},
                          {"epochs", config_.cr_epochs},
                          {"input_size", config_.cr_input_size},
                          {"noise_budget", config_.cr_noise_budget},
                          {"corpus", corpus_hash(train)}};
        fs::path path = cache_path("cr", key);
        path += ".ckpt";
        if (fs::exists(path)) {
            cr_ = CRModel::load(path);
        } else {
            std::vector<Image> images;
            for (const auto& g : train.groups) {
                for (const auto& gi : g.images) images.push_back(gi.image);
            }
            const auto pairs = make_cr_pairs(images, config_.cr_noise_budget, config_.cr_input_size, config_.cr.seed);
            CRModel m(config_.cr);
            const auto tl = train_cr(m, pairs, config_.cr_epochs);
            log("train_cr_done", {{"epochs", config_.cr_epochs}, {"epoch_losses", tl.epoch_losses}});
            write_atomically(path, [&](const fs::path& tmp) { m.save(tmp); });
            cr_ = std::move(m);
        }
        record(path, "input");
    }
    return *cr_;
}

const CoSaliencyDetector& Pipeline::detector() {
    if (config_.detector == "template") return template_;
    if (!external_) {
        external_ = std::make_unique<ExternalDetector>(config_.detector_command,
                                                       workdir_ / config_.output_dir / "scratch");
    }
    return *external_;
}

const ShapeGroupCorpus& Pipeline::degraded() {
    if (!degraded_) {
        const auto& clean = corpus();
        const json key = {{"corpus", corpus_hash(clean)}, {"spec", config_.degradation.to_json()}, {"surrogate", "template"}};
        const fs::path dir = cache_path("degraded", key);
        if (fs::exists(dir / "manifest.json")) {
            degraded_ = load_corpus(dir);
        } else {
            log("degrade_start", {{"kind", conpure::to_string(config_.degradation.kind)}});
            ShapeGroupCorpus out;
            out.image_size = clean.image_size;
            out.groups.resize(clean.groups.size());
            std::vector<std::exception_ptr> errors(clean.groups.size());
            parallel_for(clean.groups.size(), config_.workers, [&](std::size_t i) {
                try {
                    out.groups[i] = degrade_group(clean.groups[i], config_.degradation, &template_);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            });
            for (const auto& e : errors) {
                if (e) std::rethrow_exception(e);
            }
            write_atomically(dir, [&](const fs::path& tmp) { save_corpus(out, tmp); });
            degraded_ = std::move(out);
        }
        record(dir, "input");
    }
    return *degraded_;
}

std::map<std::string, ConceptEmbedding> Pipeline::learn_concepts(const ShapeGroupCorpus& source) {
    const auto& m = model();
    const json key = {{"model", m.checksum()},
                      {"corpus", corpus_hash(source)},
                      {"concept", config_.concept_config.to_json()},
                      {"schedule", schedule_.hash()}};
    fs::path path = cache_path("concepts", key);
    path += ".json";
    std::map<std::string, ConceptEmbedding> out;
    if (fs::exists(path)) {
        out = load_concepts(path);
    } else {
        log("learn_concepts_start", {{"groups", source.groups.size()}, {"steps", config_.concept_config.steps}});
        std::vector<ConceptEmbedding> learned(source.groups.size());
        std::vector<std::exception_ptr> errors(source.groups.size());
        parallel_for(source.groups.size(), config_.workers, [&](std::size_t i) {
            try {
                learned[i] = learn_concept(m, source.groups[i], schedule_, config_.concept_config);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        });
        for (const auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
        for (std::size_t i = 0; i < learned.size(); ++i) out[source.groups[i].name] = std::move(learned[i]);
        write_atomically(path, [&](const fs::path& tmp) { save_concepts(tmp, out); });
    }
    record(path, "input");
    return out;
}

const std::map<std::string, ConceptEmbedding>& Pipeline::concepts() {
    if (!concepts_) concepts_ = learn_concepts(degraded());
    return *concepts_;
}

// ---------------------------------------------------------------------------------------------
// Experiment

json mode_stages(AblationMode mode, const PurifyConfig& purify) {
    switch (mode) {
        case AblationMode::source_only:
            return {{"cr", false}, {"diffusion", false}, {"concept", nullptr}};
        case AblationMode::no_inversion:
            return {{"cr", purify.use_cr}, {"diffusion", false}, {"concept", nullptr}};
        case AblationMode::none_concept:
            return {{"cr", purify.use_cr}, {"diffusion", true}, {"concept", "none"}};
        case AblationMode::learned_concept:
            return {{"cr", purify.use_cr}, {"diffusion", true}, {"concept", "learned"}};
    }
    return {};
}

ImageGroup process_group(Pipeline& pipeline, const ImageGroup& degraded) {
    const auto& cfg = pipeline.config();
    switch (cfg.mode) {
        case AblationMode::source_only:
            return degraded;
        case AblationMode::no_inversion: {
            ImageGroup out = degraded;
            if (cfg.purify.use_cr) {
                const auto& cr = pipeline.cr();
                for (auto& gi : out.images) gi.image = cr.apply(gi.image, gi.image.height(), gi.image.width());
            }
            return out;
        }
        case AblationMode::none_concept: {
            ConceptEmbedding none;
            none.vector.assign(static_cast<std::size_t>(pipeline.model().embedding_dim()), 0.0f);
            return purify_group(pipeline.model(), cfg.purify.use_cr ? &pipeline.cr() : nullptr, degraded, none,
                                pipeline.schedule(), cfg.purify);
        }
        case AblationMode::learned_concept: {
            const auto& concepts = pipeline.concepts();
            const auto it = concepts.find(degraded.name);
            if (it == concepts.end()) throw Error("no concept learned for group " + degraded.name);
            return purify_group(pipeline.model(), cfg.purify.use_cr ? &pipeline.cr() : nullptr, degraded, it->second,
                                pipeline.schedule(), cfg.purify);
        }
    }
    throw ConfigError("unknown mode");
}

ExperimentResult run_experiment(const ExperimentConfig& config, const fs::path& workdir, JsonLogger* log) {
    config.validate();
    const fs::path out = workdir / config.output_dir;
    DirectoryLock lock(out);
    JsonLogger local(out / "log.jsonl");
    JsonLogger* logger = log ? log : &local;
    logger->log("run_start", {{"mode", to_string(config.mode)}, {"output_dir", config.output_dir}});

    Pipeline p(config, workdir, logger);
    const json stages = mode_stages(config.mode, config.purify);
    const auto& degraded = p.degraded();
    // Resolve every shared input up front so the per-group loop only reads them.
    if (stages.at("diffusion").get<bool>()) p.model();
    if (stages.at("cr").get<bool>()) p.cr();
    if (config.mode == AblationMode::learned_concept) p.concepts();
    const auto& detector = p.detector();

    std::error_code ec;
    for (const char* sub : {"purified", "maps", "reports"}) fs::remove_all(out / sub, ec);

    const std::size_t n = degraded.groups.size();
    std::vector<std::optional<MetricsReport>> reports(n);
    std::vector<std::string> errors(n);
    const int workers = config.detector == "external" ? 1 : config.workers;
    parallel_for(n, workers, [&](std::size_t i) {
        const auto& g = degraded.groups[i];
        try {
            const ImageGroup processed = process_group(p, g);
            const auto maps = detect_group(detector, processed);
            MetricsReport r = evaluate(maps, processed);
            r.label = g.name;
            if (config.mode != AblationMode::source_only) save_group(processed, out / "purified" / g.name);
            for (std::size_t k = 0; k < maps.size(); ++k) {
                write_pgm(out / "maps" / g.name / (processed.images[k].name + ".pgm"), maps[k].prob);
            }
            write_json(out / "reports" / (g.name + ".json"), reports_to_json({r}));
            reports[i] = std::move(r);
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    });

    ExperimentResult result;
    for (std::size_t i = 0; i < n; ++i) {
        if (reports[i]) {
            result.group_reports.push_back(*reports[i]);
        } else {
            result.failures.push_back({degraded.groups[i].name, errors[i]});
            logger->log("group_failed", {{"group", degraded.groups[i].name}, {"error", errors[i]}});
        }
    }
    result.aggregate = aggregate(result.group_reports, to_string(config.mode));
    write_json(out / "report.json", reports_to_json({result.aggregate}));

    for (const char* sub : {"purified", "maps", "reports"}) {
        if (fs::exists(out / sub)) p.record(out / sub, "output");
    }
    p.record(out / "report.json", "output");

    json artifacts = json::array();
    for (const auto& a : p.artifacts()) artifacts.push_back({{"path", a.path}, {"role", a.role}, {"sha256", a.sha256}});
    json failures = json::array();
    for (const auto& f : result.failures) failures.push_back({{"group", f.group}, {"error", f.message}});
    json checksums = json::object();
    if (stages.at("diffusion").get<bool>()) checksums["model"] = p.model().checksum();
    if (stages.at("cr").get<bool>()) checksums["cr"] = p.cr().checksum();
    result.manifest = {{"schema", kManifestSchema},
                       {"config", config.to_json()},
                       {"mode", to_string(config.mode)},
                       {"stages", stages},
                       {"schedule_hash", p.schedule().hash()},
                       {"checksums", checksums},
                       {"seeds",
                        {{"corpus", config.corpus.seed},
                         {"train_corpus", config.train_corpus.seed},
                         {"degradation", config.degradation.seed},
                         {"model", config.model.seed},
                         {"t2i", config.t2i.seed},
                         {"cr", config.cr.seed},
                         {"concept", config.concept_config.seed},
                         {"purify", config.purify.seed}}},
                       {"artifacts", artifacts},
                       {"failures", failures},
                       {"failure_count", result.failures.size()},
                       {"group_count", n}};
    write_json(out / "manifest.json", result.manifest);
    logger->log("run_done", {{"mode", to_string(config.mode)},
                             {"failures", result.failures.size()},
                             {"adv_sr", result.aggregate.adv.sr ? json(*result.aggregate.adv.sr) : json(nullptr)}});
    return result;
}

// ---------------------------------------------------------------------------------------------
// Reports

ReportFormat report_format_from_string(const std::string& s) {
    if (s == "json") return ReportFormat::json;
    if (s == "table") return ReportFormat::table;
    if (s == "plot") return ReportFormat::plot;
    throw ConfigError("unknown report format '" + s + "' (json, table, plot)");
}

json reports_to_json(const std::vector<MetricsReport>& reports) {
    json arr = json::array();
    for (const auto& r : reports) arr.push_back(r.to_json());
    return {{"schema", kReportSchema}, {"reports", arr}};
}

std::vector<MetricsReport> reports_from_json(const json& j) {
    std::vector<MetricsReport> out;
    try {
        if (j.is_object() && j.contains("reports")) {
            for (const auto& r : j.at("reports")) out.push_back(MetricsReport::from_json(r));
        } else {
            out.push_back(MetricsReport::from_json(j));
        }
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed report: ") + e.what());
    }
    return out;
}

std::vector<std::string> validate_report_json(const json& j) {
    std::vector<std::string> errs;
    if (!j.is_object()) return {"document is not an object"};
    if (j.value("schema", std::string()) != kReportSchema) errs.push_back("schema must be " + std::string(kReportSchema));
    if (!j.contains("reports") || !j.at("reports").is_array()) {
        errs.push_back("reports must be an array");
        return errs;
    }
    const auto unit = [](const json& v) { return v.is_number() && v.get<double>() >= 0.0 && v.get<double>() <= 1.0; };
    std::size_t idx = 0;
    for (const auto& r : j.at("reports")) {
        const std::string at = "reports[" + std::to_string(idx++) + "]";
        if (!r.is_object()) {
            errs.push_back(at + " is not an object");
            continue;
        }
        if (!r.contains("label") || !r.at("label").is_string()) errs.push_back(at + ".label must be a string");
        if (!r.contains("splits") || !r.at("splits").is_object()) {
            errs.push_back(at + ".splits missing");
            continue;
        }
        std::map<std::string, std::size_t> counts;
        for (const char* split : {"avg", "adv", "clean"}) {
            const std::string sp = at + ".splits." + split;
            if (!r.at("splits").contains(split)) {
                errs.push_back(sp + " missing");
                continue;
            }
            const auto& s = r.at("splits").at(split);
            if (!s.contains("count") || !s.at("count").is_number_integer() || s.at("count").get<long long>() < 0) {
                errs.push_back(sp + ".count must be a non-negative integer");
                continue;
            }
            counts[split] = s.at("count").get<std::size_t>();
            for (const char* metric : {"SR", "AP", "F_beta", "MAE"}) {
                if (!s.contains(metric)) {
                    errs.push_back(sp + "." + metric + " missing");
                } else if (counts[split] == 0 ? !s.at(metric).is_null() : !unit(s.at(metric))) {
                    errs.push_back(sp + "." + metric + (counts[split] == 0 ? " must be null for an empty split"
                                                                            : " must be a number in [0, 1]"));
                }
            }
        }
        if (counts.size() == 3 && counts["adv"] + counts["clean"] != counts["avg"]) {
            errs.push_back(at + ": adv and clean counts do not sum to avg");
        }
        if (!r.contains("images") || !r.at("images").is_array()) {
            errs.push_back(at + ".images must be an array");
            continue;
        }
        if (counts.count("avg") && r.at("images").size() != counts["avg"]) {
            errs.push_back(at + ": images length differs from avg count");
        }
        for (const auto& im : r.at("images")) {
            if (!im.is_object() || !im.contains("group") || !im.contains("name") || !im.contains("degraded") ||
                !im.at("degraded").is_boolean()) {
                errs.push_back(at + ": image entry lacks group, name or degraded");
                continue;
            }
            for (const char* metric : {"IOU", "AP", "F_beta", "MAE"}) {
                if (!im.contains(metric) || !unit(im.at(metric))) {
                    errs.push_back(at + ": image " + im.value("name", std::string("?")) + " has a bad " + metric);
                }
            }
        }
    }
    return errs;
}

namespace {

std::string cell(const std::optional<double>& v) {
    if (!v) return "-";
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << *v;
    return s.str();
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char ch : s) {
        switch (ch) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += ch;
        }
    }
    return out;
}

}  // namespace

std::string render_table(const std::vector<MetricsReport>& reports) {
    std::size_t label_w = 6;
    for (const auto& r : reports) label_w = std::max(label_w, r.label.size());
    std::ostringstream out;
    const auto row = [&](const std::string& label, const std::string& split, const std::string& count,
                         const std::string& sr, const std::string& ap, const std::string& f, const std::string& mae) {
        out << std::left << std::setw(static_cast<int>(label_w) + 2) << label << std::setw(7) << split
            << std::setw(7) << count << std::setw(8) << sr << std::setw(8) << ap << std::setw(8) << f << mae << "\n";
    };
    row("method", "split", "count", "SR", "AP", "F_beta", "MAE");
    for (const auto& r : reports) {
        const std::pair<const char*, const SplitMetrics*> splits[] = {{"avg", &r.avg}, {"adv", &r.adv}, {"clean", &r.clean}};
        bool first = true;
        for (const auto& [name, s] : splits) {
            row(first ? r.label : "", name, std::to_string(s->count), cell(s->sr), cell(s->ap), cell(s->f_beta),
                cell(s->mae));
            first = false;
        }
    }
    return out.str();
}

std::string render_plot(const std::vector<MetricsReport>& reports) {
    const int bar = 18, gap = 24, left = 50, top = 30, height = 200;
    const int group_w = 3 * bar + gap;
    const int width = left + std::max<int>(1, static_cast<int>(reports.size())) * group_w + 20;
    const int total_h = top + height + 60;
    std::ostringstream s;
    s << std::fixed << std::setprecision(1);
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << total_h
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    s << "<text x=\"" << left << "\" y=\"16\">SR per method (avg / adv / clean)</text>\n";
    for (int k = 0; k <= 4; ++k) {
        const double y = top + height - k * height / 4.0;
        s << "<line x1=\"" << left << "\" x2=\"" << width - 10 << "\" y1=\"" << y << "\" y2=\"" << y
          << "\" stroke=\"#ddd\"/>\n";
        s << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << k * 0.25 << "</text>\n";
    }
    if (reports.empty()) {
        s << "<text x=\"" << left + 10 << "\" y=\"" << top + height / 2 << "\">no reports</text>\n";
    }
    const char* colors[] = {"#4c72b0", "#dd8452", "#55a868"};
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const auto& r = reports[i];
        const int x0 = left + static_cast<int>(i) * group_w + gap / 2;
        const std::optional<double> values[] = {r.avg.sr, r.adv.sr, r.clean.sr};
        for (int k = 0; k < 3; ++k) {
            if (!values[k]) continue;
            const double h = *values[k] * height;
            s << "<rect x=\"" << x0 + k * bar << "\" y=\"" << top + height - h << "\" width=\"" << bar - 2
              << "\" height=\"" << h << "\" fill=\"" << colors[k] << "\"/>\n";
        }
        s << "<text x=\"" << x0 + 1.5 * bar << "\" y=\"" << top + height + 16 << "\" text-anchor=\"middle\">"
          << xml_escape(r.label) << "</text>\n";
    }
    const char* names[] = {"avg", "adv", "clean"};
    for (int k = 0; k < 3; ++k) {
        const int x = left + k * 70;
        s << "<rect x=\"" << x << "\" y=\"" << top + height + 32 << "\" width=\"10\" height=\"10\" fill=\"" << colors[k]
          << "\"/><text x=\"" << x + 14 << "\" y=\"" << top + height + 41 << "\">" << names[k] << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

void emit_report(const std::vector<MetricsReport>& reports, ReportFormat format, const fs::path& out) {
    switch (format) {
        case ReportFormat::json: write_json(out, reports_to_json(reports)); return;
        case ReportFormat::table: write_text(out, render_table(reports)); return;
        case ReportFormat::plot: write_text(out, render_plot(reports)); return;
    }
}

}  // namespace conpure
