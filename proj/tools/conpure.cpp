// Command-line front end. Every path is resolved against --workdir.
//
// Exit codes: 0 success, 2 configuration error, 3 stage failure.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "conpure/concept_learning.hpp"
#include "conpure/corpus.hpp"
#include "conpure/cosod_metrics.hpp"
#include "conpure/degradations.hpp"
#include "conpure/detector.hpp"
#include "conpure/error.hpp"
#include "conpure/experiment.hpp"
#include "conpure/hashing.hpp"
#include "conpure/io.hpp"
#include "conpure/purification.hpp"
#include "conpure/t2i_model.hpp"

namespace fs = std::filesystem;
using namespace conpure;
using nlohmann::json;

namespace {

constexpr int kConfigError = 2;
constexpr int kStageFailure = 3;

struct Common {
    std::string workdir = ".";
    std::string config_file;
    std::vector<std::string> sets;
    bool quiet = false;

    fs::path at(const std::string& p) const { return fs::path(workdir) / p; }

    ExperimentConfig config() const {
        ExperimentConfig c = config_file.empty() ? ExperimentConfig{} : ExperimentConfig::load(at(config_file));
        c.apply_env();
        c.set(sets);
        c.validate();
        return c;
    }
};

std::string file_or_dir_hash(const fs::path& p) {
    if (fs::is_regular_file(p)) return sha256_file(p);
    if (fs::exists(p / "manifest.json")) return sha256_file(p / "manifest.json") + corpus_hash(load_corpus(p));
    throw IoError("missing input " + p.string());
}

// Stage outputs carry a sibling "<out>.key" file; a matching key means the output is current.
class Stamp {
public:
    Stamp(fs::path out, const json& inputs) : out_(std::move(out)), key_(content_key(inputs)) {
        key_path_ = out_;
        key_path_ += ".key";
    }
    bool current() const {
        return fs::exists(out_) && fs::exists(key_path_) && read_text(key_path_) == key_ + "\n";
    }
    void commit() const { write_text(key_path_, key_ + "\n"); }

private:
    fs::path out_;
    fs::path key_path_;
    std::string key_;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Concept-guided diffusion purification for co-salient object detection (toy scale)"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--workdir", common.workdir, "Directory all paths are relative to")->capture_default_str();
    app.add_option("--config", common.config_file, "Key = value experiment config file");
    app.add_option("--set", common.sets, "Override a config key (key=value), repeatable");
    app.add_flag("--quiet", common.quiet, "Do not echo log records to stderr");

    // Opened on first use, once --workdir is known.
    std::optional<JsonLogger> log_storage;
    const auto logger = [&]() -> JsonLogger& {
        if (!log_storage) log_storage.emplace(common.at("logs/conpure.jsonl"), !common.quiet);
        return *log_storage;
    };
    int exit_code = 0;

    auto* show = app.add_subcommand("show-config", "Print the effective configuration");
    show->callback([&] { std::cout << common.config().to_text(); });

    std::string out, corpus_dir, model_path, cr_path, concepts_path, maps_dir, label;
    bool train_split = false, none_concept = false;
    std::vector<std::string> groups;

    auto* make_corpus = app.add_subcommand("make-corpus", "Generate a synthetic shape-group corpus");
    make_corpus->add_option("--out", out, "Output directory")->required();
    make_corpus->add_flag("--train", train_split, "Use the train_corpus.* keys (no degraded flags)");
    make_corpus->callback([&] {
        const auto cfg = common.config();
        const auto& cc = train_split ? cfg.train_corpus : cfg.corpus;
        const double fraction = train_split ? 0.0 : cfg.degradation.fraction;
        Stamp stamp(common.at(out), {{"stage", "make-corpus"}, {"corpus", cfg.to_json()[train_split ? "train_corpus" : "corpus"]},
                                     {"fraction", fraction}});
        if (stamp.current()) return logger().log("cached", {{"stage", "make-corpus"}, {"out", out}});
        const auto corpus = generate_corpus(cc.seed, cc.groups, cc.group_size, fraction, cc.options);
        save_corpus(corpus, common.at(out));
        stamp.commit();
        logger().log("make_corpus", {{"out", out}, {"groups", corpus.groups.size()}, {"images", corpus.image_count()}});
    });

    auto* train_t2i_cmd = app.add_subcommand("train-t2i", "Train the toy text-to-image model");
    train_t2i_cmd->add_option("--corpus", corpus_dir, "Training corpus directory")->required();
    train_t2i_cmd->add_option("--out", out, "Checkpoint path")->required();
    train_t2i_cmd->callback([&] {
        const auto cfg = common.config();
        Stamp stamp(common.at(out), {{"stage", "train-t2i"},
                                     {"corpus", file_or_dir_hash(common.at(corpus_dir))},
                                     {"model", cfg.model.to_json()},
                                     {"train", cfg.t2i.to_json()},
                                     {"schedule", cfg.schedule.make().hash()}});
        if (stamp.current()) return logger().log("cached", {{"stage", "train-t2i"}, {"out", out}});
        const auto corpus = load_corpus(common.at(corpus_dir));
        ToyT2IModel model(cfg.model);
        const auto sched = cfg.schedule.make();
        const auto tlog = train_t2i(model, corpus, sched, cfg.t2i, [&](int step, double loss) {
            if ((step + 1) % 500 == 0) logger().log("train_t2i_progress", {{"step", step + 1}, {"loss", loss}});
        });
        model.save(common.at(out));
        stamp.commit();
        logger().log("train_t2i_done", {{"out", out}, {"checksum", model.checksum()},
                                       {"trailing_loss", tlog.empty() ? 0.0 : tlog.trailing_mean()}});
    });

    auto* train_cr_cmd = app.add_subcommand("train-cr", "Train the continuous-representation module");
    train_cr_cmd->add_option("--corpus", corpus_dir, "Training corpus directory")->required();
    train_cr_cmd->add_option("--out", out, "Checkpoint path")->required();
    train_cr_cmd->callback([&] {
        const auto cfg = common.config();
        Stamp stamp(common.at(out), {{"stage", "train-cr"},
                                     {"corpus", file_or_dir_hash(common.at(corpus_dir))},
                                     {"cr", cfg.to_json()["cr"]}});
        if (stamp.current()) return logger().log("cached", {{"stage", "train-cr"}, {"out", out}});
        const auto corpus = load_corpus(common.at(corpus_dir));
        std::vector<Image> images;
        for (const auto& g : corpus.groups) {
            for (const auto& gi : g.images) images.push_back(gi.image);
        }
        CRModel cr(cfg.cr);
        const auto pairs = make_cr_pairs(images, cfg.cr_noise_budget, cfg.cr_input_size, cfg.cr.seed);
        const auto tl = train_cr(cr, pairs, cfg.cr_epochs);
        cr.save(common.at(out));
        stamp.commit();
        logger().log("train_cr_done", {{"out", out}, {"epoch_losses", tl.epoch_losses}});
    });

    auto* degrade = app.add_subcommand("degrade", "Degrade the leading images of every group");
    degrade->add_option("--corpus", corpus_dir, "Clean corpus directory")->required();
    degrade->add_option("--out", out, "Output corpus directory")->required();
    degrade->callback([&] {
        const auto cfg = common.config();
        Stamp stamp(common.at(out), {{"stage", "degrade"},
                                     {"corpus", file_or_dir_hash(common.at(corpus_dir))},
                                     {"spec", cfg.degradation.to_json()}});
        if (stamp.current()) return logger().log("cached", {{"stage", "degrade"}, {"out", out}});
        const auto corpus = load_corpus(common.at(corpus_dir));
        TemplateDetector surrogate;
        ShapeGroupCorpus result;
        result.image_size = corpus.image_size;
        for (const auto& g : corpus.groups) result.groups.push_back(degrade_group(g, cfg.degradation, &surrogate));
        save_corpus(result, common.at(out));
        stamp.commit();
        logger().log("degrade", {{"out", out}, {"kind", to_string(cfg.degradation.kind)}});
    });

    auto* learn = app.add_subcommand("learn-concept", "Learn one concept embedding per group");
    learn->add_option("--model", model_path, "T2I checkpoint")->required();
    learn->add_option("--corpus", corpus_dir, "Corpus directory")->required();
    learn->add_option("--out", out, "Concepts JSON path")->required();
    learn->add_option("--group", groups, "Restrict to these groups (repeatable)");
    learn->callback([&] {
        const auto cfg = common.config();
        Stamp stamp(common.at(out), {{"stage", "learn-concept"},
                                     {"model", sha256_file(common.at(model_path))},
                                     {"corpus", file_or_dir_hash(common.at(corpus_dir))},
                                     {"concept", cfg.concept_config.to_json()},
                                     {"groups", groups}});
        if (stamp.current()) return logger().log("cached", {{"stage", "learn-concept"}, {"out", out}});
        const auto model = ToyT2IModel::load(common.at(model_path));
        const auto corpus = load_corpus(common.at(corpus_dir));
        const auto sched = cfg.schedule.make();
        std::map<std::string, ConceptEmbedding> concepts;
        for (const auto& g : corpus.groups) {
            if (!groups.empty() && std::find(groups.begin(), groups.end(), g.name) == groups.end()) continue;
            auto c = learn_concept(model, g, sched, cfg.concept_config);
            logger().log("concept", {{"group", g.name}, {"nearest", nearest_token(model, c.vector)},
                                    {"final_loss", c.final_loss ? json(*c.final_loss) : json(nullptr)}});
            concepts[g.name] = std::move(c);
        }
        save_concepts(common.at(out), concepts);
        stamp.commit();
    });

    auto* purify_cmd = app.add_subcommand("purify", "Purify every image of every group");
    purify_cmd->add_option("--model", model_path, "T2I checkpoint")->required();
    purify_cmd->add_option("--corpus", corpus_dir, "Corpus directory (usually degraded)")->required();
    purify_cmd->add_option("--out", out, "Output corpus directory")->required();
    purify_cmd->add_option("--concepts", concepts_path, "Concepts JSON from learn-concept");
    purify_cmd->add_option("--cr", cr_path, "CR checkpoint (required when purify.use_cr is true)");
    purify_cmd->add_flag("--none-concept", none_concept, "Condition on a zero concept vector");
    purify_cmd->callback([&] {
        const auto cfg = common.config();
        if (concepts_path.empty() == !none_concept) throw ConfigError("give exactly one of --concepts and --none-concept");
        if (cfg.purify.use_cr && cr_path.empty()) throw ConfigError("purify.use_cr is set but --cr was not given");
        json key = {{"stage", "purify"},
                    {"model", sha256_file(common.at(model_path))},
                    {"corpus", file_or_dir_hash(common.at(corpus_dir))},
                    {"purify", cfg.purify.to_json()},
                    {"schedule", cfg.schedule.make().hash()}};
        key["concepts"] = none_concept ? json("none") : json(sha256_file(common.at(concepts_path)));
        if (cfg.purify.use_cr) key["cr"] = sha256_file(common.at(cr_path));
        Stamp stamp(common.at(out), key);
        if (stamp.current()) return logger().log("cached", {{"stage", "purify"}, {"out", out}});
        const auto model = ToyT2IModel::load(common.at(model_path));
        const auto corpus = load_corpus(common.at(corpus_dir));
        std::optional<CRModel> cr;
        if (cfg.purify.use_cr) cr = CRModel::load(common.at(cr_path));
        std::map<std::string, ConceptEmbedding> concepts;
        if (!none_concept) concepts = load_concepts(common.at(concepts_path));
        const auto sched = cfg.schedule.make();
        ShapeGroupCorpus result;
        result.image_size = corpus.image_size;
        for (const auto& g : corpus.groups) {
            ConceptEmbedding c;
            if (none_concept) {
                c.vector.assign(static_cast<std::size_t>(model.embedding_dim()), 0.0f);
            } else {
                const auto it = concepts.find(g.name);
                if (it == concepts.end()) throw Error("no concept for group " + g.name);
                c = it->second;
            }
            result.groups.push_back(purify_group(model, cr ? &*cr : nullptr, g, c, sched, cfg.purify));
            logger().log("purify_group", {{"group", g.name}});
        }
        save_corpus(result, common.at(out));
        stamp.commit();
    });

    auto* detect = app.add_subcommand("detect", "Run the co-saliency detector on every group");
    detect->add_option("--corpus", corpus_dir, "Corpus directory")->required();
    detect->add_option("--out", out, "Map directory (<group>/<image>.pgm)")->required();
    detect->callback([&] {
        const auto cfg = common.config();
        const auto corpus = load_corpus(common.at(corpus_dir));
        std::unique_ptr<CoSaliencyDetector> det;
        if (cfg.detector == "external") {
            det = std::make_unique<ExternalDetector>(cfg.detector_command, common.at(out) / ".scratch");
        } else {
            det = std::make_unique<TemplateDetector>();
        }
        for (const auto& g : corpus.groups) {
            const auto maps = detect_group(*det, g);
            for (std::size_t i = 0; i < maps.size(); ++i) {
                write_pgm(common.at(out) / g.name / (g.images[i].name + ".pgm"), maps[i].prob);
            }
        }
        logger().log("detect", {{"out", out}, {"detector", det->name()}});
    });

    auto* evaluate_cmd = app.add_subcommand("evaluate", "Score saliency maps against the corpus masks");
    evaluate_cmd->add_option("--corpus", corpus_dir, "Corpus directory with masks and flags")->required();
    evaluate_cmd->add_option("--maps", maps_dir, "Map directory written by detect")->required();
    evaluate_cmd->add_option("--out", out, "Report JSON path")->required();
    evaluate_cmd->add_option("--label", label, "Label of the aggregate report")->default_str("aggregate");
    evaluate_cmd->callback([&] {
        common.config();
        const auto corpus = load_corpus(common.at(corpus_dir));
        std::vector<MetricsReport> per_group;
        for (const auto& g : corpus.groups) {
            std::vector<SaliencyMap> maps;
            for (const auto& gi : g.images) maps.push_back({read_pgm(common.at(maps_dir) / g.name / (gi.name + ".pgm"))});
            per_group.push_back(evaluate(maps, g));
        }
        const auto agg = aggregate(per_group, label.empty() ? "aggregate" : label);
        write_json(common.at(out), reports_to_json({agg}));
        std::cout << render_table({agg});
    });

    std::string manifest_path;
    auto* run = app.add_subcommand("run-experiment", "Run the full pipeline for the configured mode");
    run->add_option("--manifest", manifest_path, "Rerun the configuration recorded in a manifest");
    run->callback([&] {
        ExperimentConfig cfg;
        if (!manifest_path.empty()) {
            const auto m = read_json(common.at(manifest_path));
            if (m.value("schema", std::string()) != kManifestSchema) throw ConfigError("not a run manifest: " + manifest_path);
            cfg = ExperimentConfig::from_json(m.at("config"));
            cfg.apply_env();
            cfg.set(common.sets);
            cfg.validate();
        } else {
            cfg = common.config();
        }
        JsonLogger run_log(common.at(cfg.output_dir) / "log.jsonl", !common.quiet);
        const auto result = run_experiment(cfg, common.workdir, &run_log);
        std::cout << render_table({result.aggregate});
        if (!result.failures.empty()) {
            std::cerr << result.failures.size() << " group(s) failed; see manifest.json\n";
            exit_code = kStageFailure;
        }
    });

    std::vector<std::string> inputs;
    std::string format = "table";
    auto* report = app.add_subcommand("report", "Render report JSON files as json, table or plot");
    report->add_option("--in", inputs, "Report JSON files (repeatable)");
    report->add_option("--format", format, "json, table or plot")->capture_default_str();
    report->add_option("--out", out, "Output path (stdout when omitted for table)");
    report->callback([&] {
        const auto fmt = report_format_from_string(format);
        std::vector<MetricsReport> reports;
        for (const auto& in : inputs) {
            const auto j = read_json(common.at(in));
            if (j.contains("schema")) {
                const auto errs = validate_report_json(j);
                if (!errs.empty()) throw ConfigError(in + ": " + errs.front());
            }
            for (auto& r : reports_from_json(j)) reports.push_back(std::move(r));
        }
        if (out.empty()) {
            if (fmt == ReportFormat::json) {
                std::cout << reports_to_json(reports).dump(2) << "\n";
            } else {
                std::cout << (fmt == ReportFormat::table ? render_table(reports) : render_plot(reports));
            }
        } else {
            emit_report(reports, fmt, common.at(out));
        }
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kConfigError;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const std::exception& e) {
        logger().log("stage_failed", {{"error", e.what()}});
        std::cerr << "stage failed: " << e.what() << "\n";
        return kStageFailure;
    }
    return exit_code;
}
