#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "conpure/concept_learning.hpp"
#include "conpure/corpus.hpp"
#include "conpure/cosod_metrics.hpp"
#include "conpure/degradations.hpp"
#include "conpure/detector.hpp"
#include "conpure/noise_schedule.hpp"
#include "conpure/purification.hpp"
#include "conpure/t2i_model.hpp"
#include "json.hpp"

namespace conpure {

enum class AblationMode { source_only, no_inversion, none_concept, learned_concept };
std::string to_string(AblationMode mode);
AblationMode ablation_mode_from_string(const std::string& s);

struct ScheduleConfig {
    int t_max = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    BetaShape shape = BetaShape::linear;

    NoiseSchedule make() const { return NoiseSchedule::make(t_max, beta_start, beta_end, shape); }
};

struct CorpusConfig {
    std::uint64_t seed = 0;
    int groups = 20;
    int group_size = 6;
    CorpusOptions options;
};

/// Everything a run needs. Serialized as a key = value text file whose keys are the dotted
/// paths of to_json(), e.g. "purify.depth = 250".
struct ExperimentConfig {
    CorpusConfig corpus{11, 20, 6, {}};
    /// Corpus the T2I model and the CR module are trained on; never degraded.
    CorpusConfig train_corpus{1000, 200, 6, {}};
    DegradationSpec degradation;
    ScheduleConfig schedule;
    T2IConfig model;
    T2ITrainConfig t2i;
    CRConfig cr;
    int cr_epochs = 10;
    /// Resolution CR inputs are resampled to during training; the output is always the corpus size.
    int cr_input_size = 48;
    double cr_noise_budget = 16.0 / 255.0;
    ConceptConfig concept_config;
    PurifyConfig purify;
    AblationMode mode = AblationMode::learned_concept;
    /// "template" or "external"; the external detector runs detector_command.
    std::string detector = "template";
    std::string detector_command;
    std::string output_dir = "runs/default";
    std::string cache_dir = "cache";
    int workers = 1;

    void validate() const;
    nlohmann::json to_json() const;
    /// Missing keys keep their defaults; unknown keys throw ConfigError.
    static ExperimentConfig from_json(const nlohmann::json& j);

    /// Parses "key = value" lines; '#' starts a comment. Throws ConfigError with the line number,
    /// or without one when the assembled config fails validate().
    static ExperimentConfig parse(const std::string& text);
    static ExperimentConfig load(const std::filesystem::path& path);
    /// Applies "key=value" assignments on top of this config.
    void set(const std::vector<std::string>& assignments);
    /// Seeds and paths may be overridden by CONPURE_<KEY> variables, where KEY is the dotted key
    /// upper-cased with dots replaced by underscores (CONPURE_PURIFY_SEED, CONPURE_OUTPUT_DIR).
    void apply_env(const std::function<std::optional<std::string>(const std::string&)>& getenv);
    void apply_env();
    /// Key = value text with every key, in to_json() order.
    std::string to_text() const;
};

/// Keys eligible for environment overrides.
std::vector<std::string> env_overridable_keys();

/// Line-delimited JSON log. Each record carries "event" and elapsed "seconds".
class JsonLogger {
public:
    JsonLogger() = default;
    explicit JsonLogger(const std::filesystem::path& path, bool echo = false);
    void log(const std::string& event, nlohmann::json fields = nlohmann::json::object());

private:
    std::mutex mutex_;
    std::filesystem::path path_;
    bool echo_ = false;
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

/// Exclusive ownership of a directory through <dir>/.lock (holding the owner's pid).
/// A lock whose process no longer exists is taken over. Throws Error if the directory is held.
class DirectoryLock {
public:
    explicit DirectoryLock(const std::filesystem::path& dir);
    ~DirectoryLock();
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    std::filesystem::path path_;
};

struct ArtifactRecord {
    std::string path;  // relative to the workdir
    std::string role;  // "input" or "output"
    std::string sha256;
};

/// SHA-256 of a JSON value's compact dump, truncated to 16 hex digits.
std::string content_key(const nlohmann::json& j);
/// SHA-256 over a corpus's pixels, masks, names and flags.
std::string corpus_hash(const ShapeGroupCorpus& corpus);

/// Stage runner with a content-addressed cache under <workdir>/<cache_dir>. Every stage output
/// is stored under a key hashed from its inputs, so repeated runs reuse trained models,
/// degraded corpora and concepts.
class Pipeline {
public:
    Pipeline(ExperimentConfig config, std::filesystem::path workdir, JsonLogger* log = nullptr);
    ~Pipeline();

    const ExperimentConfig& config() const { return config_; }
    const std::filesystem::path& workdir() const { return workdir_; }
    const NoiseSchedule& schedule() const { return schedule_; }

    /// Clean evaluation corpus, flags set by degradation.fraction.
    const ShapeGroupCorpus& corpus();
    const ShapeGroupCorpus& train_corpus();
    const ToyT2IModel& model();
    const CRModel& cr();
    const CoSaliencyDetector& detector();
    /// The template detector used as attack surrogate.
    const TemplateDetector& surrogate() const { return template_; }
    /// corpus() with degrade_group applied to every group.
    const ShapeGroupCorpus& degraded();
    /// Concepts learned on every group of `source` (cached by the corpus hash).
    std::map<std::string, ConceptEmbedding> learn_concepts(const ShapeGroupCorpus& source);
    const std::map<std::string, ConceptEmbedding>& concepts();

    const std::vector<ArtifactRecord>& artifacts() const { return artifacts_; }
    void record(const std::filesystem::path& path, const std::string& role);
    void log(const std::string& event, nlohmann::json fields = nlohmann::json::object());

private:
    std::filesystem::path cache_path(const std::string& stage, const nlohmann::json& key) const;

    ExperimentConfig config_;
    std::filesystem::path workdir_;
    JsonLogger* log_;
    NoiseSchedule schedule_;
    TemplateDetector template_;
    std::optional<ShapeGroupCorpus> corpus_, train_corpus_, degraded_;
    std::optional<ToyT2IModel> model_;
    std::optional<CRModel> cr_;
    std::unique_ptr<CoSaliencyDetector> external_;
    std::optional<std::map<std::string, ConceptEmbedding>> concepts_;
    std::vector<ArtifactRecord> artifacts_;
};

/// Applies the mode's processing to one degraded group (no detection).
ImageGroup process_group(Pipeline& pipeline, const ImageGroup& degraded);

struct GroupFailure {
    std::string group;
    std::string message;
};

struct ExperimentResult {
    std::vector<MetricsReport> group_reports;
    MetricsReport aggregate;
    std::vector<GroupFailure> failures;
    nlohmann::json manifest;
};

/// Full run of config.mode: degrade -> (learn concept) -> (CR / purify) -> detect -> evaluate.
/// Writes purified images, maps, reports/<group>.json, report.json and manifest.json into
/// <workdir>/<output_dir>, which it holds locked. Group failures are recorded, not thrown.
ExperimentResult run_experiment(const ExperimentConfig& config, const std::filesystem::path& workdir,
                                JsonLogger* log = nullptr);

/// Stage switches a mode implies, as recorded in the manifest.
nlohmann::json mode_stages(AblationMode mode, const PurifyConfig& purify);

inline constexpr const char* kReportSchema = "conpure.report/1";
inline constexpr const char* kManifestSchema = "conpure.manifest/1";

enum class ReportFormat { json, table, plot };
ReportFormat report_format_from_string(const std::string& s);

nlohmann::json reports_to_json(const std::vector<MetricsReport>& reports);
/// Accepts a report document or a single MetricsReport.
std::vector<MetricsReport> reports_from_json(const nlohmann::json& j);
/// Returns a list of schema violations; empty means valid.
std::vector<std::string> validate_report_json(const nlohmann::json& j);

/// One row per (report, split), columns SR, AP, F_beta, MAE; missing values print as "-".
std::string render_table(const std::vector<MetricsReport>& reports);
/// SVG bar chart of SR per report, one bar per split.
std::string render_plot(const std::vector<MetricsReport>& reports);
void emit_report(const std::vector<MetricsReport>& reports, ReportFormat format, const std::filesystem::path& out);

}  // namespace conpure
