#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "conpure/error.hpp"
#include "conpure/experiment.hpp"
#include "doctest.h"

using namespace conpure;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("conpure_test_exp_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// Small enough to run every stage in seconds.
ExperimentConfig tiny_config() {
    ExperimentConfig c;
    c.set({"corpus.groups=2", "corpus.group_size=4", "train_corpus.groups=8", "train_corpus.group_size=3",
           "model.base_channels=4", "model.mid_channels=8", "model.embedding_dim=8", "t2i.steps=30",
           "t2i.batch_size=4", "t2i.warmup_steps=5", "t2i.autoencoder_steps=0", "cr.kind=bicubic",
           "concept.steps=20", "purify.depth=15", "degradation.pgd_steps=3", "output_dir=out"});
    return c;
}

MetricsReport sample_report(const std::string& label, bool with_adv) {
    MetricsReport r;
    r.label = label;
    r.images.push_back({"g", "a", with_adv, 0.8, 0.9, 0.7, 0.1});
    r.images.push_back({"g", "b", false, 0.3, 0.5, 0.4, 0.3});
    recompute_splits(r);
    return r;
}

}  // namespace

TEST_CASE("config text parsing") {
    const auto c = ExperimentConfig::parse(
        "# comment\n"
        "purify.depth = 500   # deeper\n"
        "\n"
        "purify.use_cr = false\n"
        "mode = none_concept\n"
        "degradation.kind = motion_blur\n"
        "degradation.noise_budget = 8/255\n");
    CHECK(c.purify.depth == 500);
    CHECK_FALSE(c.purify.use_cr);
    CHECK(c.mode == AblationMode::none_concept);
    CHECK(c.degradation.kind == DegradationKind::motion_blur);
    CHECK(c.degradation.noise_budget == doctest::Approx(8.0 / 255.0));
    CHECK(c.corpus.groups == 20);

    CHECK_THROWS_AS(ExperimentConfig::parse("purify.depht = 3\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("purify.depth = deep\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("purify.depth\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("purify = 3\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("purify.depth = 2000\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("mode = everything\n"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse("corpus.seed = -4\n"), ConfigError);
    try {
        ExperimentConfig::parse("workers = 1\nbogus = 2\n");
        FAIL("expected a ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("config text round trip and file loading") {
    auto c = tiny_config();
    c.mode = AblationMode::no_inversion;
    const auto back = ExperimentConfig::parse(c.to_text());
    CHECK(back.to_json() == c.to_json());
    CHECK(ExperimentConfig::from_json(c.to_json()).to_json() == c.to_json());

    const auto dir = fresh_dir("cfg");
    std::ofstream(dir / "run.conf") << c.to_text();
    CHECK(ExperimentConfig::load(dir / "run.conf").to_json() == c.to_json());
    CHECK_THROWS_AS(ExperimentConfig::load(dir / "none.conf"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"nope", 1}}), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"purify", {{"depth", "x"}}}}), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("environment overrides cover seeds and paths only") {
    const auto keys = env_overridable_keys();
    CHECK(std::find(keys.begin(), keys.end(), "purify.seed") != keys.end());
    CHECK(std::find(keys.begin(), keys.end(), "output_dir") != keys.end());
    CHECK(std::find(keys.begin(), keys.end(), "purify.depth") == keys.end());

    const std::map<std::string, std::string> env{
        {"CONPURE_PURIFY_SEED", "41"}, {"CONPURE_OUTPUT_DIR", "elsewhere"}, {"CONPURE_PURIFY_DEPTH", "3"}};
    ExperimentConfig c;
    c.apply_env([&](const std::string& k) -> std::optional<std::string> {
        const auto it = env.find(k);
        return it == env.end() ? std::nullopt : std::optional(it->second);
    });
    CHECK(c.purify.seed == 41);
    CHECK(c.output_dir == "elsewhere");
    CHECK(c.purify.depth == 250);

    ExperimentConfig bad;
    CHECK_THROWS_AS(bad.apply_env([](const std::string& k) -> std::optional<std::string> {
        return k == "CONPURE_CORPUS_SEED" ? std::optional<std::string>("x") : std::nullopt;
    }),
                    ConfigError);
}

TEST_CASE("mode validation") {
    auto c = tiny_config();
    c.detector = "gicd";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.detector = "external";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.workers = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("mode stages form the ablation lattice") {
    const PurifyConfig p;
    const auto src = mode_stages(AblationMode::source_only, p);
    const auto noinv = mode_stages(AblationMode::no_inversion, p);
    const auto none = mode_stages(AblationMode::none_concept, p);
    const auto learned = mode_stages(AblationMode::learned_concept, p);
    CHECK(src["diffusion"] == false);
    CHECK(src["cr"] == false);
    CHECK(noinv["diffusion"] == false);
    CHECK(noinv["cr"] == true);
    CHECK(none["diffusion"] == true);
    CHECK(none["concept"] == "none");
    CHECK(learned["concept"] == "learned");
    auto l2 = learned;
    l2["concept"] = "none";
    CHECK(l2 == none);
    for (auto m : {AblationMode::source_only, AblationMode::no_inversion, AblationMode::none_concept,
                   AblationMode::learned_concept}) {
        CHECK(ablation_mode_from_string(to_string(m)) == m);
    }
}

TEST_CASE("report json validates and round trips") {
    const std::vector<MetricsReport> reports{sample_report("learned_concept", true), sample_report("source_only", false)};
    const auto j = reports_to_json(reports);
    CHECK(j["schema"] == kReportSchema);
    CHECK(validate_report_json(j).empty());
    const auto back = reports_from_json(j);
    REQUIRE(back.size() == 2);
    CHECK(back[0].to_json() == reports[0].to_json());
    CHECK(back[1].adv.count == 0);
    CHECK(reports_from_json(reports[0].to_json()).size() == 1);

    auto broken = j;
    broken["reports"][0]["splits"]["adv"]["count"] = 7;
    CHECK_FALSE(validate_report_json(broken).empty());
    broken = j;
    broken["reports"][0]["splits"]["avg"]["SR"] = 1.5;
    CHECK_FALSE(validate_report_json(broken).empty());
    broken = j;
    broken["reports"][1]["splits"]["adv"]["SR"] = 0.5;
    CHECK_FALSE(validate_report_json(broken).empty());
    broken = j;
    broken["schema"] = "other";
    CHECK_FALSE(validate_report_json(broken).empty());
    CHECK_FALSE(validate_report_json(json::array()).empty());
}

TEST_CASE("table has four metric columns and three split rows per report") {
    const auto table = render_table({sample_report("learned_concept", true)});
    std::istringstream is(table);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(is, line)) {
        if (!line.empty()) lines.push_back(line);
    }
    REQUIRE(lines.size() >= 4);
    for (const char* col : {"SR", "AP", "F_beta", "MAE"}) CHECK(lines[0].find(col) != std::string::npos);
    CHECK(lines.size() == 4);
    CHECK(lines[1].find("learned_concept") != std::string::npos);
    for (const char* split : {"avg", "adv", "clean"}) CHECK(table.find(split) != std::string::npos);
    CHECK(render_table({sample_report("x", false)}).find(" - ") != std::string::npos);
}

TEST_CASE("empty report sets give valid empty artifacts") {
    const auto dir = fresh_dir("empty");
    for (auto f : {ReportFormat::json, ReportFormat::table, ReportFormat::plot}) {
        const auto out = dir / ("r" + std::to_string(static_cast<int>(f)));
        CHECK_NOTHROW(emit_report({}, f, out));
        CHECK(fs::exists(out));
    }
    const auto j = json::parse(slurp(dir / "r0"));
    CHECK(validate_report_json(j).empty());
    CHECK(j["reports"].empty());
    CHECK(slurp(dir / "r2").find("<svg") != std::string::npos);
    CHECK(render_plot({sample_report("a", true)}).find("<rect") != std::string::npos);
    CHECK_THROWS_AS(report_format_from_string("pdf"), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("directory lock is exclusive and recovers from dead owners") {
    const auto dir = fresh_dir("lock");
    {
        DirectoryLock lock(dir);
        CHECK(fs::exists(dir / ".lock"));
        CHECK_THROWS_AS(DirectoryLock{dir}, Error);
    }
    CHECK_FALSE(fs::exists(dir / ".lock"));
    // A pid that cannot be running.
    std::ofstream(dir / ".lock") << "2147483646";
    CHECK_NOTHROW(DirectoryLock{dir});
    fs::remove_all(dir);
}

TEST_CASE("content keys and logging") {
    CHECK(content_key(json{{"a", 1}}) == content_key(json{{"a", 1}}));
    CHECK(content_key(json{{"a", 1}}) != content_key(json{{"a", 2}}));
    CHECK(content_key(json{{"a", 1}}).size() == 16);

    const auto dir = fresh_dir("log");
    {
        JsonLogger log(dir / "log.jsonl");
        log.log("one", {{"x", 1}});
        log.log("two");
    }
    std::ifstream is(dir / "log.jsonl");
    std::string line;
    int n = 0;
    while (std::getline(is, line)) {
        const auto j = json::parse(line);
        CHECK(j.contains("event"));
        CHECK(j.contains("seconds"));
        ++n;
    }
    CHECK(n == 2);
    fs::remove_all(dir);
}

TEST_CASE("tiny end-to-end runs are reproducible and the manifest isolates the mode") {
    const auto work = fresh_dir("run");
    auto learned = tiny_config();
    const auto first = run_experiment(learned, work);
    CHECK(first.failures.empty());
    CHECK(first.group_reports.size() == 2);
    CHECK(first.aggregate.avg.count == 8);
    CHECK(first.aggregate.adv.count == 4);
    const auto out = work / "out";
    const auto report = slurp(out / "report.json");
    CHECK(validate_report_json(json::parse(report)).empty());
    std::map<std::string, std::string> group_files;
    for (const auto& e : fs::directory_iterator(out / "reports")) group_files[e.path().filename()] = slurp(e.path());
    CHECK(group_files.size() == 2);

    // Manifest completeness: every listed artifact exists with the recorded hash.
    const auto manifest = json::parse(slurp(out / "manifest.json"));
    CHECK(manifest["schema"] == kManifestSchema);
    CHECK(manifest["failure_count"] == 0);
    bool saw_report = false;
    for (const auto& a : manifest["artifacts"]) {
        CHECK(fs::exists(work / a["path"].get<std::string>()));
        CHECK(a["sha256"].get<std::string>().size() == 64);
        if (a["path"] == "out/report.json") saw_report = true;
    }
    CHECK(saw_report);

    // Rerun from the recorded config.
    const auto replay = ExperimentConfig::from_json(manifest["config"]);
    run_experiment(replay, work);
    CHECK(slurp(out / "report.json") == report);
    for (const auto& [name, text] : group_files) CHECK(slurp(out / "reports" / name) == text);

    // none_concept differs from learned_concept only in the conditioning vector.
    auto none = learned;
    none.mode = AblationMode::none_concept;
    none.output_dir = "out_none";
    run_experiment(none, work);
    const auto m_none = json::parse(slurp(work / "out_none" / "manifest.json"));
    auto a = manifest, b = m_none;
    CHECK(a["stages"]["concept"] == "learned");
    CHECK(b["stages"]["concept"] == "none");
    for (auto* m : {&a, &b}) {
        m->erase("artifacts");
        (*m)["stages"].erase("concept");
        (*m)["config"].erase("mode");
        (*m)["config"].erase("output_dir");
        m->erase("mode");
    }
    CHECK(a == b);

    // source_only never touches the diffusion model.
    auto src = learned;
    src.mode = AblationMode::source_only;
    src.output_dir = "out_src";
    const auto r_src = run_experiment(src, work);
    const auto m_src = json::parse(slurp(work / "out_src" / "manifest.json"));
    CHECK(m_src["stages"]["diffusion"] == false);
    CHECK_FALSE(m_src["checksums"].contains("model"));
    CHECK_FALSE(fs::exists(work / "out_src" / "purified"));
    CHECK(r_src.aggregate.avg.count == 8);
    fs::remove_all(work);
}

TEST_CASE("a failing group is recorded and the aggregate covers the rest") {
    const auto work = fresh_dir("fail");
    auto c = tiny_config();
    c.mode = AblationMode::source_only;
    c.detector = "external";
    c.detector_command = "false";
    const auto r = run_experiment(c, work);
    CHECK(r.failures.size() == 2);
    CHECK(r.aggregate.avg.count == 0);
    const auto manifest = json::parse(slurp(work / "out" / "manifest.json"));
    CHECK(manifest["failure_count"] == 2);
    CHECK(validate_report_json(json::parse(slurp(work / "out" / "report.json"))).empty());
    fs::remove_all(work);
}
