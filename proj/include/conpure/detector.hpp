#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "conpure/corpus.hpp"
#include "conpure/cosod_metrics.hpp"
#include "conpure/image.hpp"

namespace conpure {

/// Co-saliency detector: sees a whole group, returns one map per image in input order.
class CoSaliencyDetector {
public:
    virtual ~CoSaliencyDetector() = default;
    virtual std::string name() const = 0;
    virtual std::vector<SaliencyMap> detect(const std::vector<Image>& images) const = 0;
};

/// Checks the group is nonempty and single-resolution, then runs the detector.
std::vector<SaliencyMap> detect_group(const CoSaliencyDetector& detector, const ImageGroup& group);

/// Differentiable objective an attack maximizes for one image with known class and object mask.
class AttackSurrogate {
public:
    virtual ~AttackSurrogate() = default;
    /// Returns the objective; writes d(objective)/d(image) into `grad` when non-null.
    virtual double attack_objective(const Image& image, int class_id, const Mask& gt, Image* grad) const = 0;
};

struct TemplateDetectorConfig {
    std::vector<double> scales = {12, 14, 16, 18, 20, 22};
    int dilation = 1;
    double threshold = 0.5;
};

struct TemplateMatch {
    int class_id = 0;
    int scale_index = 0;
    int y = 0;
    int x = 0;
    double score = 0.0;
};

/// Group-template matcher. Features are forward-difference gradient magnitudes; every
/// (class, scale) template is the zero-mean, unit-norm edge map of the rendered shape.
/// The group votes for the class with the largest sum of per-image best scores; each
/// image is then localized by its best match of that class.
class TemplateDetector : public CoSaliencyDetector, public AttackSurrogate {
public:
    explicit TemplateDetector(TemplateDetectorConfig config = {});

    std::string name() const override { return "template"; }
    std::vector<SaliencyMap> detect(const std::vector<Image>& images) const override;

    /// Best match per class, indexed by class id.
    std::vector<TemplateMatch> best_per_class(const Image& image) const;
    /// Single-image classifier: argmax over classes of the best match score.
    int classify(const Image& image) const;
    int vote(const std::vector<std::vector<TemplateMatch>>& per_image) const;
    SaliencyMap render(const Image& image, const TemplateMatch& match) const;
    Mask match_mask(const TemplateMatch& match, int height, int width) const;

    /// Margin of the best true-class match away from the object over the best one on it.
    double attack_objective(const Image& image, int class_id, const Mask& gt, Image* grad) const override;

    const TemplateDetectorConfig& config() const { return config_; }

private:
    struct Template {
        int size = 0;
        int center = 0;
        std::vector<float> weights;
    };
    const Template& tmpl(int class_id, int scale_index) const {
        return templates_[static_cast<std::size_t>(class_id) * config_.scales.size() + scale_index];
    }
    /// Correlation of a template with the feature map, one response per pixel.
    std::vector<float> response(const std::vector<float>& features, int h, int w, const Template& t) const;

    TemplateDetectorConfig config_;
    std::vector<Template> templates_;
};

/// Forward-difference gradient magnitude, row-major like the image.
std::vector<float> edge_features(const Image& image);

/// Runs an external program as `<command> <input_dir> <output_dir>`. Inputs are written as
/// 8-bit PGMs named by group position (0000.pgm, 0001.pgm, ...); the program must write a
/// same-named, same-sized map into output_dir and exit 0.
class ExternalDetector : public CoSaliencyDetector {
public:
    ExternalDetector(std::string command, std::filesystem::path scratch_dir);
    std::string name() const override { return "external"; }
    std::vector<SaliencyMap> detect(const std::vector<Image>& images) const override;

private:
    std::string command_;
    std::filesystem::path scratch_;
};

}  // namespace conpure
