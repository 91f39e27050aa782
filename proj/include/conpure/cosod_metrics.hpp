#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "conpure/corpus.hpp"
#include "conpure/image.hpp"
#include "json.hpp"

namespace conpure {

/// Per-pixel saliency probabilities in [0, 1].
struct SaliencyMap {
    Image prob;
    double threshold = 0.5;

    /// prob >= threshold
    Mask binary() const;
};

/// |a & b| / |a | b|; 1 when both are empty.
double iou(const Mask& a, const Mask& b);

/// Fraction of entries strictly above 0.5. Empty input gives 0.
double success_rate(std::span<const double> ious);

/// min(2 * mean(prob), 1)
double adaptive_threshold(const Image& prob);

/// F-measure on the adaptively binarized map (prob >= thr and prob > 0).
double f_beta(const SaliencyMap& pred, const Mask& gt, double beta_sq = 0.3);

/// Step-wise area under the precision-recall curve over the 256 thresholds k/255,
/// sum over thresholds (descending) of (R_k - R_{k+1}) * P_k. 0 when gt is empty.
double average_precision(const SaliencyMap& pred, const Mask& gt);

/// Mean |prob - gt| on the raw probabilities.
double mae(const SaliencyMap& pred, const Mask& gt);

struct SplitMetrics {
    std::size_t count = 0;
    // All four are absent when count == 0.
    std::optional<double> sr;
    std::optional<double> ap;
    std::optional<double> f_beta;
    std::optional<double> mae;

    nlohmann::json to_json() const;
    static SplitMetrics from_json(const nlohmann::json& j);
};

struct ImageScore {
    std::string group;
    std::string name;
    bool degraded = false;
    double iou = 0.0;
    double ap = 0.0;
    double f_beta = 0.0;
    double mae = 0.0;
};

struct MetricsReport {
    std::string label;
    std::vector<ImageScore> images;
    SplitMetrics avg;
    SplitMetrics adv;
    SplitMetrics clean;

    std::vector<double> ious() const;
    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
};

/// Splits are recomputed from `images`.
void recompute_splits(MetricsReport& report);

/// Scores one group's maps against its masks; the degraded flags define the adv/clean split.
MetricsReport evaluate(const std::vector<SaliencyMap>& maps, const ImageGroup& group);

/// Pools per-image scores of several reports (image-weighted means).
MetricsReport aggregate(const std::vector<MetricsReport>& reports, const std::string& label = "aggregate");

}  // namespace conpure
