#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "conpure/image.hpp"
#include "json.hpp"

namespace conpure {

/// Names of the synthetic shape classes, in class-id order.
const std::vector<std::string>& shape_classes();
int class_id(const std::string& name);

/// Point-in-shape test in shape-normalized coordinates (u, v in [-0.5, 0.5], v pointing down).
bool shape_contains(int class_id, double u, double v);

/// Rasterizes one shape instance by pixel-center sampling.
Mask render_shape(int class_id, double center_x, double center_y, double size, int height, int width);

struct GroupImage {
    std::string name;
    Image image;
    /// Support of the group's common object.
    Mask mask;
    bool degraded = false;
};

/// Images sharing one object class. Image order is the manifest order used for degradation splits.
struct ImageGroup {
    std::string name;
    int class_id = 0;
    std::vector<GroupImage> images;

    std::size_t size() const { return images.size(); }
    const std::string& class_name() const { return shape_classes().at(static_cast<std::size_t>(class_id)); }
    std::vector<Image> pixels() const;
    std::size_t degraded_count() const;
};

struct CorpusOptions {
    int image_size = 48;
    int min_object = 12;
    int max_object = 22;
    int max_distractors = 2;
    double object_contrast_min = 0.40;
    double object_contrast_max = 0.60;
    double distractor_contrast_min = 0.12;
    double distractor_contrast_max = 0.25;
    double texture_sigma = 0.02;

    nlohmann::json to_json() const;
    static CorpusOptions from_json(const nlohmann::json& j);
};

struct ShapeGroupCorpus {
    int image_size = 48;
    std::vector<ImageGroup> groups;

    std::size_t image_count() const;
};

/// Deterministic in `seed`. The first ceil(degraded_fraction * group_size) images of each
/// group are flagged as degraded; pixels are left clean. Pixel values lie on the 8-bit grid.
ShapeGroupCorpus generate_corpus(std::uint64_t seed, int n_groups, int group_size, double degraded_fraction,
                                 const CorpusOptions& options = {});

/// Number of leading images flagged for degradation.
std::size_t degraded_count_for(std::size_t group_size, double fraction);

/// Directory layout: manifest.json, images/<name>.pgm, masks/<name>.pgm.
void save_corpus(const ShapeGroupCorpus& corpus, const std::filesystem::path& dir);
ShapeGroupCorpus load_corpus(const std::filesystem::path& dir);

nlohmann::json group_manifest(const ImageGroup& group);
void save_group(const ImageGroup& group, const std::filesystem::path& dir);

}  // namespace conpure
