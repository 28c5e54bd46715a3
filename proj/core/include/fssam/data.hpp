#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fssam/mask.hpp"
#include "fssam/model.hpp"
#include "fssam/rng.hpp"

namespace fssam {

struct Episode {
    Tensor query_image;
    BinaryMask query_mask;
    std::vector<SupportItem> support;
    int class_id = 0;
    std::string query_id;
    std::vector<std::string> support_ids;
};

struct FoldSpec {
    std::size_t n_folds = 0;
    std::vector<std::vector<int>> fold_classes;

    const std::vector<int>& test_classes(std::size_t fold) const;
    /// Every class outside the fold, sorted.
    std::vector<int> train_classes(std::size_t fold) const;
};

/// Contiguous split of the sorted ids; fold i holds ids[i*c/n, (i+1)*c/n).
FoldSpec make_folds(std::vector<int> class_ids, std::size_t n_folds);

/// Class -> image membership plus lazy access to pixels. Images come either
/// from a dataset directory or from memory (synthetic sets).
class DatasetIndex {
public:
    struct Entry {
        std::string id;
        std::vector<int> classes;
    };

    DatasetIndex() = default;

    std::size_t size() const noexcept { return entries_.size(); }
    const Entry& entry(std::size_t i) const { return entries_.at(i); }
    /// Sorted class ids with at least one image.
    std::vector<int> classes() const;
    /// Image positions containing the class, ascending; empty when unknown.
    const std::vector<std::size_t>& images_of(int class_id) const;
    const std::map<int, std::string>& class_names() const noexcept { return names_; }

    Tensor load_image(std::size_t i) const;
    BinaryMask load_mask(std::size_t i, int class_id) const;

    /// In-memory construction.
    void add_class(int id, std::string name);
    void add_image(std::string id, Tensor image, std::map<int, BinaryMask> masks);

    friend DatasetIndex load_dataset(const std::filesystem::path& root);

private:
    std::vector<Entry> entries_;
    std::map<int, std::vector<std::size_t>> by_class_;
    std::map<int, std::string> names_;
    std::filesystem::path root_;
    std::vector<Tensor> images_;
    std::vector<std::map<int, BinaryMask>> masks_;
};

/// Reads `root/classes.txt`, `root/images/<id>.ppm` and
/// `root/masks/<class>/<id>.pgm`. When `root/index.txt` exists, every
/// (image, class) pair it lists must have a mask file. A missing root yields
/// an empty index.
DatasetIndex load_dataset(const std::filesystem::path& root);
/// Writes the directory layout above (including index.txt).
void write_dataset(const std::filesystem::path& root, const DatasetIndex& index);

enum class SamplerKind { query_first, class_first };

std::string_view sampler_name(SamplerKind kind);
SamplerKind parse_sampler(std::string_view name);

/// Positions in the index chosen by a sampler, before any pixels are read.
struct EpisodeDraw {
    std::size_t query = 0;
    int class_id = 0;
    std::vector<std::size_t> support;
};

/// Query image uniform among images holding an eligible class, then a class
/// uniform among the eligible classes of that image, then K distinct other
/// images of the class.
EpisodeDraw draw_query_first(const DatasetIndex& index, const std::vector<int>& eligible, std::size_t k, Rng& rng);
/// Class uniform among eligible classes present in the index, then query and
/// K distinct other images of it.
EpisodeDraw draw_class_first(const DatasetIndex& index, const std::vector<int>& eligible, std::size_t k, Rng& rng);
EpisodeDraw draw_episode(SamplerKind kind, const DatasetIndex& index, const std::vector<int>& eligible,
                         std::size_t k, Rng& rng);

Episode materialize(const DatasetIndex& index, const EpisodeDraw& draw);

Episode sample_episode_query_first(const DatasetIndex& index, const std::vector<int>& eligible, std::size_t k,
                                   Rng& rng);
Episode sample_episode_class_first(const DatasetIndex& index, const std::vector<int>& eligible, std::size_t k,
                                   Rng& rng);

// Synthetic few-shot shapes.

enum class ShapeKind { disk, square, triangle, ring, cross, diamond, bar, chevron };
inline constexpr std::size_t kShapeKinds = 8;
inline constexpr std::size_t kTextureFamilies = 2;

struct SyntheticConfig {
    std::size_t n_shapes = kShapeKinds;
    std::size_t n_textures = kTextureFamilies;
    std::size_t image_size = 64;
    /// Distractor instances of other classes per image.
    std::size_t clutter = 2;
    int background_id = 0;
    std::uint64_t seed = 0;
    /// Images per class when materializing a dataset.
    std::size_t images_per_class = 12;
    /// Classes distractors are drawn from; empty means the whole vocabulary.
    std::vector<int> distractor_pool;

    std::size_t n_classes() const { return n_shapes * n_textures; }
    /// Class ids 1..n_classes.
    std::vector<int> class_ids() const;
    void validate() const;
};

ShapeKind class_shape(int class_id);
int class_texture(int class_id);
/// Base hue in [0, 1). Consecutive ids are spread around the colour wheel so
/// that every contiguous block of classes covers all of it.
double class_hue(int class_id, std::size_t n_classes);

enum class Similarity { video_like, independent };

std::string_view similarity_name(Similarity s);

/// One instance of a class placed in scene coordinates.
struct SceneObject {
    int class_id = 0;
    double cx = 0.0, cy = 0.0;
    double radius = 0.0;
    double hue = 0.0, value = 1.0;
    double stripe_phase = 0.0;
};

struct Scene {
    int background_id = 0;
    double bg_phase = 0.0;
    double bg_angle = 0.0;
    std::vector<SceneObject> objects;  // drawn in order; the last is on top
};

/// Global similarity transform: scene point p maps to s * p + t.
struct Similarity2D {
    double scale = 1.0;
    double tx = 0.0, ty = 0.0;
};

/// Rendered RGB image (8-bit levels) and per-pixel index of the visible
/// scene object (-1 for background).
struct Rendering {
    Tensor image;
    std::vector<int> labels;
    std::vector<int> object_classes;
    std::size_t size = 0;

    BinaryMask mask_of(int class_id) const;
};

bool shape_contains(ShapeKind kind, double u, double v);
Scene random_scene(const SyntheticConfig& cfg, int class_id, Rng& rng);
Rendering render_scene(const Scene& scene, const Similarity2D& view, std::size_t size, Rng& noise);
/// Throws ContractError when a labelled pixel lies outside its object's shape.
void check_rendering(const Scene& scene, const Similarity2D& view, const Rendering& r);

/// Largest relative translation and scale change of a video-like view.
inline constexpr double kJitter = 0.08;

/// Random view change for video-like supports: translation up to kJitter of
/// the image side, scale in [1 - kJitter, 1 + kJitter].
Similarity2D random_jitter(std::size_t size, Rng& rng);
/// mask resampled by the inverse of `view` (nearest neighbour).
BinaryMask warp_back(const BinaryMask& mask, const Similarity2D& view);

Episode generate_synthetic_episode(const SyntheticConfig& cfg, int class_id, std::size_t k, Similarity similarity,
                                   Rng& rng);

/// images_per_class independent scenes per class with distractors from
/// `classes`, and masks for every class visible in each image.
DatasetIndex build_synthetic_dataset(const SyntheticConfig& cfg, const std::vector<int>& classes);

// Netpbm I/O (binary P6 / P5, maxval 255).

void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const BinaryMask& mask);
/// Throws IngestionError for values other than 0 and 255.
BinaryMask read_pgm(const std::filesystem::path& path);

}  // namespace fssam
