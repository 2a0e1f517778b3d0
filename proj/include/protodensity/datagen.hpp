#pragma once

// Synthetic fluorescence-style scenes: Gaussian cell blobs with dot
// annotations, unannotated artifacts, and count-preserving density maps at
// 1/s of the input resolution.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "protodensity/tensor.hpp"

namespace protodensity {

enum class ArtifactKind { Blob, Streak, Gradient };

std::string to_string(ArtifactKind kind);
ArtifactKind artifact_kind_from_string(const std::string& name);

struct SceneConfig {
    std::size_t height = 128;
    std::size_t width = 128;
    std::size_t cell_count_min = 5;
    std::size_t cell_count_max = 80;
    // Gaussian sigma of a rendered cell, pixels.
    double cell_radius_min = 1.5;
    double cell_radius_max = 3.0;
    double cell_intensity_min = 0.5;
    double cell_intensity_max = 1.0;
    std::size_t artifact_count_min = 1;
    std::size_t artifact_count_max = 4;
    std::vector<ArtifactKind> artifact_kinds = {ArtifactKind::Blob, ArtifactKind::Streak,
                                                ArtifactKind::Gradient};
    double noise_std = 0.02;
    // When false, cell centers keep at least 3 * (r_a + r_b) apart.
    bool allow_overlap = true;
    std::uint64_t seed = 0;
    // Density maps live on the (H/s) x (W/s) grid.
    std::size_t downsample = 8;
    double density_sigma = 1.0;

    void validate() const;
};

/// Flat `key = value` view of a SceneConfig (keys without the "scene." prefix).
std::vector<std::pair<std::string, std::string>> scene_config_entries(const SceneConfig& config);
/// Returns false for an unknown key; throws ConfigError for a bad value.
bool set_scene_field(SceneConfig& config, const std::string& key, const std::string& value);

struct Point {
    double x;
    double y;
};

struct DotAnnotation {
    std::vector<Point> points;
};

struct Sample {
    std::uint64_t id = 0;
    Tensor image;       // [1 x H x W], values in [0, 1]
    DotAnnotation annotation;
    Tensor density_gt;  // [H/s x W/s]

    std::size_t count() const { return annotation.points.size(); }
};

struct RenderedScene {
    Tensor image;
    DotAnnotation annotation;
};

/// Deterministic in (config.seed, index).
RenderedScene render_scene(const SceneConfig& config, std::uint64_t index);

/// Each point contributes a Gaussian centred at (x/s, y/s) on the output grid,
/// renormalised to sum to exactly one over the grid. Pixel (h, w) of the
/// output grid has its centre at (w + 0.5, h + 0.5).
Tensor make_density_map(const DotAnnotation& annotation, std::size_t height, std::size_t width,
                        std::size_t downsample, double sigma);

Sample make_sample(const SceneConfig& config, std::uint64_t index);

// ---------------------------------------------------------------------------
// On-disk dataset (layout documented in docs/formats.md)
// ---------------------------------------------------------------------------

enum class Split { Train, Test };

struct ManifestEntry {
    std::uint64_t id;
    Split split;
    std::string image;       // relative paths
    std::string annotation;
    std::string density;
    std::size_t count;
};

struct Manifest {
    SceneConfig config;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    std::vector<ManifestEntry> entries;
};

std::string serialize_manifest(const Manifest& manifest);
Manifest parse_manifest(const std::string& text);

struct Dataset {
    std::filesystem::path root;
    Manifest manifest;
    std::uint64_t manifest_hash = 0;  // FNV-1a of the manifest file bytes
    std::vector<Sample> train;
    std::vector<Sample> test;
};

void write_annotation_csv(const std::filesystem::path& path, const DotAnnotation& annotation);
DotAnnotation read_annotation_csv(const std::filesystem::path& path);

/// Writes images/<id>.pdtf, annotations/<id>.csv, density/<id>.pdtf under root.
ManifestEntry save_sample(const std::filesystem::path& root, const Sample& sample, Split split);
Sample load_sample(const std::filesystem::path& root, const ManifestEntry& entry);

/// Samples 0..n_train-1 form the train split, n_train..n_train+n_test-1 the test split.
Manifest generate_dataset(const SceneConfig& config, std::size_t n_train, std::size_t n_test,
                          const std::filesystem::path& out_dir);

Dataset load_dataset(const std::filesystem::path& dir);

/// In-memory equivalent of generate_dataset + load_dataset.
Dataset make_dataset(const SceneConfig& config, std::size_t n_train, std::size_t n_test);

std::uint64_t fnv1a(std::string_view bytes);

} // namespace protodensity
