#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cbmkit/numerics.hpp"

namespace cbmkit {

enum class Role { Images, Concepts, Classes };
enum class DType { F32, F64 };

std::string to_string(Role role);
std::string to_string(DType dtype);

inline constexpr int kManifestFormatVersion = 1;

struct ManifestFile {
    Role role;
    std::filesystem::path path;
    std::size_t rows = 0;
    DType dtype = DType::F32;
};

/// Parsed `manifest.json`. Paths are stored as written (relative to the manifest directory).
struct EmbeddingManifest {
    int format_version = kManifestFormatVersion;
    std::size_t dim = 0;
    bool normalized = true;
    std::vector<ManifestFile> files;
    std::vector<std::pair<Role, std::filesystem::path>> names_files;
    std::optional<std::filesystem::path> labels_file;

    const ManifestFile* find(Role role) const;
};

struct EmbeddingSet {
    Matrix matrix;
    std::vector<std::string> names;

    std::size_t size() const noexcept { return matrix.rows(); }
    std::size_t dim() const noexcept { return matrix.cols(); }
};

struct DatasetBundle {
    EmbeddingSet images;
    EmbeddingSet concepts;
    EmbeddingSet classes;
    std::vector<std::size_t> labels;

    std::size_t num_classes() const noexcept { return classes.size(); }
    std::size_t num_concepts() const noexcept { return concepts.size(); }
    std::size_t num_images() const noexcept { return images.size(); }
};

/// Checks the cross-set invariants: shared dim, aligned names and labels, labels in range.
void validate_bundle(const DatasetBundle& bundle);

EmbeddingManifest read_manifest(const std::filesystem::path& manifest_path);

/// Loads one role from a manifest; the other roles need not be present.
EmbeddingSet load_set(const std::filesystem::path& manifest_path, Role role);
DatasetBundle load_bundle(const std::filesystem::path& manifest_path);

struct WriteOptions {
    DType dtype = DType::F64;
    /// Value of the manifest's `normalized` flag, i.e. whether readers renormalize on load.
    bool normalized = false;
};

/// Writes manifest.json plus the .bin/.txt files into `dir`; returns the manifest path.
std::filesystem::path write_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir,
                                   const WriteOptions& options = {});

EmbeddingSet normalize_rows(const EmbeddingSet& set);
void normalize_rows_in_place(Matrix& m);

struct SynthSpec {
    std::size_t num_classes = 5;
    std::size_t images_per_class = 50;
    std::size_t concepts_per_class = 10;
    std::size_t dim = 64;
    double noise_level = 0.05;
    double concept_quality = 0.9;
};

/// Class vectors are unit vectors with pairwise cosine <= 0.5, concepts blend their class
/// vector with a random direction, images are noisy copies of their class vector.
DatasetBundle synth_dataset(const SynthSpec& spec, Rng rng);

}  // namespace cbmkit
