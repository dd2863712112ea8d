#include "cbmkit/embedding_store.hpp"

#include <charconv>
#include <cmath>
#include <json.hpp>
#include <set>

#include "cbmkit/io_util.hpp"

namespace cbmkit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kZeroRow = 1e-12;
constexpr int kMaxClassAttempts = 10000;
constexpr double kMaxClassCosine = 0.5;

Role parse_role(const std::string& s) {
    if (s == "images") return Role::Images;
    if (s == "concepts") return Role::Concepts;
    if (s == "classes") return Role::Classes;
    fail(ErrorCode::Parse, "unknown role '" + s + "'");
}

DType parse_dtype(const std::string& s) {
    if (s == "f32") return DType::F32;
    if (s == "f64") return DType::F64;
    fail(ErrorCode::Parse, "unknown dtype '" + s + "'");
}

std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

template <typename T>
T get_field(const json& obj, const char* key) {
    if (!obj.contains(key)) fail(ErrorCode::Parse, std::string("manifest missing key '") + key + "'");
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        fail(ErrorCode::Parse, std::string("manifest key '") + key + "': " + e.what());
    }
}

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) fail(ErrorCode::Parse, where + " must be an object");
    for (const auto& [key, _] : obj.items()) {
        if (!allowed.contains(key)) fail(ErrorCode::Parse, "unexpected key '" + key + "' in " + where);
    }
}

std::vector<std::string> read_names(const fs::path& path, std::size_t expected) {
    auto lines = split_lines(read_file(path));
    if (lines.size() != expected) {
        fail(ErrorCode::Shape, path.string() + " has " + std::to_string(lines.size()) + " names, expected " +
                                   std::to_string(expected));
    }
    return lines;
}

std::vector<std::size_t> read_labels(const fs::path& path, std::size_t expected, std::optional<std::size_t> num_classes) {
    auto lines = split_lines(read_file(path));
    if (lines.size() != expected) {
        fail(ErrorCode::Shape, path.string() + " has " + std::to_string(lines.size()) + " labels, expected " +
                                   std::to_string(expected));
    }
    std::vector<std::size_t> labels;
    labels.reserve(lines.size());
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const std::string& line = lines[i];
        long long value = 0;
        auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), value);
        if (ec != std::errc() || ptr != line.data() + line.size()) {
            fail(ErrorCode::Parse, "label line " + std::to_string(i + 1) + " is not an integer: '" + line + "'");
        }
        if (value < 0 || (num_classes && static_cast<std::size_t>(value) >= *num_classes)) {
            fail(ErrorCode::LabelRange, "label " + std::to_string(value) + " at line " + std::to_string(i + 1) +
                                            " outside [0, " + (num_classes ? std::to_string(*num_classes) : "?") + ")");
        }
        labels.push_back(static_cast<std::size_t>(value));
    }
    return labels;
}

std::vector<double> random_unit(Rng& rng, std::size_t dim) {
    std::vector<double> v(dim);
    double n = 0.0;
    while (n < kZeroRow) {
        for (double& x : v) x = rng.gaussian();
        n = norm2(v);
    }
    for (double& x : v) x /= n;
    return v;
}

void normalize_in_place(std::span<double> v) {
    const double n = norm2(v);
    if (n < kZeroRow) fail(ErrorCode::ZeroRow, "cannot normalize a zero row");
    for (double& x : v) x /= n;
}

std::string role_default_name(Role role, std::size_t i) {
    switch (role) {
        case Role::Images: return "image_" + std::to_string(i);
        case Role::Concepts: return "concept_" + std::to_string(i);
        case Role::Classes: return "class_" + std::to_string(i);
    }
    return std::to_string(i);
}

}  // namespace

std::string to_string(Role role) {
    switch (role) {
        case Role::Images: return "images";
        case Role::Concepts: return "concepts";
        case Role::Classes: return "classes";
    }
    return "?";
}

std::string to_string(DType dtype) { return dtype == DType::F32 ? "f32" : "f64"; }

const ManifestFile* EmbeddingManifest::find(Role role) const {
    for (const auto& f : files) {
        if (f.role == role) return &f;
    }
    return nullptr;
}

EmbeddingManifest read_manifest(const fs::path& manifest_path) {
    json doc;
    try {
        doc = json::parse(read_file(manifest_path));
    } catch (const json::parse_error& e) {
        fail(ErrorCode::Parse, manifest_path.string() + ": " + e.what());
    }
    check_keys(doc, {"format_version", "dim", "normalized", "files", "names_files", "labels_file"}, "manifest");

    EmbeddingManifest m;
    m.format_version = get_field<int>(doc, "format_version");
    if (m.format_version != kManifestFormatVersion) {
        fail(ErrorCode::Version, "unsupported manifest format_version " + std::to_string(m.format_version));
    }
    const auto dim = get_field<long long>(doc, "dim");
    if (dim < 1) fail(ErrorCode::Shape, "manifest dim must be >= 1");
    m.dim = static_cast<std::size_t>(dim);
    m.normalized = get_field<bool>(doc, "normalized");

    const json& files = doc.contains("files") ? doc.at("files") : json();
    if (!files.is_array()) fail(ErrorCode::Parse, "manifest 'files' must be an array");
    for (const auto& entry : files) {
        check_keys(entry, {"role", "path", "rows", "dtype"}, "files[]");
        ManifestFile f;
        f.role = parse_role(get_field<std::string>(entry, "role"));
        if (m.find(f.role)) fail(ErrorCode::Parse, "duplicate role " + to_string(f.role));
        f.path = get_field<std::string>(entry, "path");
        const auto rows = get_field<long long>(entry, "rows");
        if (rows < 0) fail(ErrorCode::Shape, "negative row count");
        f.rows = static_cast<std::size_t>(rows);
        f.dtype = parse_dtype(get_field<std::string>(entry, "dtype"));
        m.files.push_back(std::move(f));
    }

    if (doc.contains("names_files")) {
        const json& names = doc.at("names_files");
        check_keys(names, {"images", "concepts", "classes"}, "names_files");
        for (const auto& [key, value] : names.items()) {
            if (!value.is_string()) fail(ErrorCode::Parse, "names_files." + key + " must be a string");
            m.names_files.emplace_back(parse_role(key), value.get<std::string>());
        }
    }
    if (doc.contains("labels_file")) {
        if (!doc.at("labels_file").is_string()) fail(ErrorCode::Parse, "labels_file must be a string");
        m.labels_file = doc.at("labels_file").get<std::string>();
    }
    return m;
}

namespace {

EmbeddingSet load_role(const EmbeddingManifest& m, const fs::path& base, Role role) {
    const ManifestFile* f = m.find(role);
    if (!f) fail(ErrorCode::Parse, "manifest has no '" + to_string(role) + "' file");
    const fs::path path = base / f->path;
    if (!fs::exists(path)) fail(ErrorCode::Io, "missing file " + path.string());
    const std::string bytes = read_file(path);
    const std::size_t expected = f->rows * m.dim * dtype_size(f->dtype);
    if (bytes.size() != expected) {
        fail(ErrorCode::Shape, path.string() + " has " + std::to_string(bytes.size()) + " bytes, expected " +
                                   std::to_string(expected) + " (" + std::to_string(f->rows) + " rows x " +
                                   std::to_string(m.dim) + " x " + to_string(f->dtype) + ")");
    }
    EmbeddingSet set;
    set.matrix = Matrix(f->rows, m.dim);
    if (f->dtype == DType::F32) {
        read_le_f32(bytes, set.matrix.data());
    } else {
        read_le_f64(bytes, set.matrix.data());
    }
    if (!set.matrix.all_finite()) fail(ErrorCode::NonFinite, path.string() + " contains NaN or Inf");

    set.names.clear();
    for (const auto& [r, names_path] : m.names_files) {
        if (r == role) set.names = read_names(base / names_path, f->rows);
    }
    if (set.names.empty()) {
        for (std::size_t i = 0; i < f->rows; ++i) set.names.push_back(role_default_name(role, i));
    }
    if (m.normalized) normalize_rows_in_place(set.matrix);
    return set;
}

}  // namespace

EmbeddingSet load_set(const fs::path& manifest_path, Role role) {
    const auto m = read_manifest(manifest_path);
    return load_role(m, manifest_path.parent_path(), role);
}

DatasetBundle load_bundle(const fs::path& manifest_path) {
    const auto m = read_manifest(manifest_path);
    const fs::path base = manifest_path.parent_path();
    DatasetBundle b;
    b.images = load_role(m, base, Role::Images);
    b.concepts = load_role(m, base, Role::Concepts);
    b.classes = load_role(m, base, Role::Classes);
    if (!m.labels_file) fail(ErrorCode::Parse, "manifest has no labels_file");
    const fs::path labels_path = base / *m.labels_file;
    if (!fs::exists(labels_path)) fail(ErrorCode::Io, "missing file " + labels_path.string());
    b.labels = read_labels(labels_path, b.images.size(), b.classes.size());
    validate_bundle(b);
    return b;
}

void validate_bundle(const DatasetBundle& b) {
    const std::size_t dim = b.images.dim();
    require(b.concepts.dim() == dim && b.classes.dim() == dim, ErrorCode::Shape, "embedding sets differ in dim");
    for (const EmbeddingSet* s : {&b.images, &b.concepts, &b.classes}) {
        require(s->names.size() == s->size(), ErrorCode::Shape, "names are not aligned with rows");
        require(s->matrix.all_finite(), ErrorCode::NonFinite, "embedding contains NaN or Inf");
    }
    require(b.labels.size() == b.images.size(), ErrorCode::Shape, "labels are not aligned with images");
    for (std::size_t label : b.labels) {
        require(label < b.classes.size(), ErrorCode::LabelRange,
                "label " + std::to_string(label) + " outside [0, " + std::to_string(b.classes.size()) + ")");
    }
}

fs::path write_bundle(const DatasetBundle& bundle, const fs::path& dir, const WriteOptions& options) {
    validate_bundle(bundle);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorCode::Io, "cannot create " + dir.string());

    json files = json::array();
    json names = json::object();
    const std::pair<Role, const EmbeddingSet*> sets[] = {
        {Role::Images, &bundle.images}, {Role::Concepts, &bundle.concepts}, {Role::Classes, &bundle.classes}};
    for (const auto& [role, set] : sets) {
        const std::string stem = to_string(role);
        std::string bytes;
        if (options.dtype == DType::F32) {
            append_le_f32(bytes, set->matrix.data());
        } else {
            append_le_f64(bytes, set->matrix.data());
        }
        write_file_atomic(dir / (stem + ".bin"), bytes);
        std::string text;
        for (const auto& n : set->names) text += n + "\n";
        write_file_atomic(dir / (stem + ".txt"), text);
        files.push_back({{"role", stem}, {"path", stem + ".bin"}, {"rows", set->size()}, {"dtype", to_string(options.dtype)}});
        names[stem] = stem + ".txt";
    }
    std::string labels;
    for (std::size_t l : bundle.labels) labels += std::to_string(l) + "\n";
    write_file_atomic(dir / "labels.txt", labels);

    const json manifest = {{"format_version", kManifestFormatVersion},
                           {"dim", bundle.images.dim()},
                           {"normalized", options.normalized},
                           {"files", files},
                           {"names_files", names},
                           {"labels_file", "labels.txt"}};
    const fs::path manifest_path = dir / "manifest.json";
    write_file_atomic(manifest_path, manifest.dump(2) + "\n");
    return manifest_path;
}

void normalize_rows_in_place(Matrix& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const double n = norm2(m.row(r));
        if (n < kZeroRow) fail(ErrorCode::ZeroRow, "row " + std::to_string(r) + " has zero norm");
        for (double& x : m.row(r)) x /= n;
    }
}

EmbeddingSet normalize_rows(const EmbeddingSet& set) {
    EmbeddingSet out = set;
    normalize_rows_in_place(out.matrix);
    return out;
}

DatasetBundle synth_dataset(const SynthSpec& spec, Rng rng) {
    require(spec.num_classes >= 1 && spec.images_per_class >= 1 && spec.concepts_per_class >= 1 && spec.dim >= 1,
            ErrorCode::BadSpec, "synth counts must all be >= 1");
    require(spec.dim >= spec.num_classes, ErrorCode::BadSpec, "dim must be >= num_classes");
    require(std::isfinite(spec.noise_level) && spec.noise_level >= 0.0, ErrorCode::BadSpec, "noise_level must be >= 0");
    require(spec.concept_quality >= 0.0 && spec.concept_quality <= 1.0, ErrorCode::BadSpec,
            "concept_quality must lie in [0, 1]");

    Rng class_rng = rng.derive(1);
    Rng concept_rng = rng.derive(2);
    Rng image_rng = rng.derive(3);

    DatasetBundle b;
    const std::size_t d = spec.dim;

    b.classes.matrix = Matrix(spec.num_classes, d);
    int attempts = 0;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        while (true) {
            if (++attempts > kMaxClassAttempts) {
                fail(ErrorCode::BadSpec, "could not place " + std::to_string(spec.num_classes) +
                                             " class vectors with pairwise cosine <= 0.5 in dim " + std::to_string(d));
            }
            auto candidate = random_unit(class_rng, d);
            bool separated = true;
            for (std::size_t prev = 0; prev < c && separated; ++prev) {
                separated = dot(candidate, b.classes.matrix.row(prev)) <= kMaxClassCosine;
            }
            if (separated) {
                std::copy(candidate.begin(), candidate.end(), b.classes.matrix.row(c).begin());
                break;
            }
        }
        b.classes.names.push_back("class_" + std::to_string(c));
    }

    const double q = spec.concept_quality;
    b.concepts.matrix = Matrix(spec.num_classes * spec.concepts_per_class, d);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        for (std::size_t j = 0; j < spec.concepts_per_class; ++j) {
            const std::size_t row = c * spec.concepts_per_class + j;
            const auto dir = random_unit(concept_rng, d);
            auto out = b.concepts.matrix.row(row);
            const auto cls = b.classes.matrix.row(c);
            for (std::size_t k = 0; k < d; ++k) out[k] = q * cls[k] + (1.0 - q) * dir[k];
            normalize_in_place(out);
            b.concepts.names.push_back("concept_" + std::to_string(c) + "_" + std::to_string(j));
        }
    }

    b.images.matrix = Matrix(spec.num_classes * spec.images_per_class, d);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        for (std::size_t j = 0; j < spec.images_per_class; ++j) {
            const std::size_t row = c * spec.images_per_class + j;
            auto out = b.images.matrix.row(row);
            const auto cls = b.classes.matrix.row(c);
            for (std::size_t k = 0; k < d; ++k) out[k] = cls[k] + spec.noise_level * image_rng.gaussian();
            normalize_in_place(out);
            b.images.names.push_back("image_" + std::to_string(row));
            b.labels.push_back(c);
        }
    }
    return b;
}

}  // namespace cbmkit
