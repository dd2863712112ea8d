#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cbmkit/cli.hpp"
#include "cbmkit/cms.hpp"
#include "cbmkit/trainer.hpp"

namespace py = pybind11;
using namespace cbmkit;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
    if (a.ndim() != 2) throw Error(ErrorCode::Shape, "expected a 2-d array");
    const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
    return Matrix(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

Array to_array(const Matrix& m) {
    Array out({m.rows(), m.cols()});
    std::copy(m.data().begin(), m.data().end(), out.mutable_data());
    return out;
}

EmbeddingSet to_set(const Array& a, std::vector<std::string> names, const char* prefix) {
    EmbeddingSet s{to_matrix(a), std::move(names)};
    if (s.names.empty()) {
        for (std::size_t i = 0; i < s.size(); ++i) s.names.push_back(prefix + std::to_string(i));
    }
    return s;
}

py::dict bundle_dict(const DatasetBundle& b) {
    py::dict d;
    d["images"] = to_array(b.images.matrix);
    d["concepts"] = to_array(b.concepts.matrix);
    d["classes"] = to_array(b.classes.matrix);
    d["labels"] = b.labels;
    d["image_names"] = b.images.names;
    d["concept_names"] = b.concepts.names;
    d["class_names"] = b.classes.names;
    return d;
}

LossKind parse_loss(const std::string& name, double lambda, bool hard) {
    if (name == "contrastive") return ContrastiveLoss{};
    if (name == "sparse") return SparseLoss{{}, hard};
    if (name == "l1") return L1Loss{lambda};
    throw Error(ErrorCode::BadSpec, "unknown loss '" + name + "'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "cbmkit native core";

    py::register_exception<Error>(m, "CbmkitError", PyExc_RuntimeError);

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int code;
            {
                py::gil_scoped_release release;
                code = run_cli(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Run a cbmkit command; returns (exit_code, stdout, stderr).");

    m.def(
        "synth",
        [](std::size_t classes, std::size_t images_per_class, std::size_t concepts_per_class, std::size_t dim,
           double noise, double quality, std::uint64_t seed) {
            return bundle_dict(synth_dataset({classes, images_per_class, concepts_per_class, dim, noise, quality}, Rng(seed)));
        },
        py::arg("classes") = 5, py::arg("images_per_class") = 50, py::arg("concepts_per_class") = 10,
        py::arg("dim") = 64, py::arg("noise") = 0.05, py::arg("quality") = 0.9, py::arg("seed") = 0);

    m.def("load_bundle", [](const std::filesystem::path& manifest) { return bundle_dict(load_bundle(manifest)); },
          py::arg("manifest"));

    m.def(
        "write_bundle",
        [](const std::filesystem::path& dir, const Array& images, const Array& concepts, const Array& classes,
           const std::vector<std::size_t>& labels, std::vector<std::string> image_names,
           std::vector<std::string> concept_names, std::vector<std::string> class_names, const std::string& dtype,
           bool normalized) {
            if (dtype != "f32" && dtype != "f64") throw Error(ErrorCode::BadSpec, "dtype must be 'f32' or 'f64'");
            const DatasetBundle b{to_set(images, std::move(image_names), "image_"),
                                  to_set(concepts, std::move(concept_names), "concept_"),
                                  to_set(classes, std::move(class_names), "class_"), labels};
            return write_bundle(b, dir, {dtype == "f32" ? DType::F32 : DType::F64, normalized});
        },
        py::arg("dir"), py::arg("images"), py::arg("concepts"), py::arg("classes"), py::arg("labels"),
        py::arg("image_names") = std::vector<std::string>{}, py::arg("concept_names") = std::vector<std::string>{},
        py::arg("class_names") = std::vector<std::string>{}, py::arg("dtype") = "f32", py::arg("normalized") = true,
        "Write a manifest bundle; rows are stored as given. Returns the manifest path.");

    m.def(
        "cms_classify",
        [](const Array& images, const Array& concepts, const Array& classes) {
            return cms_classify(build_similarity(to_set(images, {}, "i"), to_set(concepts, {}, "d"), to_set(classes, {}, "c")));
        },
        py::arg("images"), py::arg("concepts"), py::arg("classes"));

    m.def(
        "zero_shot_classify",
        [](const Array& images, const Array& classes) {
            return zero_shot_classify(to_set(images, {}, "i"), to_set(classes, {}, "c"));
        },
        py::arg("images"), py::arg("classes"));

    m.def(
        "compute_scores",
        [](const Array& images, const Array& concepts, double alpha_log) {
            return to_array(compute_scores(to_set(images, {}, "i"), to_set(concepts, {}, "d"), alpha_log));
        },
        py::arg("images"), py::arg("concepts"), py::arg("alpha_log") = kDefaultAlphaLog);

    m.def(
        "train_cbm",
        [](const std::filesystem::path& manifest, const std::string& loss, std::size_t steps, std::size_t batch_size,
           std::uint64_t seed, double lam, bool hard, std::size_t eval_every) {
            TrainConfig cfg;
            cfg.loss = parse_loss(loss, lam, hard);
            cfg.steps = steps;
            cfg.batch_size = batch_size;
            cfg.seed = seed;
            cfg.eval_every = eval_every;
            const auto bundle = load_bundle(manifest);
            TrainResult r;
            {
                py::gil_scoped_release release;
                r = train_cbm(bundle, cfg);
            }
            py::dict out;
            out["cbl"] = to_array(r.checkpoint.model.cbl);
            out["fc"] = to_array(r.checkpoint.model.fc);
            out["train_acc"] = evaluate_checkpoint(r.checkpoint, bundle).accuracy;
            out["metrics_csv"] = metrics_csv(r.metrics);
            out["checkpoint"] = py::bytes(serialize_checkpoint(r.checkpoint));
            return out;
        },
        py::arg("manifest"), py::arg("loss") = "sparse", py::arg("steps") = 2000, py::arg("batch_size") = 32,
        py::arg("seed") = 0, py::arg("lam") = 0.05, py::arg("hard") = false, py::arg("eval_every") = 100);

    m.attr("DEFAULT_ALPHA_LOG") = kDefaultAlphaLog;
    m.attr("MANIFEST_FORMAT_VERSION") = kManifestFormatVersion;
}
