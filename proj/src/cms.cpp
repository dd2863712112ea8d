#include "cbmkit/cms.hpp"

#include <json.hpp>
#include <sstream>
#include <thread>

#include "cbmkit/io_util.hpp"

namespace cbmkit {

namespace {

constexpr double kZeroNorm = 1e-12;
// Cosines this close to the maximum count as ties, so exact ties resolve to the lowest index
// regardless of how the rounding of each cosine happened to fall.
constexpr double kTieTolerance = 1e-12;

void check_rows_nonzero(const Matrix& m, const char* what) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        if (norm2(m.row(r)) < kZeroNorm) fail(ErrorCode::ZeroNorm, std::string(what) + " row " + std::to_string(r) + " is all zero");
    }
}

// Row-wise cosine argmax against a fixed set of reference rows.
std::vector<std::size_t> nearest_by_cosine(const Matrix& queries, const Matrix& refs) {
    if (refs.rows() == 0) fail(ErrorCode::Shape, "no classes to choose from");
    if (queries.cols() != refs.cols()) fail(ErrorCode::Shape, "query and reference widths differ");
    std::vector<double> ref_norms(refs.rows());
    for (std::size_t m = 0; m < refs.rows(); ++m) ref_norms[m] = norm2(refs.row(m));
    std::vector<std::size_t> out(queries.rows());
    std::vector<double> scores(refs.rows());
    for (std::size_t k = 0; k < queries.rows(); ++k) {
        const auto q = queries.row(k);
        const double qn = norm2(q);
        for (std::size_t m = 0; m < refs.rows(); ++m) scores[m] = dot(q, refs.row(m)) / (qn * ref_norms[m]);
        const double top = scores[argmax(scores)];
        std::size_t pick = 0;
        while (scores[pick] < top - kTieTolerance) ++pick;
        out[k] = pick;
    }
    return out;
}

Matrix slice_rows(const Matrix& m, std::size_t begin, std::size_t end) {
    Matrix out(end - begin, m.cols());
    for (std::size_t r = begin; r < end; ++r) {
        std::copy(m.row(r).begin(), m.row(r).end(), out.row(r - begin).begin());
    }
    return out;
}

}  // namespace

SimilarityPair build_similarity(const EmbeddingSet& images, const EmbeddingSet& concepts, const EmbeddingSet& classes) {
    if (images.dim() != concepts.dim() || classes.dim() != concepts.dim()) {
        fail(ErrorCode::Shape, "images, concepts and classes must share a dim");
    }
    return {matmul_transposed(images.matrix, concepts.matrix), matmul_transposed(classes.matrix, concepts.matrix)};
}

std::vector<std::size_t> cms_classify(const SimilarityPair& pair) {
    if (pair.image_concept.cols() != pair.class_concept.cols() || pair.class_concept.cols() == 0) {
        fail(ErrorCode::Shape, "V and T must share a nonzero concept count");
    }
    check_rows_nonzero(pair.image_concept, "V");
    check_rows_nonzero(pair.class_concept, "T");
    return nearest_by_cosine(pair.image_concept, pair.class_concept);
}

CmsResult evaluate_cms(const DatasetBundle& bundle, std::size_t batch_size, unsigned threads) {
    const std::size_t n = bundle.num_images();
    if (batch_size < 1 || batch_size > n) {
        fail(ErrorCode::BadSpec, "batch size must lie in [1, " + std::to_string(n) + "]");
    }
    if (bundle.concepts.dim() != bundle.images.dim() || bundle.classes.dim() != bundle.images.dim()) {
        fail(ErrorCode::Shape, "images, concepts and classes must share a dim");
    }
    const Matrix class_concept = matmul_transposed(bundle.classes.matrix, bundle.concepts.matrix);
    check_rows_nonzero(class_concept, "T");

    const std::size_t num_batches = (n + batch_size - 1) / batch_size;
    std::vector<std::size_t> predictions(n);
    std::vector<std::exception_ptr> errors(num_batches);
    auto run_batch = [&](std::size_t b) {
        try {
            const std::size_t begin = b * batch_size;
            const std::size_t end = std::min(n, begin + batch_size);
            SimilarityPair pair{matmul_transposed(slice_rows(bundle.images.matrix, begin, end), bundle.concepts.matrix),
                                class_concept};
            const auto part = cms_classify(pair);
            std::copy(part.begin(), part.end(), predictions.begin() + static_cast<std::ptrdiff_t>(begin));
        } catch (...) {
            errors[b] = std::current_exception();
        }
    };

    const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(num_batches)));
    if (workers == 1) {
        for (std::size_t b = 0; b < num_batches; ++b) run_batch(b);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t b = w; b < num_batches; b += workers) run_batch(b);
            });
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return score_predictions(std::move(predictions), bundle.labels, bundle.num_classes());
}

std::vector<std::size_t> zero_shot_classify(const EmbeddingSet& images, const EmbeddingSet& classes) {
    if (images.dim() != classes.dim()) fail(ErrorCode::Shape, "images and classes must share a dim");
    check_rows_nonzero(images.matrix, "image");
    check_rows_nonzero(classes.matrix, "class");
    return nearest_by_cosine(images.matrix, classes.matrix);
}

CmsResult score_predictions(std::vector<std::size_t> predictions, const std::vector<std::size_t>& labels,
                            std::size_t num_classes) {
    if (predictions.size() != labels.size()) fail(ErrorCode::Shape, "predictions and labels differ in length");
    CmsResult r;
    std::vector<std::size_t> correct(num_classes, 0), total(num_classes, 0);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) fail(ErrorCode::LabelRange, "label outside class range");
        ++total[labels[i]];
        if (predictions[i] == labels[i]) {
            ++correct[labels[i]];
            ++hits;
        }
    }
    r.accuracy = labels.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(labels.size());
    r.per_class_accuracy.resize(num_classes, 0.0);
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (total[c] > 0) r.per_class_accuracy[c] = static_cast<double>(correct[c]) / static_cast<double>(total[c]);
    }
    r.predictions = std::move(predictions);
    return r;
}

std::string cms_result_json(const CmsResult& result) {
    const nlohmann::json doc = {{"accuracy", result.accuracy},
                                {"per_class_accuracy", result.per_class_accuracy},
                                {"predictions", result.predictions}};
    return doc.dump(2) + "\n";
}

std::string per_class_csv(const CmsResult& result, const std::vector<std::string>& class_names) {
    std::ostringstream out;
    out.precision(17);
    out << "class,accuracy\n";
    for (std::size_t c = 0; c < result.per_class_accuracy.size(); ++c) {
        out << csv_field(c < class_names.size() ? class_names[c] : std::to_string(c)) << ',' << result.per_class_accuracy[c] << '\n';
    }
    return out.str();
}

}  // namespace cbmkit
