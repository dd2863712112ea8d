#pragma once

#include <string>
#include <vector>

#include "cbmkit/embedding_store.hpp"

namespace cbmkit {

/// Image-concept scores (`image_concept`, |B| x |D|) and class-concept scores (`class_concept`, |C| x |D|).
struct SimilarityPair {
    Matrix image_concept;
    Matrix class_concept;
};

struct CmsResult {
    std::vector<std::size_t> predictions;
    double accuracy = 0.0;
    /// Classes without images report 0.
    std::vector<double> per_class_accuracy;
};

/// Raw dot products, no normalization.
SimilarityPair build_similarity(const EmbeddingSet& images, const EmbeddingSet& concepts, const EmbeddingSet& classes);

/// For each image row, the class whose concept-score row is cosine-closest. Cosines within 1e-12
/// of the best count as tied and the lowest index wins.
std::vector<std::size_t> cms_classify(const SimilarityPair& pair);

/// Concept Matrix Search over the whole bundle, `batch_size` images at a time.
/// Predictions do not depend on the batch size or thread count.
CmsResult evaluate_cms(const DatasetBundle& bundle, std::size_t batch_size, unsigned threads = 1);

std::vector<std::size_t> zero_shot_classify(const EmbeddingSet& images, const EmbeddingSet& classes);

CmsResult score_predictions(std::vector<std::size_t> predictions, const std::vector<std::size_t>& labels,
                            std::size_t num_classes);

std::string cms_result_json(const CmsResult& result);
/// `class,accuracy` table.
std::string per_class_csv(const CmsResult& result, const std::vector<std::string>& class_names);

}  // namespace cbmkit
