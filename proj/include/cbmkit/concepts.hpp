#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "cbmkit/embedding_store.hpp"

namespace cbmkit {

struct ConceptCandidate {
    std::string text;
    std::string source_label;
    std::string relation;
};

struct FilterConfig {
    std::size_t max_letters = 30;
    double class_cutoff = 0.85;
    double concept_cutoff = 0.9;
    double low_sim_drop_fraction = 0.05;
};

void validate_filter_config(const FilterConfig& cfg);

enum class FilterStage { Length, ClassSim, Dedup, LowMeanSim };
std::string to_string(FilterStage stage);

struct Removal {
    std::size_t index = 0;
    FilterStage stage = FilterStage::Length;
    std::string detail;
};

struct FilterReport {
    std::vector<std::size_t> kept;
    std::vector<Removal> removed;
};

/// Unicode scalar values in UTF-8 `text` (non-continuation bytes), spaces excluded.
std::size_t letter_count(std::string_view text);

/// Four stages in order: length, similarity to any class, near-duplicate pairs, and the
/// lowest-mean-similarity fraction. Each removed concept records the first stage that fired.
FilterReport run_filter_pipeline(const std::vector<ConceptCandidate>& candidates, const EmbeddingSet& concept_embeddings,
                                 const EmbeddingSet& class_embeddings, const FilterConfig& cfg);

std::string filter_report_json(const FilterReport& report, const std::vector<ConceptCandidate>& candidates);

/// One concept per line; blank lines are skipped and surrounding whitespace trimmed.
std::vector<ConceptCandidate> parse_candidates(std::string_view text);
std::string candidates_text(const std::vector<ConceptCandidate>& candidates);

// ---------------------------------------------------------------------------
// ConceptNet

inline constexpr const char* kDefaultConceptNetUrl = "https://api.conceptnet.io";
/// Environment variable overriding the ConceptNet base URL.
inline constexpr const char* kConceptNetUrlEnv = "CBMKIT_CONCEPTNET_URL";

struct ConceptNetOptions {
    std::string base_url = kDefaultConceptNetUrl;
    std::vector<std::string> relations = {"RelatedTo", "IsA",     "HasA",    "PartOf",
                                          "AtLocation", "UsedFor", "MadeOf", "CapableOf"};
    std::size_t limit = 1000;
    /// Total attempts per request, the first included.
    int max_attempts = 3;
    std::chrono::milliseconds initial_backoff{500};
    std::chrono::seconds timeout{30};
    std::size_t max_in_flight = 4;
};

/// Base URL from the environment override, falling back to the default.
std::string conceptnet_url_from_env();

/// "Golden Retriever" -> "golden_retriever"
std::string slugify(std::string_view label);

/// "/c/en/hot_dog/n" -> "hot dog"
std::string term_text(std::string_view node_id);

/// Other-end terms of English edges touching /c/en/<slug> whose relation is in `relations`,
/// deduplicated in first-seen order.
std::vector<ConceptCandidate> parse_conceptnet_edges(std::string_view json_text, const std::string& class_label,
                                                     const std::vector<std::string>& relations);

struct FetchOutcome {
    std::vector<ConceptCandidate> candidates;
    std::vector<std::string> warnings;
};

/// GET <base>/c/en/<slug>?limit=<n>. 404 yields an empty list with a warning; 429, 5xx and
/// transport failures are retried with exponential backoff up to max_attempts.
FetchOutcome fetch_conceptnet(const std::string& class_label, const ConceptNetOptions& options);

/// Fetches several labels with bounded concurrency; results keep label order.
FetchOutcome fetch_conceptnet_many(const std::vector<std::string>& labels, const ConceptNetOptions& options);

}  // namespace cbmkit
