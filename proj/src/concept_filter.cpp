#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <numeric>

#include "cbmkit/concepts.hpp"

namespace cbmkit {

namespace {

std::string fixed(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

// Mean cosine of each member of `alive` to the other members.
template <typename Cos>
std::vector<double> mean_similarity(const std::vector<std::size_t>& alive, const Cos& cos) {
    std::vector<double> mean(alive.size(), 0.0);
    if (alive.size() < 2) return mean;
    for (std::size_t a = 0; a < alive.size(); ++a) {
        double total = 0.0;
        for (std::size_t b = 0; b < alive.size(); ++b) {
            if (a != b) total += cos(alive[a], alive[b]);
        }
        mean[a] = total / static_cast<double>(alive.size() - 1);
    }
    return mean;
}

}  // namespace

void validate_filter_config(const FilterConfig& cfg) {
    require(cfg.max_letters >= 1, ErrorCode::BadSpec, "max_letters must be >= 1");
    require(cfg.class_cutoff > 0.0 && cfg.class_cutoff <= 1.0, ErrorCode::BadSpec, "class cutoff must lie in (0, 1]");
    require(cfg.concept_cutoff > 0.0 && cfg.concept_cutoff <= 1.0, ErrorCode::BadSpec, "concept cutoff must lie in (0, 1]");
    require(cfg.low_sim_drop_fraction >= 0.0 && cfg.low_sim_drop_fraction < 1.0, ErrorCode::BadSpec,
            "low-similarity drop fraction must lie in [0, 1)");
}

std::string to_string(FilterStage stage) {
    switch (stage) {
        case FilterStage::Length: return "LENGTH";
        case FilterStage::ClassSim: return "CLASS_SIM";
        case FilterStage::Dedup: return "DEDUP";
        case FilterStage::LowMeanSim: return "LOW_MEAN_SIM";
    }
    return "?";
}

std::size_t letter_count(std::string_view text) {
    std::size_t n = 0;
    for (unsigned char c : text) {
        if ((c & 0xC0) != 0x80 && c != ' ') ++n;
    }
    return n;
}

FilterReport run_filter_pipeline(const std::vector<ConceptCandidate>& candidates, const EmbeddingSet& concept_embeddings,
                                 const EmbeddingSet& class_embeddings, const FilterConfig& cfg) {
    validate_filter_config(cfg);
    const std::size_t n = candidates.size();
    require(concept_embeddings.size() == n, ErrorCode::Shape,
            "concept embeddings have " + std::to_string(concept_embeddings.size()) + " rows for " + std::to_string(n) +
                " candidates");
    require(concept_embeddings.dim() == class_embeddings.dim() || n == 0, ErrorCode::Shape,
            "concept and class embeddings differ in dim");
    for (const auto& c : candidates) require(!trim(c.text).empty(), ErrorCode::BadSpec, "empty concept text");

    FilterReport report;
    std::vector<std::size_t> alive;

    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t letters = letter_count(candidates[i].text);
        if (letters > cfg.max_letters) {
            report.removed.push_back({i, FilterStage::Length, std::to_string(letters) + " letters"});
        } else {
            alive.push_back(i);
        }
    }

    std::vector<std::size_t> next;
    for (std::size_t i : alive) {
        double best = -2.0;
        std::size_t best_class = 0;
        for (std::size_t c = 0; c < class_embeddings.size(); ++c) {
            const double s = cosine(concept_embeddings.matrix.row(i), class_embeddings.matrix.row(c));
            if (s > best) {
                best = s;
                best_class = c;
            }
        }
        if (best > cfg.class_cutoff) {
            report.removed.push_back({i, FilterStage::ClassSim,
                                      "cos=" + fixed(best) + " to class '" + class_embeddings.names[best_class] + "'"});
        } else {
            next.push_back(i);
        }
    }
    alive.swap(next);

    // Unit-normalized copies so pairwise cosines reduce to dot products.
    Matrix unit(n, concept_embeddings.dim());
    for (std::size_t i : alive) {
        const auto src = concept_embeddings.matrix.row(i);
        const double len = norm2(src);
        require(len >= 1e-12, ErrorCode::ZeroNorm, "concept embedding " + std::to_string(i) + " has zero norm");
        auto dst = unit.row(i);
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = src[k] / len;
    }
    const auto cos = [&unit](std::size_t a, std::size_t b) { return dot(unit.row(a), unit.row(b)); };

    {
        const auto mean = mean_similarity(alive, cos);
        std::vector<bool> dropped(alive.size(), false);
        for (std::size_t a = 0; a < alive.size(); ++a) {
            for (std::size_t b = a + 1; b < alive.size() && !dropped[a]; ++b) {
                if (dropped[b]) continue;
                const double s = cos(alive[a], alive[b]);
                if (s <= cfg.concept_cutoff) continue;
                // Lower mean similarity loses; on a tie the later index goes.
                const std::size_t loser = mean[a] < mean[b] ? a : b;
                const std::size_t winner = loser == a ? b : a;
                dropped[loser] = true;
                report.removed.push_back({alive[loser], FilterStage::Dedup,
                                          "cos=" + fixed(s) + " with #" + std::to_string(alive[winner]) + " (mean " +
                                              fixed(mean[loser]) + " vs " + fixed(mean[winner]) + ")"});
            }
        }
        next.clear();
        for (std::size_t a = 0; a < alive.size(); ++a) {
            if (!dropped[a]) next.push_back(alive[a]);
        }
        alive.swap(next);
    }

    const auto drop_count =
        static_cast<std::size_t>(std::floor(cfg.low_sim_drop_fraction * static_cast<double>(alive.size())));
    if (drop_count > 0) {
        const auto mean = mean_similarity(alive, cos);
        std::vector<std::size_t> order(alive.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (mean[a] != mean[b]) return mean[a] < mean[b];
            return a > b;
        });
        std::vector<bool> dropped(alive.size(), false);
        for (std::size_t r = 0; r < drop_count; ++r) {
            dropped[order[r]] = true;
            report.removed.push_back({alive[order[r]], FilterStage::LowMeanSim, "mean cos=" + fixed(mean[order[r]])});
        }
        next.clear();
        for (std::size_t a = 0; a < alive.size(); ++a) {
            if (!dropped[a]) next.push_back(alive[a]);
        }
        alive.swap(next);
    }

    report.kept = alive;
    return report;
}

std::string filter_report_json(const FilterReport& report, const std::vector<ConceptCandidate>& candidates) {
    using nlohmann::json;
    json kept = json::array();
    for (std::size_t i : report.kept) kept.push_back({{"index", i}, {"text", candidates.at(i).text}});
    json removed = json::array();
    for (const auto& r : report.removed) {
        removed.push_back(
            {{"index", r.index}, {"text", candidates.at(r.index).text}, {"stage", to_string(r.stage)}, {"detail", r.detail}});
    }
    return json{{"kept", kept}, {"removed", removed}}.dump(2) + "\n";
}

std::vector<ConceptCandidate> parse_candidates(std::string_view text) {
    std::vector<ConceptCandidate> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        const auto line = trim(text.substr(start, end - start));
        if (!line.empty()) out.push_back({std::string(line), "", ""});
        start = end + 1;
    }
    return out;
}

std::string candidates_text(const std::vector<ConceptCandidate>& candidates) {
    std::string out;
    for (const auto& c : candidates) out += c.text + "\n";
    return out;
}

}  // namespace cbmkit
