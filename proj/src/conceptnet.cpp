#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <httplib.h>
#include <json.hpp>
#include <set>
#include <thread>

#include "cbmkit/concepts.hpp"

namespace cbmkit {

namespace {

bool is_retryable(int status) { return status == 429 || status >= 500; }

std::string percent_encode(std::string_view s) {
    static constexpr char kHex[] = "0123456789ABCDEF";
    std::string out;
    for (unsigned char c : s) {
        if (std::isalnum(c) || c == '_' || c == '-' || c == '.' || c == '~') {
            out += static_cast<char>(c);
        } else {
            out += '%';
            out += kHex[c >> 4];
            out += kHex[c & 0xF];
        }
    }
    return out;
}

// "/c/en/dog/n/wn/animal" -> "dog"; empty when the id is not an English concept.
std::string_view english_term(std::string_view id) {
    constexpr std::string_view prefix = "/c/en/";
    if (id.substr(0, prefix.size()) != prefix) return {};
    id.remove_prefix(prefix.size());
    return id.substr(0, id.find('/'));
}

std::string node_id(const nlohmann::json& node) {
    if (!node.is_object()) return {};
    for (const char* key : {"term", "@id"}) {
        if (node.contains(key) && node.at(key).is_string()) return node.at(key).get<std::string>();
    }
    return {};
}

std::string relation_label(const nlohmann::json& rel) {
    if (!rel.is_object()) return {};
    if (rel.contains("label") && rel.at("label").is_string()) return rel.at("label").get<std::string>();
    if (rel.contains("@id") && rel.at("@id").is_string()) {
        const auto id = rel.at("@id").get<std::string>();
        const auto slash = id.rfind('/');
        return slash == std::string::npos ? id : id.substr(slash + 1);
    }
    return {};
}

}  // namespace

std::string conceptnet_url_from_env() {
    const char* env = std::getenv(kConceptNetUrlEnv);
    return env && *env ? std::string(env) : std::string(kDefaultConceptNetUrl);
}

std::string slugify(std::string_view label) {
    std::string out;
    bool pending_sep = false;
    for (unsigned char c : label) {
        if (std::isspace(c) || c == '_') {
            pending_sep = !out.empty();
            continue;
        }
        if (pending_sep) out += '_';
        pending_sep = false;
        out += static_cast<char>(std::tolower(c));
    }
    return out;
}

std::string term_text(std::string_view node) {
    std::string out(english_term(node));
    if (out.empty()) out = std::string(node);
    for (char& c : out) {
        if (c == '_') c = ' ';
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

std::vector<ConceptCandidate> parse_conceptnet_edges(std::string_view json_text, const std::string& class_label,
                                                     const std::vector<std::string>& relations) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorCode::Parse, std::string("ConceptNet response is not JSON: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("edges") || !doc.at("edges").is_array()) {
        fail(ErrorCode::Parse, "ConceptNet response has no 'edges' array");
    }
    const std::string slug = slugify(class_label);
    const std::set<std::string> wanted(relations.begin(), relations.end());

    std::vector<ConceptCandidate> out;
    std::set<std::string> seen;
    for (const auto& edge : doc.at("edges")) {
        if (!edge.is_object() || !edge.contains("start") || !edge.contains("end") || !edge.contains("rel")) {
            fail(ErrorCode::Parse, "ConceptNet edge lacks start/end/rel");
        }
        const std::string rel = relation_label(edge.at("rel"));
        if (!wanted.contains(rel)) continue;
        const std::string start = node_id(edge.at("start"));
        const std::string end = node_id(edge.at("end"));
        std::string other;
        if (english_term(start) == slug) {
            other = end;
        } else if (english_term(end) == slug) {
            other = start;
        } else {
            continue;
        }
        if (english_term(other).empty() || english_term(other) == slug) continue;
        std::string text = term_text(other);
        if (seen.insert(text).second) out.push_back({std::move(text), class_label, rel});
    }
    return out;
}

FetchOutcome fetch_conceptnet(const std::string& class_label, const ConceptNetOptions& options) {
    const std::string slug = slugify(class_label);
    require(!slug.empty(), ErrorCode::BadSpec, "class label is empty");
    require(options.max_attempts >= 1, ErrorCode::BadSpec, "max_attempts must be >= 1");

    httplib::Client client(options.base_url);
    if (!client.is_valid()) fail(ErrorCode::Http, "unusable ConceptNet base URL '" + options.base_url + "'");
    client.set_connection_timeout(options.timeout);
    client.set_read_timeout(options.timeout);
    client.set_follow_location(true);

    const std::string path = "/c/en/" + percent_encode(slug) + "?limit=" + std::to_string(options.limit);
    std::string last_problem;
    auto backoff = options.initial_backoff;
    for (int attempt = 1; attempt <= options.max_attempts; ++attempt) {
        auto res = client.Get(path);
        if (res) {
            if (res->status == 200) {
                return {parse_conceptnet_edges(res->body, class_label, options.relations), {}};
            }
            if (res->status == 404) {
                return {{}, {"ConceptNet has no entry for '" + class_label + "' (HTTP 404)"}};
            }
            last_problem = "HTTP " + std::to_string(res->status);
            if (!is_retryable(res->status)) break;
        } else {
            last_problem = "transport error: " + httplib::to_string(res.error());
        }
        if (attempt < options.max_attempts) {
            std::this_thread::sleep_for(backoff);
            backoff *= 2;
        }
    }
    fail(ErrorCode::Http, "GET " + path + " failed: " + last_problem);
}

FetchOutcome fetch_conceptnet_many(const std::vector<std::string>& labels, const ConceptNetOptions& options) {
    std::vector<FetchOutcome> results(labels.size());
    std::vector<std::exception_ptr> errors(labels.size());
    const std::size_t workers = std::max<std::size_t>(1, std::min(options.max_in_flight, labels.size()));
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < labels.size(); i += workers) {
                    try {
                        results[i] = fetch_conceptnet(labels[i], options);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    FetchOutcome merged;
    std::set<std::string> seen;
    for (auto& r : results) {
        for (auto& c : r.candidates) {
            if (seen.insert(c.text).second) merged.candidates.push_back(std::move(c));
        }
        for (auto& w : r.warnings) merged.warnings.push_back(std::move(w));
    }
    return merged;
}

}  // namespace cbmkit
