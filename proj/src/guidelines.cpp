#include "segref/guidelines.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

namespace segref {

float dot(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.size() != b.size()) {
        throw ShapeError("embedding dimension mismatch");
    }
    float acc = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double l2_norm(const EmbeddingVector& v) {
    double acc = 0.0;
    for (float x : v) acc += static_cast<double>(x) * x;
    return std::sqrt(acc);
}

EmbeddingVector l2_normalize(EmbeddingVector v) {
    double norm = l2_norm(v);
    if (norm == 0.0) {
        if (!v.empty()) v[0] = 1.0f;
        return v;
    }
    for (float& x : v) x = static_cast<float>(x / norm);
    return v;
}

namespace {

// FNV-1a over a token.
std::uint64_t token_hash(const std::string& token) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : token) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

EmbeddingVector HashEmbedder::embed(const std::string& text) const {
    EmbeddingVector v(static_cast<std::size_t>(dim_), 0.0f);
    std::string token;
    auto flush = [&] {
        if (!token.empty()) {
            v[token_hash(token) % static_cast<std::uint64_t>(dim_)] += 1.0f;
            token.clear();
        }
    };
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            token.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
        }
    }
    flush();
    return l2_normalize(std::move(v));
}

long guideline_number(const std::string& id) {
    if (id.size() < 2 || id[0] != 'G') {
        throw ValidationError("guideline id must match G<n>: " + id);
    }
    long value = 0;
    for (std::size_t i = 1; i < id.size(); ++i) {
        if (!std::isdigit(static_cast<unsigned char>(id[i]))) {
            throw ValidationError("guideline id must match G<n>: " + id);
        }
        value = value * 10 + (id[i] - '0');
    }
    return value;
}

namespace {

std::vector<Guideline> ingest_json(const nlohmann::json& doc) {
    std::vector<Guideline> out;
    for (const auto& entry : doc) {
        if (!entry.is_object() || !entry.contains("id") || !entry.contains("text")) {
            throw IngestError("corpus entries require id and text fields");
        }
        Guideline g;
        g.id = entry.at("id").get<std::string>();
        g.text = entry.at("text").get<std::string>();
        g.summary = entry.value("summary", std::string());
        guideline_number(g.id);
        if (g.text.empty()) {
            throw IngestError("guideline " + g.id + " has empty text");
        }
        out.push_back(std::move(g));
    }
    return out;
}

std::vector<Guideline> ingest_plain_text(const std::string& document) {
    std::vector<Guideline> out;
    std::string line;
    auto flush = [&] {
        // trim
        std::size_t begin = line.find_first_not_of(" \t\r");
        std::size_t end = line.find_last_not_of(" \t\r");
        if (begin != std::string::npos) {
            Guideline g;
            g.id = "G" + std::to_string(out.size());
            g.text = line.substr(begin, end - begin + 1);
            out.push_back(std::move(g));
        }
        line.clear();
    };
    for (char c : document) {
        if (c == '\n') {
            flush();
        } else {
            line.push_back(c);
        }
    }
    flush();
    return out;
}

}  // namespace

std::vector<Guideline> ingest(const std::string& document) {
    nlohmann::json doc = nlohmann::json::parse(document, nullptr, false);
    std::vector<Guideline> out;
    if (!doc.is_discarded() && doc.is_array()) {
        out = ingest_json(doc);
    } else {
        out = ingest_plain_text(document);
    }
    if (out.empty()) {
        throw EmptyCorpusError("corpus contains no guidelines");
    }
    std::unordered_set<std::string> seen;
    for (const auto& g : out) {
        if (!seen.insert(g.id).second) {
            throw IngestError("duplicate guideline id " + g.id);
        }
    }
    return out;
}

GuidelineIndex build_index(const std::vector<Guideline>& guidelines,
                           const Embedder& embedder) {
    GuidelineIndex index;
    index.embedder_tag = embedder.tag();
    index.dim = embedder.dim();
    index.guidelines = guidelines;
    index.vectors.reserve(guidelines.size());
    for (const auto& g : guidelines) {
        EmbeddingVector v;
        try {
            v = embedder.embed(g.text);
        } catch (const std::exception& e) {
            throw IngestError("embedding failed for " + g.id + ": " + e.what());
        }
        if (static_cast<int>(v.size()) != index.dim) {
            throw ShapeError("embedder returned wrong dimension for " + g.id);
        }
        index.vectors.push_back(l2_normalize(std::move(v)));
    }
    return index;
}

std::vector<ScoredGuideline> top_k(const GuidelineIndex& index,
                                   const EmbeddingVector& query, std::size_t k) {
    if (static_cast<int>(query.size()) != index.dim) {
        throw ShapeError("query dimension does not match index");
    }
    if (k == 0) {
        throw ValidationError("k must be at least 1");
    }
    std::vector<std::size_t> order(index.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> scores(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
        scores[i] = static_cast<double>(dot(index.vectors[i], query));
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return guideline_number(index.guidelines[a].id) <
               guideline_number(index.guidelines[b].id);
    });
    std::vector<ScoredGuideline> out;
    out.reserve(std::min(k, index.size()));
    for (std::size_t i = 0; i < order.size() && i < k; ++i) {
        out.push_back(ScoredGuideline{index.guidelines[order[i]], scores[order[i]]});
    }
    return out;
}

std::string index_to_json(const GuidelineIndex& index) {
    nlohmann::ordered_json j;
    j["embedder_tag"] = index.embedder_tag;
    j["dim"] = index.dim;
    auto entries = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < index.size(); ++i) {
        nlohmann::ordered_json entry;
        entry["id"] = index.guidelines[i].id;
        entry["vector"] = index.vectors[i];
        entries.push_back(std::move(entry));
    }
    j["entries"] = std::move(entries);
    return j.dump();
}

GuidelineIndex index_from_json(const std::string& text,
                               const std::vector<Guideline>& corpus) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("embedder_tag") ||
        !j.contains("dim") || !j.contains("entries")) {
        throw FormatError("not a guideline index file");
    }
    std::unordered_map<std::string, const Guideline*> by_id;
    for (const auto& g : corpus) by_id[g.id] = &g;

    GuidelineIndex index;
    index.embedder_tag = j["embedder_tag"].get<std::string>();
    index.dim = j["dim"].get<int>();
    for (const auto& entry : j["entries"]) {
        std::string id = entry.at("id").get<std::string>();
        auto it = by_id.find(id);
        if (it == by_id.end()) {
            throw FormatError("index entry " + id + " missing from corpus");
        }
        EmbeddingVector v = entry.at("vector").get<EmbeddingVector>();
        if (static_cast<int>(v.size()) != index.dim) {
            throw ShapeError("index entry " + id + " has wrong dimension");
        }
        index.guidelines.push_back(*it->second);
        index.vectors.push_back(std::move(v));
    }
    if (index.guidelines.empty()) {
        throw EmptyCorpusError("index file has no entries");
    }
    return index;
}

}  // namespace segref
