#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "segref/errors.hpp"

namespace segref {

// One labeling rule. Ids follow the pattern G<n> and are unique per corpus.
struct Guideline {
    std::string id;
    std::string text;
    std::string summary;

    bool operator==(const Guideline& other) const = default;
};

using EmbeddingVector = std::vector<float>;

float dot(const EmbeddingVector& a, const EmbeddingVector& b);
double l2_norm(const EmbeddingVector& v);
// Scales to unit norm; an all-zero vector gets a deterministic unit vector
// on the first axis so downstream similarity stays well defined.
EmbeddingVector l2_normalize(EmbeddingVector v);

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual EmbeddingVector embed(const std::string& text) const = 0;
    virtual int dim() const = 0;
    virtual std::string tag() const = 0;
};

// Deterministic bag-of-words embedder: lowercased alphanumeric tokens hashed
// into `dim` buckets, then L2-normalized. Stable across platforms, so tests
// and simulations get meaningful similarity with no model in the loop.
class HashEmbedder : public Embedder {
public:
    explicit HashEmbedder(int dim = 64) : dim_(dim) {}
    EmbeddingVector embed(const std::string& text) const override;
    int dim() const override { return dim_; }
    std::string tag() const override { return "hash-bow-" + std::to_string(dim_); }

private:
    int dim_;
};

// Flat exact-scan similarity index. Append-only at build time, read-only at
// query time; all vectors unit-norm, one per guideline, same dimension.
struct GuidelineIndex {
    std::vector<Guideline> guidelines;
    std::vector<EmbeddingVector> vectors;
    std::string embedder_tag;
    int dim = 0;

    std::size_t size() const { return guidelines.size(); }
};

// Parses a corpus document: a JSON array of {id, text, summary} objects, or
// plain text with one rule per line (assigned sequential ids G0, G1, ...).
std::vector<Guideline> ingest(const std::string& document);

// Numeric suffix of "G<n>"; throws ValidationError on malformed ids.
long guideline_number(const std::string& id);

GuidelineIndex build_index(const std::vector<Guideline>& guidelines,
                           const Embedder& embedder);

struct ScoredGuideline {
    Guideline guideline;
    double similarity = 0.0;
};

// Top-k by cosine similarity (dot product on unit vectors), descending, ties
// broken by ascending guideline id. Returns min(k, corpus size) entries.
std::vector<ScoredGuideline> top_k(const GuidelineIndex& index,
                                   const EmbeddingVector& query, std::size_t k);

// Index persistence: {embedder_tag, dim, entries:[{id, vector}]}. Loading
// rejoins vectors with the given corpus by id.
std::string index_to_json(const GuidelineIndex& index);
GuidelineIndex index_from_json(const std::string& text,
                               const std::vector<Guideline>& corpus);

}  // namespace segref
