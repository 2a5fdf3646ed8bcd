#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "segref/geometry.hpp"
#include "segref/guidelines.hpp"
#include "segref/image.hpp"
#include "segref/metrics.hpp"
#include "segref/protocol.hpp"

namespace segref {

// Per-role model settings. The response-schema flag is reserved for the
// supervisor critique, the only role that runs schema-constrained.
struct RoleConfig {
    std::string role;
    std::string system_template;
    double temperature = 0.5;
    bool thinking_mode = false;
    bool response_schema = false;

    void validate() const;
};

// One message part: either text or an image reference.
struct Part {
    enum class Kind { Text, Image };

    Kind kind = Kind::Text;
    std::string text;
    ImageHandle image;

    static Part make_text(std::string t) {
        Part p;
        p.kind = Kind::Text;
        p.text = std::move(t);
        return p;
    }
    static Part make_image(ImageHandle h) {
        Part p;
        p.kind = Kind::Image;
        p.image = std::move(h);
        return p;
    }
};

struct BackendRequest {
    RoleConfig role;
    std::vector<Part> parts;
    std::vector<std::string> prior_context;
};

struct BackendResponse {
    std::string text;
    long input_tokens = 0;
    long output_tokens = 0;
    long latency_ms = 0;
};

// Text-completion backend. Implementations must be safe for concurrent
// calls; each call is an independent request/response exchange.
class ModelBackend {
public:
    virtual ~ModelBackend() = default;
    virtual BackendResponse complete(const BackendRequest& request) = 0;
};

// Prompt for the mask model: a positive box, optionally with a negative
// point (inside the box) that requests an erase of that subject.
struct SegmenterPrompt {
    enum class Mode { BoxPositive, BoxWithNegativePoint };

    Mode mode = Mode::BoxPositive;
    BoundingBox box;
    std::optional<std::pair<int, int>> point;  // (y, x)

    void validate() const;
};

class Segmenter {
public:
    virtual ~Segmenter() = default;
    virtual BinaryMask segment(const ImageHandle& image, const SegmenterPrompt& prompt) = 0;
};

// Image-text match scorer; returns a raw logit for (crop, label).
class VerifierScorer {
public:
    virtual ~VerifierScorer() = default;
    virtual double score(const ImageHandle& crop, const std::string& label) = 0;
};

double sigmoid(double logit);

// Replaces each {KEY} placeholder with its value; unknown placeholders are
// left untouched.
std::string render_template(std::string text,
                            const std::vector<std::pair<std::string, std::string>>& values);

// "G<n>: <text>" lines for prompt injection.
std::string guidelines_block(const std::vector<ScoredGuideline>& guidelines);

// System prompt templates, one per role, with {PROMPT}, {GUIDELINES} and
// {SUBJECTS} placeholders.
struct RolePrompts {
    std::string worker;
    std::string supervisor_eval;
    std::string supervisor_boxgen;

    static RolePrompts builtin();
    // Loads worker.txt, supervisor_eval.txt and supervisor_boxgen.txt.
    static RolePrompts load_dir(const std::string& dir);
};

struct RoleSet {
    RoleConfig worker{"worker", "", 0.5, false, false};
    RoleConfig supervisor_eval{"supervisor_eval", "", 0.3, true, true};
    RoleConfig supervisor_boxgen{"supervisor_boxgen", "", 0.5, false, false};
    RolePrompts prompts = RolePrompts::builtin();
};

// Issues the request, retrying once on a backend error. Every completed call
// appends one ledger entry (a null ledger skips accounting).
BackendResponse call_model(ModelBackend& backend, const BackendRequest& request,
                           CostLedger* ledger);

struct WorkerResult {
    SubjectRegistry registry;
    std::vector<std::string> warnings;
};

// Initial detection pass: asks the worker for instances, then produces each
// subject's mask through the segmenter. A parse failure yields an empty
// registry plus a warning (the supervisor will flag the misses); a backend
// failure after retry propagates.
WorkerResult worker_detect(ModelBackend& backend, Segmenter* segmenter,
                           const ImageHandle& image, const std::string& prompt,
                           const std::vector<ScoredGuideline>& guidelines,
                           const RoleSet& roles, CostLedger* ledger);

// Follow-up worker turn carrying the verified candidates and the critique.
// The response is logged for the trace; registry mutation stays with
// apply_actions so runs replay deterministically.
Parsed<std::vector<SubjectInstance>> worker_refresh(
    ModelBackend& backend, const ImageHandle& image, const SubjectRegistry& registry,
    const std::vector<CandidateBox>& verified, const SupervisorReport& report,
    const std::string& prompt, const std::vector<ScoredGuideline>& guidelines,
    const RoleSet& roles, CostLedger* ledger);

// Critique pass over the current registry. A parse failure degrades to a
// clean report with a loud warning: fabricated issues would poison both the
// loop and the controller's reward signal.
Parsed<SupervisorReport> supervisor_evaluate(ModelBackend& backend,
                                             const ImageHandle& image,
                                             const SubjectRegistry& registry,
                                             const std::vector<ScoredGuideline>& guidelines,
                                             const RoleSet& roles, CostLedger* ledger);

// Box proposals for the report's missing/false entries. Parse failure means
// an empty candidate list; the issues simply persist to the next iteration.
Parsed<std::vector<CandidateBox>> supervisor_boxgen(ModelBackend& backend,
                                                    const ImageHandle& image,
                                                    const SubjectRegistry& registry,
                                                    const SupervisorReport& report,
                                                    const RoleSet& roles,
                                                    CostLedger* ledger);

// Candidate box expanded by buffer_frac of its own width/height per side,
// clamped to the image.
BoundingBox buffered_crop(const BoundingBox& box, double buffer_frac, int width,
                          int height);

// Scores each candidate on its buffered crop and keeps those whose sigmoid
// probability reaches the threshold (inclusive). Kept candidates come back
// with verified=true and the probability recorded; scorer failures reject
// the candidate with a warning.
Parsed<std::vector<CandidateBox>> verify_candidates(std::vector<CandidateBox> candidates,
                                                    const ImageHandle& image,
                                                    VerifierScorer& scorer,
                                                    double buffer_frac = 0.1,
                                                    double threshold = 0.5);

// Validates the prompt and forwards to the segmenter.
BinaryMask segment(Segmenter& segmenter, const ImageHandle& image,
                   const SegmenterPrompt& prompt);

// Generic HTTP adapter: POST {role, system, parts, temperature, ...} to
// base_url + path, expecting {text, usage:{input_tokens, output_tokens}}.
// Credentials come from the named environment variable, sent as a bearer
// token when present.
struct HttpBackendConfig {
    std::string base_url;  // e.g. "http://localhost:8080"
    std::string path = "/v1/complete";
    std::string credential_env = "SEGREF_API_KEY";
    int timeout_ms = 30000;
};

class HttpBackend : public ModelBackend {
public:
    explicit HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {}
    BackendResponse complete(const BackendRequest& request) override;

private:
    HttpBackendConfig config_;
};

}  // namespace segref
