#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "segref/agents.hpp"
#include "segref/airc.hpp"
#include "segref/context.hpp"
#include "segref/metrics.hpp"
#include "segref/sim.hpp"

namespace segref {

// Full run configuration. Every field has the stock default, and the JSON
// form mirrors the field names, so a config file round-trips losslessly.
struct RunConfig {
    std::string prompt;
    std::string corpus_path;
    int top_k = 8;
    double downscale = 0.8;
    int crop_margin = 0;
    double worker_temperature = 0.5;
    double eval_temperature = 0.3;
    double boxgen_temperature = 0.5;
    double verifier_buffer = 0.1;
    double verifier_threshold = 0.5;
    IterationBounds bounds;
    std::string airc_mode = "greedy";   // "train" or "greedy"
    std::string backend = "simulated";  // "remote" or "simulated"
    HttpBackendConfig remote;
    PriceConfig prices;
    std::uint64_t seed = 42;
    std::string prompts_dir;            // empty: built-in role prompts
    ErrorModel sim_error_model;         // used only by the simulated backend

    void validate() const;
    std::string to_json() const;
    static RunConfig from_json(const std::string& text);
};

// One iteration of one crop's refinement loop. The registry snapshot is taken
// after this iteration's refresh/apply step, so replaying the logged report
// and candidates onto the previous snapshot reproduces it.
struct CropIteration {
    int iteration = 0;  // 1-based
    std::string registry_json;
    SupervisorReport report;
    std::vector<CandidateBox> candidates;  // verification flags and scores set
    IssueCounts counts;
    double issue_score = 0.0;
    int state = 0;
    Action action = Action::Stop;
    bool forced = false;
    double reward = 0.0;
    bool worker_call_skipped = false;
    bool boxgen_skipped = false;
    std::vector<std::string> warnings;
};

struct CropTrace {
    CropRegion region;
    std::vector<CropIteration> iterations;
    std::string final_registry_json;
    std::string error;  // nonempty when the crop failed and was skipped
};

struct RunTrace {
    std::string image_ref;
    std::string query;
    std::vector<std::string> guideline_ids;
    std::vector<CropTrace> crops;
    std::vector<std::string> warnings;  // context-level warnings
    LedgerSummary cost;

    // One JSON line per crop iteration, one per crop summary, and a final
    // run-summary line carrying the cost fields.
    std::string to_jsonl() const;
};

struct RunResult {
    BinaryMask mask;           // final class mask, parent coordinates
    SubjectRegistry registry;  // merged subjects, parent coordinates
    RunTrace trace;
    QTable table;              // updated when airc_mode is "train"
};

// The concrete backends a run talks to. Raw pointers: the caller owns the
// objects and keeps them alive for the duration of the call. backend,
// segmenter, verifier, index and embedder are required; captioner and
// detector may be null (disabled).
struct PipelineEnv {
    ModelBackend* backend = nullptr;
    Segmenter* segmenter = nullptr;
    VerifierScorer* verifier = nullptr;
    Captioner* captioner = nullptr;
    CoarseDetector* detector = nullptr;
    const GuidelineIndex* index = nullptr;
    const Embedder* embedder = nullptr;
};

// Segmentation over the generic completion endpoint: the service answers a
// {role:"segmenter"} request with a run-length-encoded mask in the text.
class RemoteSegmenter : public Segmenter {
public:
    explicit RemoteSegmenter(HttpBackend& http) : http_(http) {}
    BinaryMask segment(const ImageHandle& image, const SegmenterPrompt& prompt) override;

private:
    HttpBackend& http_;
};

// Verification over the same endpoint: a {role:"verifier"} request returns a
// bare match logit in the text.
class RemoteVerifier : public VerifierScorer {
public:
    explicit RemoteVerifier(HttpBackend& http) : http_(http) {}
    double score(const ImageHandle& crop, const std::string& label) override;

private:
    HttpBackend& http_;
};

// Owns whichever backend objects the config selects and hands out the
// non-owning env view. The guideline index stays with the caller.
class RuntimeStack {
public:
    RuntimeStack(const RunConfig& config, const GuidelineIndex* index,
                 const Embedder* embedder);
    const PipelineEnv& env() const { return env_; }

private:
    std::unique_ptr<HttpBackend> http_;
    std::unique_ptr<RemoteSegmenter> remote_segmenter_;
    std::unique_ptr<RemoteVerifier> remote_verifier_;
    std::unique_ptr<SimBackend> sim_backend_;
    std::unique_ptr<SimSegmenter> sim_segmenter_;
    std::unique_ptr<SimVerifierScorer> sim_verifier_;
    std::unique_ptr<SimCaptioner> sim_captioner_;
    std::unique_ptr<SimCoarseDetector> sim_detector_;
    PipelineEnv env_;
};

// Runs the full loop on one image: context construction once, then each
// planned crop iterates worker -> supervisor critique -> (box proposals ->
// verify -> apply) under the stop controller. Per-crop subject masks are
// mapped back to parent coordinates and unioned into the class mask;
// subjects from different crops that land on the same object (same label,
// IoU >= 0.5) are merged. A crop whose backend fails terminally contributes
// nothing; the error is recorded on its trace and the other crops proceed.
RunResult run_image(const ImageHandle& image, const RunConfig& config,
                    const QTable& table, const PipelineEnv& env);

// Writes content to path via a temp file and rename, so readers never see a
// half-written file. IoError on failure.
void write_file_atomic(const std::string& path, const std::string& content);

// Reads a whole file; IoError when it cannot be opened.
std::string read_file(const std::string& path);

}  // namespace segref
