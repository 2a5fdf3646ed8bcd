#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "segref/agents.hpp"
#include "segref/airc.hpp"
#include "segref/context.hpp"

namespace segref {

enum class DensityClass { Few = 0, Medium = 1, Crowd = 2 };

const char* density_name(DensityClass density);
DensityClass density_from_name(const std::string& name);

// One object in a synthetic scene. Included entities are ground truth per the
// guidelines; the rest are distractors the worker may wrongly pick up.
struct SceneEntity {
    BoundingBox box;
    std::string label;
    bool include = true;
};

// Which defects the simulated worker will realize on its first pass, by
// entity index: `missed` entities are skipped, `refine` entities get a
// jittered box, `falses` are distractor entities it detects anyway.
struct DefectLedger {
    std::vector<std::size_t> missed;
    std::vector<std::size_t> refine;
    std::vector<std::size_t> falses;
};

struct SyntheticScene {
    int width = 0;
    int height = 0;
    DensityClass density = DensityClass::Few;
    std::uint64_t seed = 0;
    std::vector<SceneEntity> entities;
    DefectLedger defects;

    std::vector<std::size_t> included_indices() const;
    int included_count() const;

    std::string to_json() const;
    static SyntheticScene from_json(const std::string& text);
};

// Stochastic behavior of the simulated agents. Rates are probabilities; the
// jitter is a pixel offset bound for imperfect worker boxes.
struct ErrorModel {
    double worker_miss_rate = 0.3;
    double worker_false_rate = 0.1;
    int worker_jitter_px = 3;
    double refine_rate = 0.2;
    double supervisor_detect_prob = 0.9;
    double spurious_refinement_rate = 0.0;
    double fix_success_prob = 0.55;
    double boxgen_drop_rate = 0.1;
    double verifier_noise = 0.05;

    void validate() const;
    std::string to_json() const;
    static ErrorModel from_json(const std::string& text);
    static ErrorModel perfect();  // every rate benign: no defects, no noise
};

// Scene with object count drawn from the class range (few 1-2, medium 3-7,
// crowd 8-15) and a defect ledger drawn from the error model. Deterministic
// per (seed, density, model).
SyntheticScene generate_scene(std::uint64_t seed, DensityClass density,
                              const ErrorModel& model = {});

// Image payload carrying the scene for simulated backends.
class SimImagePayload : public ImagePayload {
public:
    explicit SimImagePayload(SyntheticScene scene) : scene(std::move(scene)) {}
    SyntheticScene scene;
};

ImageHandle make_scene_handle(const SyntheticScene& scene,
                              const std::string& ref = "sim://scene");

// Pulls the scene out of a handle; ValidationError when the handle does not
// carry a simulation payload.
const SyntheticScene& scene_of(const ImageHandle& image);

// Simulated model backend for the worker and both supervisor roles. Whether
// the critic notices a defect is fixed per issue (derived from the scene
// seed), while fix attempts and proposal noise draw from one seeded stream,
// so sequential call order determines every outcome; calls are serialized
// for safety under concurrent crops.
class SimBackend : public ModelBackend {
public:
    SimBackend(ErrorModel model, std::uint64_t seed);
    BackendResponse complete(const BackendRequest& request) override;

private:
    ErrorModel model_;
    Rng rng_;
    std::mutex mutex_;
};

// Box-prompt masks are the rasterized box eroded by erosion_px per side
// (capped so the mask never empties); negative-point prompts return the empty
// erase mask.
class SimSegmenter : public Segmenter {
public:
    explicit SimSegmenter(int erosion_px = 1) : erosion_px_(erosion_px) {}
    BinaryMask segment(const ImageHandle& image, const SegmenterPrompt& prompt) override;

private:
    int erosion_px_;
};

// Logit +2 when the crop frames a scene entity of the same label (buffered
// IoU >= 0.5), else -2; the sign flips with probability verifier_noise.
class SimVerifierScorer : public VerifierScorer {
public:
    SimVerifierScorer(ErrorModel model, std::uint64_t seed);
    double score(const ImageHandle& crop, const std::string& label) override;

private:
    ErrorModel model_;
    Rng rng_;
    std::mutex mutex_;
};

class SimCaptioner : public Captioner {
public:
    std::string caption(const ImageHandle& image) override;
};

// Returns every entity box in the coordinate frame of the handle it is given
// (the caller downscales, so boxes are scaled by handle/scene dimensions).
class SimCoarseDetector : public CoarseDetector {
public:
    std::vector<BoundingBox> detect(const ImageHandle& image) override;
};

inline constexpr long kSimInputTokens = 2000;
inline constexpr long kSimOutputTokens = 200;
inline constexpr long kSimLatencyMs = 1100;

// Stop/continue policy plugged into an episode: the adaptive controller or a
// fixed-pass baseline.
class StopPolicy {
public:
    virtual ~StopPolicy() = default;
    virtual Action decide(int s, int iteration, const IterationBounds& bounds) = 0;
    virtual void observe(int s, Action a, double r, int s_next, bool terminal) {
        (void)s, (void)a, (void)r, (void)s_next, (void)terminal;
    }
};

// Always runs exactly k passes (within bounds): the hard-stop baseline.
class FixedKPolicy : public StopPolicy {
public:
    explicit FixedKPolicy(int k) : k_(k) {}
    Action decide(int s, int iteration, const IterationBounds& bounds) override;

private:
    int k_;
};

// Q-table policy; forwards transitions to the controller when learning.
class AdaptivePolicy : public StopPolicy {
public:
    AdaptivePolicy(Controller& controller, bool learn)
        : controller_(controller), learn_(learn) {}
    Action decide(int s, int iteration, const IterationBounds& bounds) override;
    void observe(int s, Action a, double r, int s_next, bool terminal) override;

private:
    Controller& controller_;
    bool learn_;
};

struct IterationRecord {
    int iteration = 0;  // 1-based
    IssueCounts counts;
    double issue_score = 0.0;
    int state = 0;
    Action action = Action::Stop;
    bool forced = false;
    double reward = 0.0;
    bool worker_call_skipped = false;  // refresh skipped: no pending actions
};

struct EpisodeTrace {
    DensityClass density = DensityClass::Few;
    std::vector<IterationRecord> iterations;
    bool hit_max = false;
    double first_issue_score = 0.0;
    double final_issue_score = 0.0;
    double issues_resolved = 0.0;  // first minus final
    double total_reward = 0.0;
    int passes = 0;

    std::string to_json() const;  // single line, for JSONL export
};

// One full refinement loop over a synthetic scene: detect, then per iteration
// critique / propose / verify / apply, with the policy deciding stop or
// continue between iterations. Rewards follow the controller reward function;
// the policy observes every transition except the forced stop at max_iters
// (that stop carries no choice and a reward of zero).
EpisodeTrace run_episode(const SyntheticScene& scene, const ErrorModel& model,
                         StopPolicy& policy, const IterationBounds& bounds,
                         std::uint64_t seed);

struct TrainResult {
    QTable table;
    // Running total of episode rewards, one entry per episode.
    std::vector<double> episode_cumulative;
};

inline const std::vector<DensityClass> kDensityMixAll = {
    DensityClass::Few, DensityClass::Medium, DensityClass::Crowd};

// Trains a fresh Q-table over `episodes` scenes cycling through the density
// mix, with epsilon-greedy exploration. `on_episode` (when set) receives each
// episode index and its trace, e.g. for JSONL export.
TrainResult train_controller(
    int episodes, const ErrorModel& model, const IterationBounds& bounds,
    std::uint64_t seed, const std::vector<DensityClass>& density_mix = kDensityMixAll,
    const std::function<void(int, const EpisodeTrace&)>& on_episode = {});

struct DensityComparison {
    DensityClass density = DensityClass::Few;
    double adaptive_resolved = 0.0;
    double fixed_resolved = 0.0;
    double gain() const { return adaptive_resolved - fixed_resolved; }
};

struct AblationReport {
    int scenes = 0;
    double adaptive_resolved = 0.0;  // mean issues resolved per crop
    double fixed_resolved = 0.0;
    double ratio = 0.0;              // adaptive over fixed
    double extra_pass_fraction = 0.0;
    std::vector<DensityComparison> by_density;

    std::string to_json() const;
    std::string to_csv() const;
};

// Paired comparison of the greedy adaptive policy against the hard-stop
// baseline (k = min_iters) on identical scene and backend seeds.
AblationReport ablate_policies(const ErrorModel& model, int n_scenes,
                               std::uint64_t seed, const QTable& trained,
                               const IterationBounds& bounds = {},
                               const std::vector<DensityClass>& density_mix = kDensityMixAll);

// CLI-facing simulation config.
struct SimulationConfig {
    ErrorModel error_model;
    IterationBounds bounds;
    std::vector<DensityClass> density_mix = {DensityClass::Few, DensityClass::Medium,
                                             DensityClass::Crowd};
    int episodes = 5000;
    std::uint64_t seed = 42;

    std::string to_json() const;
    static SimulationConfig from_json(const std::string& text);
};

}  // namespace segref
