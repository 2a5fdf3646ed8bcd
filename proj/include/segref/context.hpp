#pragma once

#include <optional>
#include <string>
#include <vector>

#include "segref/geometry.hpp"
#include "segref/guidelines.hpp"
#include "segref/image.hpp"

namespace segref {

// Retrieval query assembled from the user prompt, an optional scene caption,
// and the image resolution. Resolution matters because several guidelines are
// scale-dependent.
struct SceneQuery {
    std::string prompt;
    std::string caption;
    int width = 0;
    int height = 0;

    std::string render() const;
};

// Renders "<prompt> | <caption> | <width>x<height>". The caption may be empty
// when no captioner is configured.
std::string build_query(const std::string& prompt, const std::string& caption,
                        int width, int height);

// Result of the vertical-split planner. Either a single full-image crop or a
// left/right pair that together cover every coarse detection.
struct CropPlan {
    std::vector<CropRegion> crops;
    std::optional<int> split_x;
    int left_count = 0;
    int right_count = 0;
    int gap_px = 0;

    bool is_split() const { return crops.size() == 2; }
};

// Chooses a vertical split of the image from coarse detections. Boxes are
// sorted by x-center; every split point between consecutive boxes with a
// non-negative gap (min x of the right group minus max x of the left group)
// is a candidate. Among candidates the planner minimizes the count imbalance
// and then maximizes the gap. When fewer than two boxes exist or no feasible
// split does, the plan is a single full-image crop.
//
// `margin` widens each crop past the cluster boundary, capped at the gap
// midpoint so the two crops never overlap.
CropPlan plan_crops(const std::vector<BoundingBox>& coarse_boxes, int width,
                    int height, int margin = 0);

// Scene captioning backend. Implementations may call a model or return a
// canned description; failures are reported by throwing.
class Captioner {
public:
    virtual ~Captioner() = default;
    virtual std::string caption(const ImageHandle& image) = 0;
};

// Coarse object detector invoked on a downscaled image. Boxes are returned in
// the coordinate frame of the handle it receives.
class CoarseDetector {
public:
    virtual ~CoarseDetector() = default;
    virtual std::vector<BoundingBox> detect(const ImageHandle& image) = 0;
};

struct ContextOptions {
    int top_k = 8;
    double downscale = 0.8;
    int crop_margin = 0;
};

struct SceneContext {
    std::string query;
    std::vector<ScoredGuideline> guidelines;
    CropPlan plan;
    std::vector<std::string> warnings;
};

// Builds the retrieval query, fetches the top-k guidelines, and plans crops
// from coarse detections taken at `downscale` resolution and mapped back to
// the parent frame. A null captioner or detector is treated as disabled;
// backend exceptions degrade the result (empty caption, full-image crop) and
// are recorded as warnings rather than propagated.
SceneContext construct_context(const ImageHandle& image, const std::string& prompt,
                               const GuidelineIndex& index, const Embedder& embedder,
                               Captioner* captioner, CoarseDetector* detector,
                               const ContextOptions& options = {});

}  // namespace segref
