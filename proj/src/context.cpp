#include "segref/context.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

namespace segref {

std::string SceneQuery::render() const {
    return prompt + " | " + caption + " | " + std::to_string(width) + "x" +
           std::to_string(height);
}

std::string build_query(const std::string& prompt, const std::string& caption,
                        int width, int height) {
    if (prompt.empty()) {
        throw ValidationError("query prompt must be non-empty");
    }
    if (width <= 0 || height <= 0) {
        throw ValidationError("query resolution must be positive");
    }
    return SceneQuery{prompt, caption, width, height}.render();
}

namespace {

CropPlan full_image_plan(int width, int height) {
    CropPlan plan;
    plan.crops.push_back(CropRegion::full(width, height));
    return plan;
}

// Deterministic ordering by x-center; ties broken by the raw coordinates so
// the planner is stable across input permutations.
std::tuple<int, int, int, int, int> sort_key(const BoundingBox& b) {
    return {b.x_min + b.x_max, b.x_min, b.x_max, b.y_min, b.y_max};
}

}  // namespace

CropPlan plan_crops(const std::vector<BoundingBox>& coarse_boxes, int width,
                    int height, int margin) {
    if (width <= 0 || height <= 0) {
        throw ValidationError("crop planning needs a positive image size");
    }
    if (coarse_boxes.size() < 2) {
        return full_image_plan(width, height);
    }
    std::vector<BoundingBox> boxes = coarse_boxes;
    std::sort(boxes.begin(), boxes.end(), [](const BoundingBox& a, const BoundingBox& b) {
        return sort_key(a) < sort_key(b);
    });

    const long n = static_cast<long>(boxes.size());
    // prefix_max[i] = max x_max over boxes[0..i]; suffix_min[i] = min x_min
    // over boxes[i..n-1].
    std::vector<int> prefix_max(n), suffix_min(n);
    prefix_max[0] = boxes[0].x_max;
    for (long i = 1; i < n; ++i) prefix_max[i] = std::max(prefix_max[i - 1], boxes[i].x_max);
    suffix_min[n - 1] = boxes[n - 1].x_min;
    for (long i = n - 2; i >= 0; --i) suffix_min[i] = std::min(suffix_min[i + 1], boxes[i].x_min);

    long best_split = -1;
    long best_imbalance = 0;
    int best_gap = -1;
    for (long i = 0; i + 1 < n; ++i) {
        int gap = suffix_min[i + 1] - prefix_max[i];
        if (gap < 0) continue;
        long imbalance = std::labs((i + 1) - (n - i - 1));
        if (best_split < 0 || imbalance < best_imbalance ||
            (imbalance == best_imbalance && gap > best_gap)) {
            best_split = i;
            best_imbalance = imbalance;
            best_gap = gap;
        }
    }
    if (best_split < 0) {
        return full_image_plan(width, height);
    }

    int left_end = prefix_max[best_split];
    int right_start = suffix_min[best_split + 1];
    int mid = (left_end + right_start) / 2;
    if (margin > 0) {
        left_end = std::min(left_end + margin, mid);
        right_start = std::max(right_start - margin, mid);
    }
    left_end = std::clamp(left_end, 0, width);
    right_start = std::clamp(right_start, 0, width);

    CropPlan plan;
    plan.crops.push_back(CropRegion{width, height, BoundingBox{0, 0, height, left_end}});
    plan.crops.push_back(
        CropRegion{width, height, BoundingBox{0, right_start, height, width}});
    plan.split_x = mid;
    plan.left_count = static_cast<int>(best_split + 1);
    plan.right_count = static_cast<int>(n - best_split - 1);
    plan.gap_px = best_gap;
    return plan;
}

SceneContext construct_context(const ImageHandle& image, const std::string& prompt,
                               const GuidelineIndex& index, const Embedder& embedder,
                               Captioner* captioner, CoarseDetector* detector,
                               const ContextOptions& options) {
    if (embedder.tag() != index.embedder_tag) {
        throw ValidationError("index was built with embedder " + index.embedder_tag +
                              ", not " + embedder.tag());
    }
    SceneContext out;

    std::string caption;
    if (captioner != nullptr) {
        try {
            caption = captioner->caption(image);
        } catch (const std::exception& e) {
            caption.clear();
            out.warnings.push_back(std::string("captioner failed: ") + e.what());
        }
    }
    out.query = build_query(prompt, caption, image.width, image.height);
    out.guidelines = top_k(index, embedder.embed(out.query), options.top_k);

    std::vector<BoundingBox> coarse;
    if (detector != nullptr) {
        int sw = std::max(1, static_cast<int>(std::lround(image.width * options.downscale)));
        int sh = std::max(1, static_cast<int>(std::lround(image.height * options.downscale)));
        ImageHandle scaled = image;
        scaled.width = sw;
        scaled.height = sh;
        try {
            for (BoundingBox b : detector->detect(scaled)) {
                // Map back to the parent frame and clamp.
                BoundingBox mapped{
                    static_cast<int>(std::lround(static_cast<double>(b.y_min) * image.height / sh)),
                    static_cast<int>(std::lround(static_cast<double>(b.x_min) * image.width / sw)),
                    static_cast<int>(std::lround(static_cast<double>(b.y_max) * image.height / sh)),
                    static_cast<int>(std::lround(static_cast<double>(b.x_max) * image.width / sw))};
                mapped = clip(mapped, image.width, image.height);
                if (mapped.valid()) coarse.push_back(mapped);
            }
        } catch (const std::exception& e) {
            coarse.clear();
            out.warnings.push_back(std::string("coarse detector failed: ") + e.what());
        }
    }
    out.plan = plan_crops(coarse, image.width, image.height, options.crop_margin);
    return out;
}

}  // namespace segref
