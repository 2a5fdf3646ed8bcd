#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "segref/context.hpp"
#include "segref/rng.hpp"

using namespace segref;

namespace {

struct StubCaptioner : Captioner {
    std::string text;
    explicit StubCaptioner(std::string t) : text(std::move(t)) {}
    std::string caption(const ImageHandle&) override { return text; }
};

struct ThrowingCaptioner : Captioner {
    std::string caption(const ImageHandle&) override {
        throw std::runtime_error("caption service down");
    }
};

struct StubDetector : CoarseDetector {
    std::vector<BoundingBox> boxes;
    int seen_width = 0;
    int seen_height = 0;
    explicit StubDetector(std::vector<BoundingBox> b) : boxes(std::move(b)) {}
    std::vector<BoundingBox> detect(const ImageHandle& image) override {
        seen_width = image.width;
        seen_height = image.height;
        return boxes;
    }
};

struct ThrowingDetector : CoarseDetector {
    std::vector<BoundingBox> detect(const ImageHandle&) override {
        throw std::runtime_error("detector offline");
    }
};

// Ordering used by the planner, restated here for the oracle.
std::tuple<int, int, int, int, int> sort_key(const BoundingBox& b) {
    return {b.x_min + b.x_max, b.x_min, b.x_max, b.y_min, b.y_max};
}

struct SplitOracle {
    bool feasible = false;
    long best_imbalance = 0;
    int best_gap = -1;
};

// Exhaustive scan over every split point of the center-sorted boxes.
SplitOracle brute_force_split(std::vector<BoundingBox> boxes) {
    std::sort(boxes.begin(), boxes.end(), [](const BoundingBox& a, const BoundingBox& b) {
        return sort_key(a) < sort_key(b);
    });
    SplitOracle oracle;
    long n = static_cast<long>(boxes.size());
    for (long i = 0; i + 1 < n; ++i) {
        int left_max = 0;
        for (long j = 0; j <= i; ++j) left_max = std::max(left_max, boxes[j].x_max);
        int right_min = boxes[i + 1].x_min;
        for (long j = i + 1; j < n; ++j) right_min = std::min(right_min, boxes[j].x_min);
        int gap = right_min - left_max;
        if (gap < 0) continue;
        long imbalance = std::labs((i + 1) - (n - i - 1));
        if (!oracle.feasible || imbalance < oracle.best_imbalance ||
            (imbalance == oracle.best_imbalance && gap > oracle.best_gap)) {
            oracle.feasible = true;
            oracle.best_imbalance = imbalance;
            oracle.best_gap = gap;
        }
    }
    return oracle;
}

BoundingBox random_box(Rng& rng, int width, int height) {
    int w = static_cast<int>(rng.uniform_int(1, 20));
    int h = static_cast<int>(rng.uniform_int(1, 20));
    int x = static_cast<int>(rng.uniform_int(0, width - w));
    int y = static_cast<int>(rng.uniform_int(0, height - h));
    return BoundingBox{y, x, y + h, x + w};
}

}  // namespace

TEST_CASE("query rendering") {
    CHECK(build_query("Pedestrian", "a rainy street with people", 1920, 1280) ==
          "Pedestrian | a rainy street with people | 1920x1280");
    CHECK(build_query("Pedestrian", "", 1920, 1280) == "Pedestrian |  | 1920x1280");
    CHECK_THROWS_AS(build_query("", "caption", 100, 100), ValidationError);
    CHECK_THROWS_AS(build_query("Pedestrian", "", 0, 100), ValidationError);
    CHECK_THROWS_AS(build_query("Pedestrian", "", 100, -1), ValidationError);
}

TEST_CASE("crop planning on the two-cluster example") {
    std::vector<BoundingBox> boxes = {
        {0, 5, 10, 15}, {0, 15, 10, 25}, {0, 75, 10, 85}, {0, 85, 10, 95}};
    CropPlan plan = plan_crops(boxes, 100, 100);
    REQUIRE(plan.is_split());
    CHECK(plan.crops[0].box == BoundingBox{0, 0, 100, 25});
    CHECK(plan.crops[1].box == BoundingBox{0, 75, 100, 100});
    CHECK(plan.left_count == 2);
    CHECK(plan.right_count == 2);
    CHECK(plan.gap_px == 50);
    REQUIRE(plan.split_x.has_value());
    CHECK(*plan.split_x == 50);
}

TEST_CASE("margin widens crops but never past the gap midpoint") {
    std::vector<BoundingBox> boxes = {
        {0, 5, 10, 15}, {0, 15, 10, 25}, {0, 75, 10, 85}, {0, 85, 10, 95}};
    CropPlan plan = plan_crops(boxes, 100, 100, 5);
    REQUIRE(plan.is_split());
    CHECK(plan.crops[0].box.x_max == 30);
    CHECK(plan.crops[1].box.x_min == 70);

    CropPlan capped = plan_crops(boxes, 100, 100, 1000);
    REQUIRE(capped.is_split());
    CHECK(capped.crops[0].box.x_max == 50);
    CHECK(capped.crops[1].box.x_min == 50);
}

TEST_CASE("degenerate inputs fall back to the full-image crop") {
    CropPlan none = plan_crops({}, 100, 80);
    REQUIRE(none.crops.size() == 1);
    CHECK(none.crops[0].is_full());
    CHECK_FALSE(none.is_split());
    CHECK_FALSE(none.split_x.has_value());

    CropPlan single = plan_crops({{0, 10, 10, 20}}, 100, 80);
    REQUIRE(single.crops.size() == 1);
    CHECK(single.crops[0].is_full());

    // Overlapping clusters leave no nonnegative gap anywhere.
    CropPlan overlapping = plan_crops({{0, 0, 10, 60}, {0, 50, 10, 100}}, 100, 80);
    REQUIRE(overlapping.crops.size() == 1);
    CHECK(overlapping.crops[0].is_full());

    CHECK_THROWS_AS(plan_crops({}, 0, 80), ValidationError);
}

TEST_CASE("planner matches the exhaustive split oracle") {
    Rng rng(131);
    for (int trial = 0; trial < 200; ++trial) {
        int n = static_cast<int>(rng.uniform_int(2, 10));
        std::vector<BoundingBox> boxes;
        for (int i = 0; i < n; ++i) boxes.push_back(random_box(rng, 100, 60));

        SplitOracle oracle = brute_force_split(boxes);
        CropPlan plan = plan_crops(boxes, 100, 60);

        if (!oracle.feasible) {
            REQUIRE(plan.crops.size() == 1);
            CHECK(plan.crops[0].is_full());
            continue;
        }
        REQUIRE(plan.is_split());
        CHECK(plan.gap_px >= 0);
        CHECK(plan.left_count + plan.right_count == n);
        CHECK(std::labs(plan.left_count - plan.right_count) == oracle.best_imbalance);
        CHECK(plan.gap_px == oracle.best_gap);

        // The two crops tile without overlap and each box lands inside one.
        const BoundingBox& left = plan.crops[0].box;
        const BoundingBox& right = plan.crops[1].box;
        CHECK(left.x_min == 0);
        CHECK(right.x_max == 100);
        CHECK(left.x_max <= right.x_min);
        for (const BoundingBox& b : boxes) {
            bool in_left = left.contains(b);
            bool in_right = right.contains(b);
            CHECK((in_left || in_right));
        }
    }
}

TEST_CASE("planner is invariant to input order") {
    Rng rng(139);
    for (int trial = 0; trial < 50; ++trial) {
        int n = static_cast<int>(rng.uniform_int(2, 8));
        std::vector<BoundingBox> boxes;
        for (int i = 0; i < n; ++i) boxes.push_back(random_box(rng, 100, 60));
        CropPlan base = plan_crops(boxes, 100, 60);

        std::vector<BoundingBox> shuffled = boxes;
        for (std::size_t i = shuffled.size(); i > 1; --i) {
            std::size_t j = rng.uniform_u64(i);
            std::swap(shuffled[i - 1], shuffled[j]);
        }
        CropPlan again = plan_crops(shuffled, 100, 60);
        REQUIRE(base.crops.size() == again.crops.size());
        for (std::size_t i = 0; i < base.crops.size(); ++i) {
            CHECK(base.crops[i] == again.crops[i]);
        }
        CHECK(base.gap_px == again.gap_px);
        CHECK(base.left_count == again.left_count);
    }
}

TEST_CASE("context construction wires caption, retrieval and crops together") {
    std::string corpus;
    for (int i = 0; i < 11; ++i) corpus += "guideline text " + std::to_string(i) + "\n";
    HashEmbedder embedder(32);
    GuidelineIndex index = build_index(ingest(corpus), embedder);

    ImageHandle image;
    image.ref = "img://test";
    image.width = 100;
    image.height = 100;

    StubCaptioner captioner("two clusters of pedestrians");
    // Boxes in the 80x80 downscaled frame; mapping back by 1.25 reproduces
    // the two-cluster example.
    StubDetector detector({{0, 4, 8, 12}, {0, 12, 8, 20}, {0, 60, 8, 68}, {0, 68, 8, 76}});

    SceneContext context =
        construct_context(image, "Pedestrian", index, embedder, &captioner, &detector);
    CHECK(context.query == "Pedestrian | two clusters of pedestrians | 100x100");
    CHECK(context.guidelines.size() == 8);
    CHECK(context.warnings.empty());
    CHECK(detector.seen_width == 80);
    CHECK(detector.seen_height == 80);
    REQUIRE(context.plan.is_split());
    CHECK(context.plan.crops[0].box == BoundingBox{0, 0, 100, 25});
    CHECK(context.plan.crops[1].box == BoundingBox{0, 75, 100, 100});
}

TEST_CASE("context degrades when helpers fail or are absent") {
    GuidelineIndex index = build_index(ingest("only rule\n"), HashEmbedder(32));
    HashEmbedder embedder(32);

    ImageHandle image;
    image.ref = "img://test";
    image.width = 64;
    image.height = 48;

    ThrowingCaptioner bad_captioner;
    ThrowingDetector bad_detector;
    SceneContext degraded = construct_context(image, "Pedestrian", index, embedder,
                                              &bad_captioner, &bad_detector);
    CHECK(degraded.query == "Pedestrian |  | 64x48");
    CHECK(degraded.guidelines.size() == 1);
    REQUIRE(degraded.plan.crops.size() == 1);
    CHECK(degraded.plan.crops[0].is_full());
    CHECK(degraded.warnings.size() == 2);

    SceneContext disabled =
        construct_context(image, "Pedestrian", index, embedder, nullptr, nullptr);
    CHECK(disabled.query == "Pedestrian |  | 64x48");
    CHECK(disabled.warnings.empty());
    CHECK(disabled.plan.crops[0].is_full());

    HashEmbedder mismatched(16);
    CHECK_THROWS_AS(construct_context(image, "Pedestrian", index, mismatched, nullptr,
                                      nullptr),
                    ValidationError);
}
