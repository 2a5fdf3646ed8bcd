#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "segref/errors.hpp"

namespace segref {

// Axis-aligned pixel box, origin top-left, half-open on the max edges:
// a pixel (y, x) is inside iff y_min <= y < y_max and x_min <= x < x_max.
// Adjacent boxes therefore never share pixels.
struct BoundingBox {
    int y_min = 0;
    int x_min = 0;
    int y_max = 0;
    int x_max = 0;

    int width() const { return x_max - x_min; }
    int height() const { return y_max - y_min; }
    std::int64_t area() const {
        return static_cast<std::int64_t>(width()) * height();
    }
    bool valid() const { return y_min < y_max && x_min < x_max && y_min >= 0 && x_min >= 0; }
    bool contains(int y, int x) const {
        return y >= y_min && y < y_max && x >= x_min && x < x_max;
    }
    bool contains(const BoundingBox& other) const {
        return other.y_min >= y_min && other.y_max <= y_max &&
               other.x_min >= x_min && other.x_max <= x_max;
    }
    bool within(int width_px, int height_px) const {
        return valid() && y_max <= height_px && x_max <= width_px;
    }

    bool operator==(const BoundingBox& other) const = default;
};

// Intersection of two boxes; not valid() if they do not overlap.
BoundingBox intersect(const BoundingBox& a, const BoundingBox& b);

// Box clipped to the image rectangle [0,height) x [0,width); may be degenerate.
BoundingBox clip(const BoundingBox& box, int width_px, int height_px);

// Box grown by (dy, dx) per side and clipped to the image rectangle.
BoundingBox dilate(const BoundingBox& box, int dy, int dx, int width_px, int height_px);

double box_iou(const BoundingBox& a, const BoundingBox& b);

// Dense binary mask over a width x height pixel grid, row-major, packed into
// 64-bit words. Values are immutable in spirit: operations return new masks.
class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int width_px, int height_px);

    int width() const { return width_; }
    int height() const { return height_; }
    bool empty_dims() const { return width_ == 0 || height_ == 0; }

    bool test(int y, int x) const;
    void set(int y, int x, bool value = true);

    std::int64_t popcount() const;
    bool any() const { return popcount() > 0; }

    BinaryMask unite(const BinaryMask& other) const;
    BinaryMask intersect(const BinaryMask& other) const;
    BinaryMask difference(const BinaryMask& other) const;

    // In-place union of `other` placed at (offset_y, offset_x) in this mask's
    // coordinates. Pixels falling outside this mask are dropped.
    void blit_union(const BinaryMask& other, int offset_y, int offset_x);

    bool is_subset_of(const BinaryMask& other) const;

    bool operator==(const BinaryMask& other) const;

    // Run-length encoding in row-major scan order, always starting with a run
    // of zeros (possibly length 0). Runs alternate zero/one and sum to w*h.
    std::vector<std::int64_t> run_lengths() const;
    static BinaryMask from_run_lengths(int width_px, int height_px,
                                       const std::vector<std::int64_t>& runs);

    // {"width":.., "height":.., "rle":[..]} JSON record.
    std::string to_rle_json() const;
    static BinaryMask from_rle_json(const std::string& text);

private:
    void check_same_dims(const BinaryMask& other) const;
    std::size_t word_index(int y, int x) const;

    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint64_t> bits_;
};

struct OverlapStats {
    std::int64_t intersection_px = 0;
    std::int64_t union_px = 0;
    std::int64_t a_px = 0;
    std::int64_t b_px = 0;
};

// Pixel-exact overlap counts; throws ShapeError on dimension mismatch.
OverlapStats overlap_stats(const BinaryMask& a, const BinaryMask& b);

// Mask with exactly the pixels of `box` set; throws BoundsError if the box
// is not contained in (width, height).
BinaryMask rasterize(const BoundingBox& box, int width_px, int height_px);

// A rectangular window into a parent image, for crop-local coordinates.
struct CropRegion {
    int parent_width = 0;
    int parent_height = 0;
    BoundingBox box;

    static CropRegion full(int width_px, int height_px) {
        return CropRegion{width_px, height_px, BoundingBox{0, 0, height_px, width_px}};
    }

    int width() const { return box.width(); }
    int height() const { return box.height(); }
    bool is_full() const {
        return box.y_min == 0 && box.x_min == 0 &&
               box.y_max == parent_height && box.x_max == parent_width;
    }

    bool operator==(const CropRegion& other) const = default;
};

// Parent-coordinate box mapped into region-local coordinates. The box is
// clipped to the region first; a box with no intersection at all is an
// EmptyResultError.
BoundingBox to_local(const CropRegion& region, const BoundingBox& box);

// Region-local box mapped back to parent coordinates.
BoundingBox to_parent(const CropRegion& region, const BoundingBox& box);

}  // namespace segref
