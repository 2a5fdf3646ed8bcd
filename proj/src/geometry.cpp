#include "segref/geometry.hpp"

#include <algorithm>
#include <bit>

#include <json.hpp>

namespace segref {

BoundingBox intersect(const BoundingBox& a, const BoundingBox& b) {
    return BoundingBox{std::max(a.y_min, b.y_min), std::max(a.x_min, b.x_min),
                       std::min(a.y_max, b.y_max), std::min(a.x_max, b.x_max)};
}

BoundingBox clip(const BoundingBox& box, int width_px, int height_px) {
    return BoundingBox{std::clamp(box.y_min, 0, height_px),
                       std::clamp(box.x_min, 0, width_px),
                       std::clamp(box.y_max, 0, height_px),
                       std::clamp(box.x_max, 0, width_px)};
}

BoundingBox dilate(const BoundingBox& box, int dy, int dx, int width_px, int height_px) {
    return clip(BoundingBox{box.y_min - dy, box.x_min - dx, box.y_max + dy, box.x_max + dx},
                width_px, height_px);
}

double box_iou(const BoundingBox& a, const BoundingBox& b) {
    BoundingBox inter = intersect(a, b);
    if (!inter.valid()) return 0.0;
    double i = static_cast<double>(inter.area());
    double u = static_cast<double>(a.area()) + static_cast<double>(b.area()) - i;
    return u > 0.0 ? i / u : 0.0;
}

BinaryMask::BinaryMask(int width_px, int height_px)
    : width_(width_px), height_(height_px) {
    if (width_px < 0 || height_px < 0) {
        throw BoundsError("mask dimensions must be nonnegative");
    }
    std::size_t pixels = static_cast<std::size_t>(width_px) * static_cast<std::size_t>(height_px);
    bits_.assign((pixels + 63) / 64, 0);
}

std::size_t BinaryMask::word_index(int y, int x) const {
    return (static_cast<std::size_t>(y) * width_ + x) / 64;
}

bool BinaryMask::test(int y, int x) const {
    if (y < 0 || y >= height_ || x < 0 || x >= width_) {
        throw BoundsError("mask pixel out of range");
    }
    std::size_t pixel = static_cast<std::size_t>(y) * width_ + x;
    return (bits_[pixel / 64] >> (pixel % 64)) & 1u;
}

void BinaryMask::set(int y, int x, bool value) {
    if (y < 0 || y >= height_ || x < 0 || x >= width_) {
        throw BoundsError("mask pixel out of range");
    }
    std::size_t pixel = static_cast<std::size_t>(y) * width_ + x;
    std::uint64_t bit = 1ULL << (pixel % 64);
    if (value) {
        bits_[pixel / 64] |= bit;
    } else {
        bits_[pixel / 64] &= ~bit;
    }
}

std::int64_t BinaryMask::popcount() const {
    std::int64_t total = 0;
    for (std::uint64_t word : bits_) {
        total += std::popcount(word);
    }
    return total;
}

void BinaryMask::check_same_dims(const BinaryMask& other) const {
    if (width_ != other.width_ || height_ != other.height_) {
        throw ShapeError("mask dimension mismatch");
    }
}

BinaryMask BinaryMask::unite(const BinaryMask& other) const {
    check_same_dims(other);
    BinaryMask out = *this;
    for (std::size_t i = 0; i < bits_.size(); ++i) out.bits_[i] |= other.bits_[i];
    return out;
}

BinaryMask BinaryMask::intersect(const BinaryMask& other) const {
    check_same_dims(other);
    BinaryMask out = *this;
    for (std::size_t i = 0; i < bits_.size(); ++i) out.bits_[i] &= other.bits_[i];
    return out;
}

BinaryMask BinaryMask::difference(const BinaryMask& other) const {
    check_same_dims(other);
    BinaryMask out = *this;
    for (std::size_t i = 0; i < bits_.size(); ++i) out.bits_[i] &= ~other.bits_[i];
    return out;
}

void BinaryMask::blit_union(const BinaryMask& other, int offset_y, int offset_x) {
    for (int y = 0; y < other.height(); ++y) {
        int py = y + offset_y;
        if (py < 0 || py >= height_) continue;
        for (int x = 0; x < other.width(); ++x) {
            int px = x + offset_x;
            if (px < 0 || px >= width_) continue;
            if (other.test(y, x)) set(py, px);
        }
    }
}

bool BinaryMask::is_subset_of(const BinaryMask& other) const {
    check_same_dims(other);
    for (std::size_t i = 0; i < bits_.size(); ++i) {
        if (bits_[i] & ~other.bits_[i]) return false;
    }
    return true;
}

bool BinaryMask::operator==(const BinaryMask& other) const {
    return width_ == other.width_ && height_ == other.height_ && bits_ == other.bits_;
}

std::vector<std::int64_t> BinaryMask::run_lengths() const {
    std::vector<std::int64_t> runs;
    bool current = false;  // runs start with zeros
    std::int64_t length = 0;
    for (int y = 0; y < height_; ++y) {
        for (int x = 0; x < width_; ++x) {
            bool value = test(y, x);
            if (value == current) {
                ++length;
            } else {
                runs.push_back(length);
                current = value;
                length = 1;
            }
        }
    }
    runs.push_back(length);
    if (runs.size() == 1 && runs[0] == 0) runs.clear();
    return runs;
}

BinaryMask BinaryMask::from_run_lengths(int width_px, int height_px,
                                        const std::vector<std::int64_t>& runs) {
    BinaryMask mask(width_px, height_px);
    std::int64_t total = static_cast<std::int64_t>(width_px) * height_px;
    std::int64_t pixel = 0;
    bool value = false;
    for (std::int64_t run : runs) {
        if (run < 0 || pixel + run > total) {
            throw FormatError("rle runs exceed mask size");
        }
        if (value) {
            for (std::int64_t i = 0; i < run; ++i) {
                std::int64_t p = pixel + i;
                mask.set(static_cast<int>(p / width_px), static_cast<int>(p % width_px));
            }
        }
        pixel += run;
        value = !value;
    }
    if (pixel != total) {
        throw FormatError("rle runs do not cover the mask");
    }
    return mask;
}

std::string BinaryMask::to_rle_json() const {
    nlohmann::ordered_json j;
    j["width"] = width_;
    j["height"] = height_;
    j["rle"] = run_lengths();
    return j.dump();
}

BinaryMask BinaryMask::from_rle_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("width") ||
        !j.contains("height") || !j.contains("rle")) {
        throw FormatError("not a mask rle record");
    }
    if (!j["width"].is_number_integer() || !j["height"].is_number_integer() ||
        !j["rle"].is_array()) {
        throw FormatError("malformed mask rle record");
    }
    std::vector<std::int64_t> runs;
    for (const auto& r : j["rle"]) {
        if (!r.is_number_integer()) throw FormatError("malformed rle run");
        runs.push_back(r.get<std::int64_t>());
    }
    return from_run_lengths(j["width"].get<int>(), j["height"].get<int>(), runs);
}

OverlapStats overlap_stats(const BinaryMask& a, const BinaryMask& b) {
    OverlapStats stats;
    stats.a_px = a.popcount();
    stats.b_px = b.popcount();
    stats.intersection_px = a.intersect(b).popcount();  // throws on shape mismatch
    stats.union_px = stats.a_px + stats.b_px - stats.intersection_px;
    return stats;
}

BinaryMask rasterize(const BoundingBox& box, int width_px, int height_px) {
    if (!box.within(width_px, height_px)) {
        throw BoundsError("box out of image bounds");
    }
    BinaryMask mask(width_px, height_px);
    for (int y = box.y_min; y < box.y_max; ++y) {
        for (int x = box.x_min; x < box.x_max; ++x) {
            mask.set(y, x);
        }
    }
    return mask;
}

BoundingBox to_local(const CropRegion& region, const BoundingBox& box) {
    BoundingBox clipped = intersect(box, region.box);
    if (!clipped.valid()) {
        throw EmptyResultError("box does not intersect crop region");
    }
    return BoundingBox{clipped.y_min - region.box.y_min, clipped.x_min - region.box.x_min,
                       clipped.y_max - region.box.y_min, clipped.x_max - region.box.x_min};
}

BoundingBox to_parent(const CropRegion& region, const BoundingBox& box) {
    return BoundingBox{box.y_min + region.box.y_min, box.x_min + region.box.x_min,
                       box.y_max + region.box.y_min, box.x_max + region.box.x_min};
}

}  // namespace segref
