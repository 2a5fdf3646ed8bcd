#pragma once

#include <memory>
#include <optional>
#include <string>

#include "segref/geometry.hpp"

namespace segref {

// Backends that need more than a reference string (the simulation does) hang
// their state off this base.
class ImagePayload {
public:
    virtual ~ImagePayload() = default;
};

// Opaque image handle. The engine never decodes pixels; it forwards the
// reference to backends and tracks dimensions plus an optional crop window
// expressed in the original image's coordinates.
struct ImageHandle {
    std::string ref;
    int width = 0;
    int height = 0;
    std::shared_ptr<const ImagePayload> payload;
    std::optional<CropRegion> region;

    // Reference string sent to remote backends; crops are encoded inline so
    // adapter shims can do the actual pixel work.
    std::string wire_ref() const {
        if (!region) return ref;
        const BoundingBox& b = region->box;
        return ref + "#crop=" + std::to_string(b.y_min) + "," + std::to_string(b.x_min) +
               "," + std::to_string(b.y_max) + "," + std::to_string(b.x_max);
    }

    ImageHandle cropped(const CropRegion& crop) const {
        ImageHandle out = *this;
        out.width = crop.width();
        out.height = crop.height();
        out.region = crop;
        return out;
    }
};

}  // namespace segref
