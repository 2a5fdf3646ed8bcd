#include "segref/sim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <regex>
#include <sstream>

#include <json.hpp>

namespace segref {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Seed-stream tags; distinct constants keep the derived streams independent.
enum StreamTag : std::uint64_t {
    kSceneStream = 0x5343,
    kEpisodeStream = 0x4550,
    kBackendStream = 0x424b,
    kVerifierStream = 0x5646,
    kExploreStream = 0x4558,
    kVisibilityStream = 0x5649,
};

constexpr const char* kSceneLabel = "target";

}  // namespace

const char* density_name(DensityClass density) {
    switch (density) {
        case DensityClass::Few: return "few";
        case DensityClass::Medium: return "medium";
        case DensityClass::Crowd: return "crowd";
    }
    return "few";
}

DensityClass density_from_name(const std::string& name) {
    if (name == "few") return DensityClass::Few;
    if (name == "medium") return DensityClass::Medium;
    if (name == "crowd") return DensityClass::Crowd;
    throw ValidationError("unknown density class: " + name);
}

std::vector<std::size_t> SyntheticScene::included_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entities.size(); ++i) {
        if (entities[i].include) out.push_back(i);
    }
    return out;
}

int SyntheticScene::included_count() const {
    return static_cast<int>(included_indices().size());
}

namespace {

json box_json(const BoundingBox& b) {
    return json::array({b.y_min, b.x_min, b.y_max, b.x_max});
}

BoundingBox box_from_json(const json& j) {
    if (!j.is_array() || j.size() != 4) throw FormatError("box_2d must have 4 entries");
    return BoundingBox{j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(),
                       j.at(3).get<int>()};
}

}  // namespace

std::string SyntheticScene::to_json() const {
    ordered_json doc;
    doc["width"] = width;
    doc["height"] = height;
    doc["density"] = density_name(density);
    doc["seed"] = seed;
    auto ents = ordered_json::array();
    for (const auto& e : entities) {
        ordered_json row;
        row["box_2d"] = box_json(e.box);
        row["label"] = e.label;
        row["include"] = e.include;
        ents.push_back(std::move(row));
    }
    doc["entities"] = std::move(ents);
    ordered_json defects;
    defects["missed"] = this->defects.missed;
    defects["refine"] = this->defects.refine;
    defects["falses"] = this->defects.falses;
    doc["defects"] = std::move(defects);
    return doc.dump();
}

SyntheticScene SyntheticScene::from_json(const std::string& text) {
    json doc = json::parse(text, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) {
        throw FormatError("scene document is not valid JSON");
    }
    try {
        SyntheticScene scene;
        scene.width = doc.at("width").get<int>();
        scene.height = doc.at("height").get<int>();
        scene.density = density_from_name(doc.at("density").get<std::string>());
        scene.seed = doc.at("seed").get<std::uint64_t>();
        for (const auto& row : doc.at("entities")) {
            SceneEntity e;
            e.box = box_from_json(row.at("box_2d"));
            e.label = row.at("label").get<std::string>();
            e.include = row.at("include").get<bool>();
            scene.entities.push_back(std::move(e));
        }
        scene.defects.missed = doc.at("defects").at("missed").get<std::vector<std::size_t>>();
        scene.defects.refine = doc.at("defects").at("refine").get<std::vector<std::size_t>>();
        scene.defects.falses = doc.at("defects").at("falses").get<std::vector<std::size_t>>();

        for (const auto& e : scene.entities) {
            if (!e.box.within(scene.width, scene.height)) {
                throw FormatError("scene entity box escapes the image bounds");
            }
        }
        auto check_refs = [&](const std::vector<std::size_t>& refs, bool want_included,
                              const char* what) {
            for (std::size_t i : refs) {
                if (i >= scene.entities.size() ||
                    scene.entities[i].include != want_included) {
                    throw FormatError(std::string("defect ledger ") + what +
                                      " entry is inconsistent with the entity list");
                }
            }
        };
        check_refs(scene.defects.missed, true, "miss");
        check_refs(scene.defects.refine, true, "refine");
        check_refs(scene.defects.falses, false, "false-positive");
        return scene;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed scene document: ") + e.what());
    }
}

void ErrorModel::validate() const {
    auto check = [](double p, const char* name) {
        if (p < 0.0 || p > 1.0) {
            throw ValidationError(std::string(name) + " must lie in [0,1]");
        }
    };
    check(worker_miss_rate, "worker_miss_rate");
    check(worker_false_rate, "worker_false_rate");
    check(refine_rate, "refine_rate");
    check(supervisor_detect_prob, "supervisor_detect_prob");
    check(spurious_refinement_rate, "spurious_refinement_rate");
    check(fix_success_prob, "fix_success_prob");
    check(boxgen_drop_rate, "boxgen_drop_rate");
    check(verifier_noise, "verifier_noise");
    if (worker_jitter_px < 0) {
        throw ValidationError("worker_jitter_px must be nonnegative");
    }
}

std::string ErrorModel::to_json() const {
    ordered_json doc;
    doc["worker_miss_rate"] = worker_miss_rate;
    doc["worker_false_rate"] = worker_false_rate;
    doc["worker_jitter_px"] = worker_jitter_px;
    doc["refine_rate"] = refine_rate;
    doc["supervisor_detect_prob"] = supervisor_detect_prob;
    doc["spurious_refinement_rate"] = spurious_refinement_rate;
    doc["fix_success_prob"] = fix_success_prob;
    doc["boxgen_drop_rate"] = boxgen_drop_rate;
    doc["verifier_noise"] = verifier_noise;
    return doc.dump();
}

ErrorModel ErrorModel::from_json(const std::string& text) {
    json doc = json::parse(text, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) {
        throw FormatError("error model is not valid JSON");
    }
    ErrorModel model;
    model.worker_miss_rate = doc.value("worker_miss_rate", model.worker_miss_rate);
    model.worker_false_rate = doc.value("worker_false_rate", model.worker_false_rate);
    model.worker_jitter_px = doc.value("worker_jitter_px", model.worker_jitter_px);
    model.refine_rate = doc.value("refine_rate", model.refine_rate);
    model.supervisor_detect_prob =
        doc.value("supervisor_detect_prob", model.supervisor_detect_prob);
    model.spurious_refinement_rate =
        doc.value("spurious_refinement_rate", model.spurious_refinement_rate);
    model.fix_success_prob = doc.value("fix_success_prob", model.fix_success_prob);
    model.boxgen_drop_rate = doc.value("boxgen_drop_rate", model.boxgen_drop_rate);
    model.verifier_noise = doc.value("verifier_noise", model.verifier_noise);
    model.validate();
    return model;
}

ErrorModel ErrorModel::perfect() {
    ErrorModel model;
    model.worker_miss_rate = 0.0;
    model.worker_false_rate = 0.0;
    model.worker_jitter_px = 0;
    model.refine_rate = 0.0;
    model.supervisor_detect_prob = 1.0;
    model.spurious_refinement_rate = 0.0;
    model.fix_success_prob = 1.0;
    model.boxgen_drop_rate = 0.0;
    model.verifier_noise = 0.0;
    return model;
}

namespace {

constexpr int kSceneWidth = 640;
constexpr int kSceneHeight = 480;

BoundingBox random_box(Rng& rng, int width, int height, int min_side, int max_side) {
    int w = static_cast<int>(rng.uniform_int(min_side, max_side));
    int h = static_cast<int>(rng.uniform_int(min_side, max_side));
    int x = static_cast<int>(rng.uniform_int(0, width - w));
    int y = static_cast<int>(rng.uniform_int(0, height - h));
    return BoundingBox{y, x, y + h, x + w};
}

double max_iou_against(const BoundingBox& box, const std::vector<SceneEntity>& entities) {
    double best = 0.0;
    for (const auto& e : entities) best = std::max(best, box_iou(box, e.box));
    return best;
}

}  // namespace

SyntheticScene generate_scene(std::uint64_t seed, DensityClass density,
                              const ErrorModel& model) {
    model.validate();
    Rng rng(derive_seed(seed, {kSceneStream}));
    SyntheticScene scene;
    scene.width = kSceneWidth;
    scene.height = kSceneHeight;
    scene.density = density;
    scene.seed = seed;

    int lo = 1, hi = 2;
    if (density == DensityClass::Medium) {
        lo = 3;
        hi = 7;
    } else if (density == DensityClass::Crowd) {
        lo = 8;
        hi = 15;
    }
    int count = static_cast<int>(rng.uniform_int(lo, hi));
    for (int i = 0; i < count; ++i) {
        SceneEntity e;
        e.label = kSceneLabel;
        e.include = true;
        // Keep objects from stacking: a few placement attempts per object.
        for (int attempt = 0; attempt < 8; ++attempt) {
            e.box = random_box(rng, scene.width, scene.height, 40, 80);
            if (max_iou_against(e.box, scene.entities) < 0.3) break;
        }
        scene.entities.push_back(std::move(e));
    }

    std::size_t gt_count = scene.entities.size();
    for (std::size_t i = 0; i < gt_count; ++i) {
        if (rng.bernoulli(model.worker_miss_rate)) {
            scene.defects.missed.push_back(i);
        } else if (rng.bernoulli(model.refine_rate)) {
            scene.defects.refine.push_back(i);
        }
    }
    for (std::size_t i = 0; i < gt_count; ++i) {
        if (!rng.bernoulli(model.worker_false_rate)) continue;
        SceneEntity distractor;
        distractor.label = kSceneLabel;
        distractor.include = false;
        bool placed = false;
        for (int attempt = 0; attempt < 12; ++attempt) {
            distractor.box = random_box(rng, scene.width, scene.height, 30, 60);
            if (max_iou_against(distractor.box, scene.entities) < 0.3) {
                placed = true;
                break;
            }
        }
        if (!placed) continue;  // crowded frame, skip this distractor
        scene.defects.falses.push_back(scene.entities.size());
        scene.entities.push_back(std::move(distractor));
    }
    return scene;
}

ImageHandle make_scene_handle(const SyntheticScene& scene, const std::string& ref) {
    ImageHandle handle;
    handle.ref = ref;
    handle.width = scene.width;
    handle.height = scene.height;
    handle.payload = std::make_shared<SimImagePayload>(scene);
    return handle;
}

const SyntheticScene& scene_of(const ImageHandle& image) {
    auto payload = std::dynamic_pointer_cast<const SimImagePayload>(image.payload);
    if (!payload) {
        throw ValidationError("image handle carries no simulation payload");
    }
    return payload->scene;
}

namespace {

// Entity visible in the region: index plus its box in region-local
// coordinates. Entities less than half inside are treated as out of view.
struct LocalEntity {
    std::size_t index;
    BoundingBox box;
};

CropRegion region_of(const ImageHandle& image, const SyntheticScene& scene) {
    if (image.region) return *image.region;
    return CropRegion::full(scene.width, scene.height);
}

std::vector<LocalEntity> entities_in_region(const SyntheticScene& scene,
                                            const CropRegion& region) {
    std::vector<LocalEntity> out;
    for (std::size_t i = 0; i < scene.entities.size(); ++i) {
        const BoundingBox& box = scene.entities[i].box;
        BoundingBox overlap = intersect(box, region.box);
        if (!overlap.valid() || overlap.area() * 2 < box.area()) continue;
        out.push_back({i, to_local(region, box)});
    }
    return out;
}

bool contains_index(const std::vector<std::size_t>& list, std::size_t value) {
    return std::find(list.begin(), list.end(), value) != list.end();
}

// Shifted copy of the box: nonzero offset up to jitter_px per axis, still
// overlapping the original at IoU >= 0.5. Falls back to a one-pixel shrink
// when shifting cannot produce a distinct valid box.
BoundingBox jitter_box(const BoundingBox& box, Rng& rng, int jitter_px, int width,
                       int height) {
    for (int attempt = 0; attempt < 16 && jitter_px > 0; ++attempt) {
        int dy = static_cast<int>(rng.uniform_int(-jitter_px, jitter_px));
        int dx = static_cast<int>(rng.uniform_int(-jitter_px, jitter_px));
        if (dy == 0 && dx == 0) continue;
        BoundingBox shifted{box.y_min + dy, box.x_min + dx, box.y_max + dy,
                            box.x_max + dx};
        shifted = clip(shifted, width, height);
        if (shifted.valid() && !(shifted == box) && box_iou(shifted, box) >= 0.5) {
            return shifted;
        }
    }
    BoundingBox shrunk = box;
    if (shrunk.height() > 1) shrunk.y_max -= 1;
    else if (shrunk.width() > 1) shrunk.x_max -= 1;
    return shrunk;
}

const std::string* find_text_part(const BackendRequest& request,
                                  const std::function<bool(const json&)>& pred) {
    for (const auto& part : request.parts) {
        if (part.kind != Part::Kind::Text) continue;
        json doc = json::parse(part.text, nullptr, false);
        if (!doc.is_discarded() && pred(doc)) return &part.text;
    }
    return nullptr;
}

bool looks_like_subjects(const json& doc) {
    if (!doc.is_object() || !doc.contains("instances") || !doc["instances"].is_array()) {
        return false;
    }
    for (const auto& entry : doc["instances"]) {
        if (!entry.is_object()) return false;
        if (!entry.contains("id")) return false;  // candidates use box_id
    }
    return true;
}

bool looks_like_report(const json& doc) {
    return doc.is_object() && doc.contains("missing_objects") &&
           doc.contains("false_positives") && doc.contains("refinements");
}

const ImageHandle* find_image(const BackendRequest& request) {
    for (const auto& part : request.parts) {
        if (part.kind == Part::Kind::Image) return &part.image;
    }
    return nullptr;
}

std::string format_box(const BoundingBox& b) {
    return "[" + std::to_string(b.y_min) + "," + std::to_string(b.x_min) + "," +
           std::to_string(b.y_max) + "," + std::to_string(b.x_max) + "]";
}

const std::regex kBoxInReason(R"(\[(-?\d+),(-?\d+),(-?\d+),(-?\d+)\])");

std::optional<BoundingBox> box_from_reason(const std::string& reason) {
    std::smatch match;
    if (!std::regex_search(reason, match, kBoxInReason)) return std::nullopt;
    return BoundingBox{std::stoi(match[1]), std::stoi(match[2]), std::stoi(match[3]),
                       std::stoi(match[4])};
}

// Greedy entity-to-subject matching at IoU >= 0.5, in entity order. Returns
// subject index per local entity (-1 when unmatched).
std::vector<int> match_subjects(const std::vector<LocalEntity>& local,
                                const std::vector<SceneEntity>& entities,
                                const std::vector<SubjectInstance>& subjects) {
    std::vector<int> match(local.size(), -1);
    std::vector<bool> used(subjects.size(), false);
    for (std::size_t i = 0; i < local.size(); ++i) {
        if (!entities[local[i].index].include) continue;
        double best = 0.5;
        int best_j = -1;
        for (std::size_t j = 0; j < subjects.size(); ++j) {
            if (used[j]) continue;
            double iou = box_iou(local[i].box, subjects[j].box);
            if (iou >= best) {
                best = iou;
                best_j = static_cast<int>(j);
            }
        }
        if (best_j >= 0) {
            match[i] = best_j;
            used[best_j] = true;
        }
    }
    return match;
}

// Whether the critic notices a given defect is a property of the scene and
// the defect, not of the pass, so the coin comes from the scene seed plus a
// stable per-issue key. Re-rolling it every pass would let hidden defects
// surface on later passes, which makes a clean critique an unreliable stop
// signal and teaches the controller to buy extra passes on clean states.
enum VisibilityKind : std::uint64_t {
    kVisMiss = 0,
    kVisFalse = 1,
    kVisRefine = 2,
};

bool critic_notices(const SyntheticScene& scene, std::uint64_t kind,
                    std::uint64_t key, double p) {
    if (p <= 0.0) return false;
    if (p >= 1.0) return true;
    std::uint64_t raw = derive_seed(scene.seed, {kVisibilityStream, kind, key});
    return static_cast<double>(raw >> 11) * 0x1.0p-53 < p;
}

std::uint64_t box_key(const BoundingBox& box) {
    return derive_seed(static_cast<std::uint64_t>(box.y_min),
                       {static_cast<std::uint64_t>(box.x_min),
                        static_cast<std::uint64_t>(box.y_max),
                        static_cast<std::uint64_t>(box.x_max)});
}

BoundingBox junk_box(Rng& rng, const CropRegion& region,
                     const std::vector<LocalEntity>& local) {
    BoundingBox box;
    for (int attempt = 0; attempt < 20; ++attempt) {
        int max_side = std::min({60, region.width(), region.height()});
        int min_side = std::min(30, max_side);
        box = random_box(rng, region.width(), region.height(), min_side, max_side);
        double worst = 0.0;
        for (const auto& e : local) worst = std::max(worst, box_iou(box, e.box));
        if (worst < 0.3) break;
    }
    return box;
}

}  // namespace

SimBackend::SimBackend(ErrorModel model, std::uint64_t seed)
    : model_(std::move(model)), rng_(seed) {
    model_.validate();
}

BackendResponse SimBackend::complete(const BackendRequest& request) {
    std::lock_guard<std::mutex> lock(mutex_);
    const ImageHandle* image = find_image(request);
    if (image == nullptr) {
        throw BackendError("simulated backend needs an image part");
    }
    const SyntheticScene& scene = scene_of(*image);
    CropRegion region = region_of(*image, scene);
    std::vector<LocalEntity> local = entities_in_region(scene, region);

    std::string text;
    const std::string& role = request.role.role;
    if (role == "worker") {
        if (const std::string* subjects = find_text_part(request, looks_like_subjects)) {
            text = *subjects;  // refresh turn: confirm the updated set
        } else {
            std::vector<SubjectInstance> instances;
            long next = 0;
            for (const auto& le : local) {
                const SceneEntity& entity = scene.entities[le.index];
                bool emit = false;
                BoundingBox box = le.box;
                if (entity.include) {
                    if (contains_index(scene.defects.missed, le.index)) continue;
                    emit = true;
                    if (contains_index(scene.defects.refine, le.index)) {
                        box = jitter_box(box, rng_, model_.worker_jitter_px,
                                         region.width(), region.height());
                    }
                } else if (contains_index(scene.defects.falses, le.index)) {
                    emit = true;
                }
                if (!emit) continue;
                SubjectInstance s;
                s.id = "sub_" + std::to_string(next++);
                s.label = entity.label;
                s.box = box;
                instances.push_back(std::move(s));
            }
            text = serialize_instances(instances);
        }
    } else if (role == "supervisor_eval") {
        std::vector<SubjectInstance> subjects;
        if (const std::string* part = find_text_part(request, looks_like_subjects)) {
            subjects = parse_worker_output(*part, region.width(), region.height()).value;
        }
        std::vector<int> match = match_subjects(local, scene.entities, subjects);
        SupervisorReport report;
        std::vector<bool> matched(subjects.size(), false);
        for (std::size_t i = 0; i < local.size(); ++i) {
            if (match[i] >= 0) matched[static_cast<std::size_t>(match[i])] = true;
        }
        long next_m = 0;
        for (std::size_t i = 0; i < local.size(); ++i) {
            const SceneEntity& entity = scene.entities[local[i].index];
            if (!entity.include || match[i] >= 0) continue;
            if (!critic_notices(scene, kVisMiss, local[i].index,
                                model_.supervisor_detect_prob)) {
                continue;
            }
            MissingObject m;
            m.id = "m_" + std::to_string(next_m++);
            m.label = entity.label;
            m.reason = "target not covered at " + format_box(local[i].box) +
                       "; include per G0";
            report.missing_objects.push_back(std::move(m));
        }
        long next_e = 0;
        for (std::size_t j = 0; j < subjects.size(); ++j) {
            if (matched[j]) continue;
            if (!critic_notices(scene, kVisFalse, box_key(subjects[j].box),
                                model_.supervisor_detect_prob)) {
                continue;
            }
            FalsePositive f;
            f.id = "e_" + std::to_string(next_e++);
            f.label = subjects[j].label;
            f.subject_ref = subjects[j].id;
            f.reason = "does not belong to the target class; exclude per G1";
            report.false_positives.push_back(std::move(f));
        }
        for (std::size_t i = 0; i < local.size(); ++i) {
            if (match[i] < 0) continue;
            const SubjectInstance& subject = subjects[static_cast<std::size_t>(match[i])];
            Refinement r;
            r.box_id = subject.id;
            if (!(subject.box == local[i].box)) {
                if (!critic_notices(scene, kVisRefine, local[i].index,
                                    model_.supervisor_detect_prob)) {
                    continue;
                }
                // The instruction states the corrected extent, so applying a
                // refinement converges in one pass. Retry churn lives on the
                // candidate path, where the verifier gates the proposals.
                r.instruction = "align box to the object boundary per G2";
                r.replacement_box = local[i].box;
            } else {
                if (!rng_.bernoulli(model_.spurious_refinement_rate)) continue;
                r.instruction = "tighten box slightly per G2";
                r.replacement_box = subject.box;
            }
            report.refinements.push_back(std::move(r));
        }
        text = serialize_report(report);
    } else if (role == "supervisor_boxgen") {
        SupervisorReport report;
        if (const std::string* part = find_text_part(request, looks_like_report)) {
            report = parse_supervisor_eval(*part).value;
        }
        std::vector<SubjectInstance> subjects;
        if (const std::string* part = find_text_part(request, looks_like_subjects)) {
            subjects = parse_worker_output(*part, region.width(), region.height()).value;
        }
        std::vector<CandidateBox> candidates;
        for (const auto& m : report.missing_objects) {
            if (rng_.bernoulli(model_.boxgen_drop_rate)) continue;
            std::optional<BoundingBox> target = box_from_reason(m.reason);
            if (!target) continue;
            CandidateBox c;
            c.box_id = m.id;
            c.label = m.label;
            c.box = rng_.bernoulli(model_.fix_success_prob)
                        ? *target
                        : junk_box(rng_, region, local);
            candidates.push_back(std::move(c));
        }
        for (const auto& f : report.false_positives) {
            if (rng_.bernoulli(model_.boxgen_drop_rate)) continue;
            const SubjectInstance* subject = nullptr;
            if (f.subject_ref) {
                for (const auto& s : subjects) {
                    if (s.id == *f.subject_ref) subject = &s;
                }
            }
            CandidateBox c;
            c.box_id = f.id;
            c.label = f.label;
            c.box = (subject != nullptr && rng_.bernoulli(model_.fix_success_prob))
                        ? subject->box
                        : junk_box(rng_, region, local);
            candidates.push_back(std::move(c));
        }
        text = serialize_candidates(candidates);
    } else {
        throw BackendError("simulated backend has no handler for role " + role);
    }
    return BackendResponse{std::move(text), kSimInputTokens, kSimOutputTokens,
                           kSimLatencyMs};
}

BinaryMask SimSegmenter::segment(const ImageHandle& image, const SegmenterPrompt& prompt) {
    if (prompt.mode == SegmenterPrompt::Mode::BoxWithNegativePoint) {
        return BinaryMask(image.width, image.height);
    }
    BoundingBox box = clip(prompt.box, image.width, image.height);
    if (!box.valid()) return BinaryMask(image.width, image.height);
    int ey = std::min(erosion_px_, (box.height() - 1) / 2);
    int ex = std::min(erosion_px_, (box.width() - 1) / 2);
    BoundingBox shrunk{box.y_min + ey, box.x_min + ex, box.y_max - ey, box.x_max - ex};
    return rasterize(shrunk, image.width, image.height);
}

SimVerifierScorer::SimVerifierScorer(ErrorModel model, std::uint64_t seed)
    : model_(std::move(model)), rng_(seed) {
    model_.validate();
}

double SimVerifierScorer::score(const ImageHandle& crop, const std::string& label) {
    std::lock_guard<std::mutex> lock(mutex_);
    const SyntheticScene& scene = scene_of(crop);
    BoundingBox window = crop.region ? crop.region->box
                                     : BoundingBox{0, 0, scene.height, scene.width};
    bool framed = false;
    for (const auto& entity : scene.entities) {
        if (entity.label != label) continue;
        // The window carries the verifier's context buffer, so compare it
        // against the entity box buffered the same way.
        int dy = static_cast<int>(std::lround(0.1 * entity.box.height()));
        int dx = static_cast<int>(std::lround(0.1 * entity.box.width()));
        BoundingBox buffered = dilate(entity.box, dy, dx, scene.width, scene.height);
        if (box_iou(window, buffered) >= 0.5) {
            framed = true;
            break;
        }
    }
    if (rng_.bernoulli(model_.verifier_noise)) framed = !framed;
    return framed ? 2.0 : -2.0;
}

std::string SimCaptioner::caption(const ImageHandle& image) {
    const SyntheticScene& scene = scene_of(image);
    return std::to_string(scene.included_count()) +
           " target objects in a synthetic scene";
}

std::vector<BoundingBox> SimCoarseDetector::detect(const ImageHandle& image) {
    const SyntheticScene& scene = scene_of(image);
    double sx = static_cast<double>(image.width) / scene.width;
    double sy = static_cast<double>(image.height) / scene.height;
    std::vector<BoundingBox> out;
    for (const auto& entity : scene.entities) {
        BoundingBox scaled{static_cast<int>(std::lround(entity.box.y_min * sy)),
                           static_cast<int>(std::lround(entity.box.x_min * sx)),
                           static_cast<int>(std::lround(entity.box.y_max * sy)),
                           static_cast<int>(std::lround(entity.box.x_max * sx))};
        scaled = clip(scaled, image.width, image.height);
        if (scaled.valid()) out.push_back(scaled);
    }
    return out;
}

Action FixedKPolicy::decide(int s, int iteration, const IterationBounds& bounds) {
    (void)s;
    if (iteration < bounds.min_iters) return Action::Continue;
    if (iteration >= bounds.max_iters) return Action::Stop;
    return iteration < k_ ? Action::Continue : Action::Stop;
}

Action AdaptivePolicy::decide(int s, int iteration, const IterationBounds& bounds) {
    return controller_.decide(s, iteration, bounds);
}

void AdaptivePolicy::observe(int s, Action a, double r, int s_next, bool terminal) {
    if (learn_) controller_.update(s, a, r, s_next, terminal);
}

std::string EpisodeTrace::to_json() const {
    ordered_json doc;
    doc["density"] = density_name(density);
    auto iters = ordered_json::array();
    for (const auto& rec : iterations) {
        ordered_json row;
        row["iteration"] = rec.iteration;
        row["misses"] = rec.counts.misses;
        row["falses"] = rec.counts.falses;
        row["refinements"] = rec.counts.refinements;
        row["issue_score"] = rec.issue_score;
        row["state"] = rec.state;
        row["action"] = action_name(rec.action);
        row["forced"] = rec.forced;
        row["reward"] = rec.reward;
        row["worker_call_skipped"] = rec.worker_call_skipped;
        iters.push_back(std::move(row));
    }
    doc["iterations"] = std::move(iters);
    doc["hit_max"] = hit_max;
    doc["first_issue_score"] = first_issue_score;
    doc["final_issue_score"] = final_issue_score;
    doc["issues_resolved"] = issues_resolved;
    doc["total_reward"] = total_reward;
    doc["passes"] = passes;
    return doc.dump();
}

EpisodeTrace run_episode(const SyntheticScene& scene, const ErrorModel& model,
                         StopPolicy& policy, const IterationBounds& bounds,
                         std::uint64_t seed) {
    if (!bounds.valid()) {
        throw ValidationError("iteration bounds require 1 <= min <= max");
    }
    SimBackend backend(model, derive_seed(seed, {kBackendStream}));
    SimSegmenter segmenter;
    SimVerifierScorer scorer(model, derive_seed(seed, {kVerifierStream}));
    ImageHandle image = make_scene_handle(scene);
    RoleSet roles;

    EpisodeTrace trace;
    trace.density = scene.density;

    WorkerResult detect =
        worker_detect(backend, &segmenter, image, kSceneLabel, {}, roles, nullptr);
    SubjectRegistry registry = std::move(detect.registry);
    int initial_count = static_cast<int>(registry.size());

    MaskFn mask_fn = [&](const BoundingBox& box) -> std::optional<BinaryMask> {
        return segmenter.segment(image, SegmenterPrompt{SegmenterPrompt::Mode::BoxPositive,
                                                        box, std::nullopt});
    };

    std::vector<CandidateBox> pending;
    SupervisorReport pending_report;
    double prev_issue = 0.0;
    int prev_state = 0;

    for (int t = 1; t <= bounds.max_iters; ++t) {
        bool skipped = false;
        if (t > 1) {
            bool have_work = !pending.empty() || !pending_report.refinements.empty();
            if (have_work) {
                worker_refresh(backend, image, registry, pending, pending_report,
                               kSceneLabel, {}, roles, nullptr);
                apply_actions(registry, pending, pending_report, mask_fn);
            } else {
                skipped = true;
            }
        }

        auto eval = supervisor_evaluate(backend, image, registry, {}, roles, nullptr);
        IssueCounts counts{static_cast<int>(eval.value.missing_objects.size()),
                           static_cast<int>(eval.value.false_positives.size()),
                           static_cast<int>(eval.value.refinements.size())};
        double issue = issue_score(counts);
        int s = encode_state(initial_count, counts).encoded();
        if (t == 1) trace.first_issue_score = issue;

        if (t > 1) {
            double r = reward(prev_issue, issue, Action::Continue, false);
            policy.observe(prev_state, Action::Continue, r, s, t >= bounds.max_iters);
            trace.iterations.back().reward = r;
        }

        pending_report = std::move(eval.value);
        pending.clear();
        if (pending_report.has_candidate_work()) {
            auto proposals =
                supervisor_boxgen(backend, image, registry, pending_report, roles, nullptr);
            pending = verify_candidates(std::move(proposals.value), image, scorer).value;
        }

        Action action = policy.decide(s, t, bounds);
        bool forced = t < bounds.min_iters || t >= bounds.max_iters;
        trace.iterations.push_back(
            {t, counts, issue, s, action, forced, 0.0, skipped});

        if (action == Action::Stop) {
            bool at_max = t >= bounds.max_iters;
            double r = reward(issue, issue, Action::Stop, at_max);
            trace.iterations.back().reward = r;
            // The forced stop at the cap carries no decision to learn from.
            if (!at_max) policy.observe(s, Action::Stop, r, s, true);
            trace.hit_max = at_max;
            trace.final_issue_score = issue;
            break;
        }
        prev_issue = issue;
        prev_state = s;
    }

    trace.passes = static_cast<int>(trace.iterations.size());
    trace.issues_resolved = trace.first_issue_score - trace.final_issue_score;
    for (const auto& rec : trace.iterations) trace.total_reward += rec.reward;
    return trace;
}

TrainResult train_controller(int episodes, const ErrorModel& model,
                             const IterationBounds& bounds, std::uint64_t seed,
                             const std::vector<DensityClass>& density_mix,
                             const std::function<void(int, const EpisodeTrace&)>& on_episode) {
    if (episodes < 1) {
        throw ValidationError("training needs at least one episode");
    }
    if (density_mix.empty()) {
        throw ValidationError("density mix must not be empty");
    }
    Controller controller(QTable{}, true, derive_seed(seed, {kExploreStream}));
    AdaptivePolicy policy(controller, true);
    TrainResult result;
    double cumulative = 0.0;
    for (int i = 0; i < episodes; ++i) {
        DensityClass density =
            density_mix[static_cast<std::size_t>(i) % density_mix.size()];
        std::uint64_t index = static_cast<std::uint64_t>(i);
        SyntheticScene scene =
            generate_scene(derive_seed(seed, {kSceneStream, index}), density, model);
        EpisodeTrace trace = run_episode(scene, model, policy, bounds,
                                         derive_seed(seed, {kEpisodeStream, index}));
        cumulative += trace.total_reward;
        result.episode_cumulative.push_back(cumulative);
        if (on_episode) on_episode(i, trace);
    }
    result.table = controller.snapshot();
    return result;
}

AblationReport ablate_policies(const ErrorModel& model, int n_scenes,
                               std::uint64_t seed, const QTable& trained,
                               const IterationBounds& bounds,
                               const std::vector<DensityClass>& density_mix) {
    if (n_scenes < 1) {
        throw ValidationError("ablation needs at least one scene");
    }
    if (density_mix.empty()) {
        throw ValidationError("density mix must not be empty");
    }
    Controller controller(trained, false, derive_seed(seed, {kExploreStream}));
    AdaptivePolicy adaptive(controller, false);
    FixedKPolicy fixed(bounds.min_iters);

    AblationReport report;
    report.scenes = n_scenes;
    double adaptive_sum = 0.0, fixed_sum = 0.0;
    int extra = 0;
    double by_density_sum[3][2] = {};
    int by_density_n[3] = {};

    for (int i = 0; i < n_scenes; ++i) {
        DensityClass density =
            density_mix[static_cast<std::size_t>(i) % density_mix.size()];
        std::uint64_t index = static_cast<std::uint64_t>(i);
        SyntheticScene scene =
            generate_scene(derive_seed(seed, {kSceneStream, index}), density, model);
        std::uint64_t episode_seed = derive_seed(seed, {kEpisodeStream, index});
        EpisodeTrace a = run_episode(scene, model, adaptive, bounds, episode_seed);
        EpisodeTrace f = run_episode(scene, model, fixed, bounds, episode_seed);
        adaptive_sum += a.issues_resolved;
        fixed_sum += f.issues_resolved;
        if (a.passes > bounds.min_iters) extra += 1;
        int d = static_cast<int>(density);
        by_density_sum[d][0] += a.issues_resolved;
        by_density_sum[d][1] += f.issues_resolved;
        by_density_n[d] += 1;
    }

    report.adaptive_resolved = adaptive_sum / n_scenes;
    report.fixed_resolved = fixed_sum / n_scenes;
    report.extra_pass_fraction = static_cast<double>(extra) / n_scenes;
    report.ratio = report.fixed_resolved > 0.0
                       ? report.adaptive_resolved / report.fixed_resolved
                       : (report.adaptive_resolved > 0.0
                              ? std::numeric_limits<double>::infinity()
                              : 1.0);
    for (int d = 0; d < 3; ++d) {
        if (by_density_n[d] == 0) continue;
        DensityComparison row;
        row.density = static_cast<DensityClass>(d);
        row.adaptive_resolved = by_density_sum[d][0] / by_density_n[d];
        row.fixed_resolved = by_density_sum[d][1] / by_density_n[d];
        report.by_density.push_back(row);
    }
    return report;
}

std::string AblationReport::to_json() const {
    ordered_json doc;
    doc["scenes"] = scenes;
    doc["adaptive_issues_resolved_per_crop"] = adaptive_resolved;
    doc["fixed_k_issues_resolved_per_crop"] = fixed_resolved;
    if (std::isfinite(ratio)) {
        doc["ratio"] = ratio;
    } else {
        doc["ratio"] = nullptr;
    }
    doc["extra_pass_fraction"] = extra_pass_fraction;
    auto rows = ordered_json::array();
    for (const auto& row : by_density) {
        ordered_json r;
        r["density"] = density_name(row.density);
        r["adaptive_resolved"] = row.adaptive_resolved;
        r["fixed_resolved"] = row.fixed_resolved;
        r["gain"] = row.gain();
        rows.push_back(std::move(r));
    }
    doc["by_density"] = std::move(rows);
    return doc.dump(2) + "\n";
}

std::string AblationReport::to_csv() const {
    std::ostringstream out;
    out << "density,adaptive_resolved,fixed_resolved,gain\n";
    for (const auto& row : by_density) {
        out << density_name(row.density) << ',' << row.adaptive_resolved << ','
            << row.fixed_resolved << ',' << row.gain() << '\n';
    }
    out << "all," << adaptive_resolved << ',' << fixed_resolved << ','
        << adaptive_resolved - fixed_resolved << '\n';
    return out.str();
}

std::string SimulationConfig::to_json() const {
    ordered_json doc;
    doc["error_model"] = json::parse(error_model.to_json());
    ordered_json b;
    b["min_iters"] = bounds.min_iters;
    b["max_iters"] = bounds.max_iters;
    doc["bounds"] = std::move(b);
    auto mix = ordered_json::array();
    for (DensityClass d : density_mix) mix.push_back(density_name(d));
    doc["density_mix"] = std::move(mix);
    doc["episodes"] = episodes;
    doc["seed"] = seed;
    return doc.dump(2) + "\n";
}

SimulationConfig SimulationConfig::from_json(const std::string& text) {
    json doc = json::parse(text, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) {
        throw FormatError("simulation config is not valid JSON");
    }
    SimulationConfig config;
    if (doc.contains("error_model")) {
        config.error_model = ErrorModel::from_json(doc["error_model"].dump());
    }
    if (doc.contains("bounds")) {
        config.bounds.min_iters = doc["bounds"].value("min_iters", config.bounds.min_iters);
        config.bounds.max_iters = doc["bounds"].value("max_iters", config.bounds.max_iters);
        if (!config.bounds.valid()) {
            throw ValidationError("iteration bounds require 1 <= min <= max");
        }
    }
    if (doc.contains("density_mix")) {
        config.density_mix.clear();
        for (const auto& name : doc["density_mix"]) {
            config.density_mix.push_back(density_from_name(name.get<std::string>()));
        }
        if (config.density_mix.empty()) {
            throw ValidationError("density_mix must not be empty");
        }
    }
    config.episodes = doc.value("episodes", config.episodes);
    config.seed = doc.value("seed", config.seed);
    if (config.episodes < 1) {
        throw ValidationError("episodes must be at least 1");
    }
    return config;
}

}  // namespace segref
