#include "segref/protocol.hpp"

#include <algorithm>
#include <cctype>
#include <regex>

#include <json.hpp>

namespace segref {

using nlohmann::json;
using nlohmann::ordered_json;

void SubjectRegistry::insert(SubjectInstance subject) {
    long n = subject_number(subject.id);
    if (find(subject.id) != nullptr) {
        throw ValidationError("duplicate subject id " + subject.id);
    }
    next_id_ = std::max(next_id_, n + 1);
    subjects_.push_back(std::move(subject));
}

std::string SubjectRegistry::add(std::string label, BoundingBox box,
                                 std::optional<BinaryMask> mask) {
    SubjectInstance subject;
    subject.id = "sub_" + std::to_string(next_id_++);
    subject.label = std::move(label);
    subject.box = box;
    subject.mask = std::move(mask);
    std::string id = subject.id;
    subjects_.push_back(std::move(subject));
    return id;
}

bool SubjectRegistry::remove(const std::string& id) {
    auto it = std::find_if(subjects_.begin(), subjects_.end(),
                           [&](const SubjectInstance& s) { return s.id == id; });
    if (it == subjects_.end()) return false;
    subjects_.erase(it);
    return true;
}

SubjectInstance* SubjectRegistry::find(const std::string& id) {
    auto it = std::find_if(subjects_.begin(), subjects_.end(),
                           [&](const SubjectInstance& s) { return s.id == id; });
    return it == subjects_.end() ? nullptr : &*it;
}

const SubjectInstance* SubjectRegistry::find(const std::string& id) const {
    auto it = std::find_if(subjects_.begin(), subjects_.end(),
                           [&](const SubjectInstance& s) { return s.id == id; });
    return it == subjects_.end() ? nullptr : &*it;
}

namespace {

bool id_matches(const std::string& id, const std::string& prefix) {
    if (id.size() <= prefix.size() || id.compare(0, prefix.size(), prefix) != 0) {
        return false;
    }
    return std::all_of(id.begin() + static_cast<long>(prefix.size()), id.end(),
                       [](unsigned char c) { return std::isdigit(c); });
}

// Scans `text` for the first parseable JSON object at or after `from`,
// matching braces while respecting string literals. Returns a discarded value
// when nothing parses.
json extract_json_object(const std::string& text) {
    for (std::size_t start = text.find('{'); start != std::string::npos;
         start = text.find('{', start + 1)) {
        int depth = 0;
        bool in_string = false;
        bool escaped = false;
        for (std::size_t i = start; i < text.size(); ++i) {
            char c = text[i];
            if (in_string) {
                if (escaped) {
                    escaped = false;
                } else if (c == '\\') {
                    escaped = true;
                } else if (c == '"') {
                    in_string = false;
                }
                continue;
            }
            if (c == '"') {
                in_string = true;
            } else if (c == '{') {
                ++depth;
            } else if (c == '}') {
                if (--depth == 0) {
                    json parsed = json::parse(text.substr(start, i - start + 1),
                                              nullptr, false);
                    if (!parsed.is_discarded()) return parsed;
                    break;  // resume scanning after this '{'
                }
            }
        }
    }
    return json::value_t::discarded;
}

std::optional<BoundingBox> read_box_2d(const json& j) {
    if (!j.is_array() || j.size() != 4) return std::nullopt;
    for (const auto& v : j) {
        if (!v.is_number()) return std::nullopt;
    }
    // box_2d is [y_min, x_min, y_max, x_max]
    return BoundingBox{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

json box_2d_json(const BoundingBox& b) {
    return json::array({b.y_min, b.x_min, b.y_max, b.x_max});
}

// Tolerant string-field accessor: absent or wrongly typed fields read as "".
std::string str_field(const json& entry, const char* key) {
    if (!entry.is_object()) return {};
    auto it = entry.find(key);
    if (it == entry.end() || !it->is_string()) return {};
    return it->get<std::string>();
}

const std::regex kGuidelineCite("G[0-9]+");

}  // namespace

long subject_number(const std::string& id) {
    if (!id_matches(id, "sub_")) {
        throw ValidationError("subject id must match sub_<n>: " + id);
    }
    return std::stol(id.substr(4));
}

Parsed<std::vector<SubjectInstance>> parse_worker_output(const std::string& text,
                                                         int width, int height) {
    json doc = extract_json_object(text);
    if (doc.is_discarded() || !doc.is_object() || !doc.contains("instances") ||
        !doc["instances"].is_array()) {
        throw ProtocolError("worker output has no instances object", text);
    }
    Parsed<std::vector<SubjectInstance>> out;
    for (const auto& entry : doc["instances"]) {
        if (!entry.is_object() || !entry.contains("id") || !entry.contains("label") ||
            !entry.contains("box_2d") || !entry["id"].is_string() ||
            !entry["label"].is_string()) {
            out.warnings.push_back("worker instance missing id/label/box_2d, dropped");
            continue;
        }
        std::string id = entry["id"].get<std::string>();
        if (!id_matches(id, "sub_")) {
            out.warnings.push_back("worker instance id not sub_<n>: " + id + ", dropped");
            continue;
        }
        auto box = read_box_2d(entry["box_2d"]);
        if (!box) {
            out.warnings.push_back("worker instance " + id + " has malformed box_2d, dropped");
            continue;
        }
        BoundingBox clipped = clip(*box, width, height);
        if (!clipped.valid()) {
            out.warnings.push_back("worker instance " + id + " has degenerate box, dropped");
            continue;
        }
        SubjectInstance subject;
        subject.id = std::move(id);
        subject.label = entry["label"].get<std::string>();
        subject.box = clipped;
        out.value.push_back(std::move(subject));
    }
    return out;
}

Parsed<SupervisorReport> parse_supervisor_eval(const std::string& text) {
    json doc = extract_json_object(text);
    if (doc.is_discarded() || !doc.is_object()) {
        throw ProtocolError("supervisor output is not a JSON object", text);
    }
    for (const char* field : {"missing_objects", "false_positives", "refinements"}) {
        if (!doc.contains(field) || !doc[field].is_array()) {
            throw ProtocolError(std::string("supervisor output missing field ") + field,
                                text);
        }
    }
    Parsed<SupervisorReport> out;
    auto check_reason = [&](const std::string& owner, const std::string& reason) {
        if (reason.empty()) {
            throw ProtocolError("empty reason on " + owner, text);
        }
        if (!std::regex_search(reason, kGuidelineCite)) {
            out.warnings.push_back(owner + " reason cites no guideline id");
        }
    };

    for (const auto& entry : doc["missing_objects"]) {
        MissingObject m;
        m.id = str_field(entry, "missing_object_id");
        if (!id_matches(m.id, "m_")) {
            throw ProtocolError("malformed missing_object_id: " + m.id, text);
        }
        m.label = str_field(entry, "label");
        m.reason = str_field(entry, "reason");
        check_reason(m.id, m.reason);
        out.value.missing_objects.push_back(std::move(m));
    }
    for (const auto& entry : doc["false_positives"]) {
        FalsePositive f;
        f.id = str_field(entry, "id");
        if (!id_matches(f.id, "e_")) {
            throw ProtocolError("malformed false positive id: " + f.id, text);
        }
        f.label = str_field(entry, "label");
        f.reason = str_field(entry, "reason");
        if (entry.is_object() && entry.contains("subject_ref")) {
            std::string ref = str_field(entry, "subject_ref");
            if (!id_matches(ref, "sub_")) {
                throw ProtocolError("malformed subject_ref: " + ref, text);
            }
            f.subject_ref = std::move(ref);
        }
        check_reason(f.id, f.reason);
        out.value.false_positives.push_back(std::move(f));
    }
    for (const auto& entry : doc["refinements"]) {
        Refinement r;
        r.box_id = str_field(entry, "box_id");
        if (!id_matches(r.box_id, "sub_")) {
            throw ProtocolError("malformed refinement box_id: " + r.box_id, text);
        }
        r.instruction = str_field(entry, "instruction");
        if (entry.is_object() && entry.contains("replacement_box")) {
            auto box = read_box_2d(entry["replacement_box"]);
            if (!box || !box->valid()) {
                throw ProtocolError("malformed replacement_box on " + r.box_id, text);
            }
            r.replacement_box = box;
        }
        out.value.refinements.push_back(std::move(r));
    }

    auto unique_ids = [&](const auto& list, auto get_id, const char* what) {
        for (std::size_t i = 0; i < list.size(); ++i) {
            for (std::size_t j = i + 1; j < list.size(); ++j) {
                if (get_id(list[i]) == get_id(list[j])) {
                    throw ProtocolError(std::string("duplicate ") + what + " id " +
                                            get_id(list[i]),
                                        text);
                }
            }
        }
    };
    unique_ids(out.value.missing_objects, [](const MissingObject& m) { return m.id; },
               "missing object");
    unique_ids(out.value.false_positives, [](const FalsePositive& f) { return f.id; },
               "false positive");
    return out;
}

Parsed<std::vector<CandidateBox>> parse_boxgen_output(const std::string& text,
                                                      const SupervisorReport& report,
                                                      int width, int height) {
    json doc = extract_json_object(text);
    if (doc.is_discarded() || !doc.is_object() || !doc.contains("instances") ||
        !doc["instances"].is_array()) {
        throw ProtocolError("boxgen output has no instances object", text);
    }
    auto known_id = [&](const std::string& id) {
        for (const auto& m : report.missing_objects) {
            if (m.id == id) return true;
        }
        for (const auto& f : report.false_positives) {
            if (f.id == id) return true;
        }
        return false;
    };
    Parsed<std::vector<CandidateBox>> out;
    for (const auto& entry : doc["instances"]) {
        if (!entry.is_object() || !entry.contains("box_id") || !entry.contains("box_2d") ||
            !entry["box_id"].is_string()) {
            out.warnings.push_back("boxgen instance missing box_id/box_2d, dropped");
            continue;
        }
        CandidateBox candidate;
        candidate.box_id = entry["box_id"].get<std::string>();
        // Table A keys the example on m_<n>, but removals come through as
        // e_<n>; accept both prefixes.
        if (!id_matches(candidate.box_id, "m_") && !id_matches(candidate.box_id, "e_")) {
            out.warnings.push_back("boxgen box_id not m_<n>/e_<n>: " + candidate.box_id +
                                   ", dropped");
            continue;
        }
        if (!known_id(candidate.box_id)) {
            out.warnings.push_back("boxgen box_id " + candidate.box_id +
                                   " not in supervisor report, dropped");
            continue;
        }
        auto box = read_box_2d(entry["box_2d"]);
        if (!box) {
            out.warnings.push_back("boxgen candidate " + candidate.box_id +
                                   " has malformed box_2d, dropped");
            continue;
        }
        BoundingBox clipped = clip(*box, width, height);
        if (!clipped.valid()) {
            out.warnings.push_back("boxgen candidate " + candidate.box_id +
                                   " has degenerate box, dropped");
            continue;
        }
        candidate.label = str_field(entry, "label");
        candidate.box = clipped;
        out.value.push_back(std::move(candidate));
    }
    return out;
}

std::string serialize_instances(const std::vector<SubjectInstance>& instances) {
    ordered_json doc;
    auto arr = ordered_json::array();
    for (const auto& s : instances) {
        ordered_json entry;
        entry["id"] = s.id;
        entry["label"] = s.label;
        entry["box_2d"] = box_2d_json(s.box);
        arr.push_back(std::move(entry));
    }
    doc["instances"] = std::move(arr);
    return doc.dump();
}

std::string serialize_report(const SupervisorReport& report) {
    ordered_json doc;
    auto missing = ordered_json::array();
    for (const auto& m : report.missing_objects) {
        ordered_json entry;
        entry["missing_object_id"] = m.id;
        entry["label"] = m.label;
        entry["reason"] = m.reason;
        missing.push_back(std::move(entry));
    }
    auto falses = ordered_json::array();
    for (const auto& f : report.false_positives) {
        ordered_json entry;
        entry["id"] = f.id;
        entry["label"] = f.label;
        if (f.subject_ref) entry["subject_ref"] = *f.subject_ref;
        entry["reason"] = f.reason;
        falses.push_back(std::move(entry));
    }
    auto refinements = ordered_json::array();
    for (const auto& r : report.refinements) {
        ordered_json entry;
        entry["box_id"] = r.box_id;
        entry["instruction"] = r.instruction;
        if (r.replacement_box) entry["replacement_box"] = box_2d_json(*r.replacement_box);
        refinements.push_back(std::move(entry));
    }
    doc["missing_objects"] = std::move(missing);
    doc["false_positives"] = std::move(falses);
    doc["refinements"] = std::move(refinements);
    return doc.dump();
}

std::string serialize_candidates(const std::vector<CandidateBox>& candidates) {
    ordered_json doc;
    auto arr = ordered_json::array();
    for (const auto& c : candidates) {
        ordered_json entry;
        entry["box_id"] = c.box_id;
        entry["label"] = c.label;
        entry["box_2d"] = box_2d_json(c.box);
        arr.push_back(std::move(entry));
    }
    doc["instances"] = std::move(arr);
    return doc.dump();
}

namespace {

const FalsePositive* report_false_entry(const SupervisorReport& report,
                                        const std::string& id) {
    for (const auto& f : report.false_positives) {
        if (f.id == id) return &f;
    }
    return nullptr;
}

std::string match_false_positive(const SubjectRegistry& registry,
                                 const SupervisorReport& report,
                                 const CandidateBox& candidate) {
    if (const FalsePositive* entry = report_false_entry(report, candidate.box_id)) {
        if (entry->subject_ref && registry.find(*entry->subject_ref)) {
            return *entry->subject_ref;
        }
    }
    std::string best;
    double best_iou = 0.5;  // acceptance floor
    for (const auto& s : registry.subjects()) {
        double iou = box_iou(s.box, candidate.box);
        if (iou >= best_iou) {
            best_iou = iou;
            best = s.id;
        }
    }
    return best;
}

}  // namespace

ChangeSummary apply_actions(SubjectRegistry& registry,
                            const std::vector<CandidateBox>& candidates,
                            const SupervisorReport& report,
                            const MaskFn& mask_fn,
                            const EraseFn& erase_fn,
                            const RefineFn& refine_fn) {
    ChangeSummary summary;
    auto make_mask = [&](const BoundingBox& box, const std::string& owner)
        -> std::optional<BinaryMask> {
        if (!mask_fn) {
            summary.warnings.push_back("no segmenter available for " + owner);
            return std::nullopt;
        }
        std::optional<BinaryMask> mask;
        try {
            mask = mask_fn(box);
        } catch (const std::exception& e) {
            mask = std::nullopt;
            summary.warnings.push_back("segmenter error for " + owner + ": " + e.what());
        }
        if (!mask) {
            summary.warnings.push_back("segmentation failed for " + owner);
        }
        return mask;
    };

    for (const auto& candidate : candidates) {
        if (!candidate.verified) {
            summary.warnings.push_back("unverified candidate " + candidate.box_id +
                                       " ignored");
            continue;
        }
        if (candidate.box_id.rfind("m_", 0) == 0) {
            std::string id = registry.add(candidate.label, candidate.box,
                                          make_mask(candidate.box, candidate.box_id));
            (void)id;
            ++summary.added;
        } else {
            std::string target = match_false_positive(registry, report, candidate);
            if (target.empty()) {
                summary.warnings.push_back("false positive " + candidate.box_id +
                                           " matches no subject, skipped");
                continue;
            }
            const SubjectInstance* subject = registry.find(target);
            if (erase_fn) erase_fn(subject->box);
            registry.remove(target);
            ++summary.removed;
        }
    }

    for (const auto& refinement : report.refinements) {
        SubjectInstance* subject = registry.find(refinement.box_id);
        if (subject == nullptr) {
            summary.warnings.push_back("refinement references removed subject " +
                                       refinement.box_id + ", skipped");
            continue;
        }
        std::optional<BoundingBox> new_box = refinement.replacement_box;
        if (!new_box && refine_fn) {
            new_box = refine_fn(*subject, refinement.instruction);
        }
        if (!new_box || !new_box->valid()) {
            summary.warnings.push_back("refinement on " + refinement.box_id +
                                       " has no usable box, skipped");
            continue;
        }
        subject->box = *new_box;
        if (auto mask = make_mask(*new_box, refinement.box_id)) {
            subject->mask = std::move(mask);
        }
        ++summary.refined;
    }
    return summary;
}

}  // namespace segref
