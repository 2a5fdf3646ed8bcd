#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "segref/geometry.hpp"

namespace segref {

// One detected object. Ids follow sub_<n> and are never reused within a run.
struct SubjectInstance {
    std::string id;
    std::string label;
    BoundingBox box;
    std::optional<BinaryMask> mask;
};

// The evolving detection set of one refinement loop. Insertion order is
// preserved; the next-id counter always exceeds every numeric suffix seen.
class SubjectRegistry {
public:
    // Inserts with the subject's own id; advances the counter past it.
    void insert(SubjectInstance subject);
    // Inserts with a freshly assigned sub_<n> id; returns the id.
    std::string add(std::string label, BoundingBox box, std::optional<BinaryMask> mask);
    bool remove(const std::string& id);

    SubjectInstance* find(const std::string& id);
    const SubjectInstance* find(const std::string& id) const;

    const std::vector<SubjectInstance>& subjects() const { return subjects_; }
    std::vector<SubjectInstance>& subjects() { return subjects_; }
    std::size_t size() const { return subjects_.size(); }
    long next_id() const { return next_id_; }

private:
    std::vector<SubjectInstance> subjects_;
    long next_id_ = 0;
};

struct MissingObject {
    std::string id;  // m_<n>
    std::string label;
    std::string reason;
};

struct FalsePositive {
    std::string id;  // e_<n>
    std::string label;
    std::optional<std::string> subject_ref;  // sub_<n> when the critic names it
    std::string reason;
};

struct Refinement {
    std::string box_id;  // sub_<n>
    std::string instruction;
    std::optional<BoundingBox> replacement_box;
};

struct SupervisorReport {
    std::vector<MissingObject> missing_objects;
    std::vector<FalsePositive> false_positives;
    std::vector<Refinement> refinements;

    bool clean() const {
        return missing_objects.empty() && false_positives.empty() && refinements.empty();
    }
    bool has_candidate_work() const {
        return !missing_objects.empty() || !false_positives.empty();
    }
};

struct CandidateBox {
    std::string box_id;  // m_<n> or e_<n>, must reference a report entry
    std::string label;
    BoundingBox box;
    bool verified = false;
    std::optional<double> score;
};

// Parsed value plus non-fatal diagnostics accumulated along the way.
template <typename T>
struct Parsed {
    T value;
    std::vector<std::string> warnings;
};

long subject_number(const std::string& id);  // sub_<n> -> n, ValidationError otherwise

// Worker output: a JSON object with "instances", tolerating surrounding prose
// and code fences. Boxes are clipped to (width, height); degenerate instances
// are dropped with a warning. No parseable JSON -> ProtocolError carrying the
// raw text.
Parsed<std::vector<SubjectInstance>> parse_worker_output(const std::string& text,
                                                         int width, int height);

// Supervisor critique: requires the three list fields (each may be empty).
// Missing fields and malformed ids are ProtocolErrors; a reason that cites no
// G<n> id only warns.
Parsed<SupervisorReport> parse_supervisor_eval(const std::string& text);

// Box proposals cross-checked against the report; candidates with unknown
// box_ids are dropped with a warning.
Parsed<std::vector<CandidateBox>> parse_boxgen_output(const std::string& text,
                                                      const SupervisorReport& report,
                                                      int width, int height);

std::string serialize_instances(const std::vector<SubjectInstance>& instances);
std::string serialize_report(const SupervisorReport& report);
std::string serialize_candidates(const std::vector<CandidateBox>& candidates);

struct ChangeSummary {
    int added = 0;
    int removed = 0;
    int refined = 0;
    std::vector<std::string> warnings;
};

// Produces a subject mask for a box prompt; empty optional means the
// segmentation failed and the subject keeps its previous mask.
using MaskFn = std::function<std::optional<BinaryMask>(const BoundingBox& box)>;
// Acknowledges a negative-point erase for a removed subject.
using EraseFn = std::function<void(const BoundingBox& box)>;
// Resolves an instruction-only refinement to a corrected box (e.g. by asking
// the worker backend); empty optional skips the refinement.
using RefineFn = std::function<std::optional<BoundingBox>(const SubjectInstance&,
                                                          const std::string& instruction)>;

// Applies verified candidates and report refinements to the registry:
// verified m_* candidates become new subjects with fresh ids and masks;
// verified e_* candidates remove the referenced subject (explicit subject_ref
// first, else max-IoU >= 0.5); refinements replace the subject's box and
// regenerate its mask. Ids are conserved: fresh adds only, no reuse.
ChangeSummary apply_actions(SubjectRegistry& registry,
                            const std::vector<CandidateBox>& candidates,
                            const SupervisorReport& report,
                            const MaskFn& mask_fn,
                            const EraseFn& erase_fn = {},
                            const RefineFn& refine_fn = {});

}  // namespace segref
