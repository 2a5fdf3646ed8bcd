#include "segref/agents.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace segref {

void RoleConfig::validate() const {
    if (temperature < 0.0 || temperature > 2.0) {
        throw ValidationError("temperature out of range for role " + role);
    }
    if (response_schema && role != "supervisor_eval") {
        throw ValidationError("response schema is reserved for supervisor_eval, not " +
                              role);
    }
}

void SegmenterPrompt::validate() const {
    if (!box.valid()) {
        throw ValidationError("segmenter prompt box is degenerate");
    }
    if (mode == Mode::BoxWithNegativePoint) {
        if (!point) {
            throw ValidationError("negative-point prompt needs a point");
        }
        if (!box.contains(point->first, point->second)) {
            throw ValidationError("negative point must lie inside the box");
        }
    }
}

double sigmoid(double logit) { return 1.0 / (1.0 + std::exp(-logit)); }

std::string render_template(std::string text,
                            const std::vector<std::pair<std::string, std::string>>& values) {
    for (const auto& [key, value] : values) {
        std::string needle = "{" + key + "}";
        std::size_t pos = 0;
        while ((pos = text.find(needle, pos)) != std::string::npos) {
            text.replace(pos, needle.size(), value);
            pos += value.size();
        }
    }
    return text;
}

std::string guidelines_block(const std::vector<ScoredGuideline>& guidelines) {
    std::ostringstream out;
    for (const auto& g : guidelines) {
        out << g.guideline.id << ": " << g.guideline.text << "\n";
    }
    return out.str();
}

RolePrompts RolePrompts::builtin() {
    RolePrompts p;
    p.worker =
        "You detect and segment every instance of the target class.\n"
        "Target: {PROMPT}\n"
        "Apply these labeling guidelines:\n{GUIDELINES}\n"
        "Current subjects (empty on the first pass):\n{SUBJECTS}\n"
        "Reply with JSON: {\"instances\":[{\"id\":\"sub_<n>\",\"label\":...,"
        "\"box_2d\":[y_min,x_min,y_max,x_max]}]}.\n";
    p.supervisor_eval =
        "You audit a detection set against labeling guidelines.\n"
        "Guidelines:\n{GUIDELINES}\n"
        "Subjects under review:\n{SUBJECTS}\n"
        "Report missing objects (m_<n>), false positives (e_<n>) and box "
        "refinements (by sub_<n>). Every reason must cite a guideline id.\n"
        "Reply with JSON: {\"missing_objects\":[...],\"false_positives\":[...],"
        "\"refinements\":[...]}.\n";
    p.supervisor_boxgen =
        "You place 2D boxes for each issue in a critique.\n"
        "Subjects under review:\n{SUBJECTS}\n"
        "For every missing object and false positive in the critique, reply "
        "with JSON: {\"instances\":[{\"box_id\":...,\"label\":...,"
        "\"box_2d\":[y_min,x_min,y_max,x_max]}]}.\n";
    return p;
}

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

}  // namespace

RolePrompts RolePrompts::load_dir(const std::string& dir) {
    RolePrompts p;
    p.worker = read_file(dir + "/worker.txt");
    p.supervisor_eval = read_file(dir + "/supervisor_eval.txt");
    p.supervisor_boxgen = read_file(dir + "/supervisor_boxgen.txt");
    return p;
}

BackendResponse call_model(ModelBackend& backend, const BackendRequest& request,
                           CostLedger* ledger) {
    request.role.validate();
    auto attempt = [&]() {
        BackendResponse response = backend.complete(request);
        if (response.input_tokens < 0 || response.output_tokens < 0) {
            throw BackendError("negative token counts from backend");
        }
        if (ledger != nullptr) {
            ledger->append({request.role.role, response.input_tokens,
                            response.output_tokens, response.latency_ms});
        }
        return response;
    };
    try {
        return attempt();
    } catch (const BackendError&) {
        return attempt();  // one retry for transient faults
    }
}

namespace {

BackendRequest make_request(const RoleConfig& config, const std::string& system,
                            const ImageHandle& image, std::vector<Part> extra_parts) {
    BackendRequest request;
    request.role = config;
    request.role.system_template = system;
    request.parts.push_back(Part::make_image(image));
    for (auto& part : extra_parts) request.parts.push_back(std::move(part));
    return request;
}

}  // namespace

WorkerResult worker_detect(ModelBackend& backend, Segmenter* segmenter,
                           const ImageHandle& image, const std::string& prompt,
                           const std::vector<ScoredGuideline>& guidelines,
                           const RoleSet& roles, CostLedger* ledger) {
    std::string system = render_template(roles.prompts.worker,
                                         {{"PROMPT", prompt},
                                          {"GUIDELINES", guidelines_block(guidelines)},
                                          {"SUBJECTS", ""}});
    BackendRequest request =
        make_request(roles.worker, system, image, {Part::make_text(prompt)});
    BackendResponse response = call_model(backend, request, ledger);

    WorkerResult result;
    std::vector<SubjectInstance> instances;
    try {
        Parsed<std::vector<SubjectInstance>> parsed =
            parse_worker_output(response.text, image.width, image.height);
        instances = std::move(parsed.value);
        result.warnings = std::move(parsed.warnings);
    } catch (const ProtocolError& e) {
        result.warnings.push_back(std::string("worker output unparseable: ") + e.what());
        return result;
    }
    for (auto& subject : instances) {
        if (segmenter != nullptr) {
            try {
                subject.mask = segment(*segmenter, image,
                                       SegmenterPrompt{SegmenterPrompt::Mode::BoxPositive,
                                                       subject.box, std::nullopt});
            } catch (const std::exception& e) {
                result.warnings.push_back("segmentation failed for " + subject.id + ": " +
                                          e.what());
            }
        }
        try {
            result.registry.insert(std::move(subject));
        } catch (const ValidationError& e) {
            result.warnings.push_back(std::string("subject dropped: ") + e.what());
        }
    }
    return result;
}

Parsed<std::vector<SubjectInstance>> worker_refresh(
    ModelBackend& backend, const ImageHandle& image, const SubjectRegistry& registry,
    const std::vector<CandidateBox>& verified, const SupervisorReport& report,
    const std::string& prompt, const std::vector<ScoredGuideline>& guidelines,
    const RoleSet& roles, CostLedger* ledger) {
    std::string subjects_json = serialize_instances(registry.subjects());
    std::string system = render_template(roles.prompts.worker,
                                         {{"PROMPT", prompt},
                                          {"GUIDELINES", guidelines_block(guidelines)},
                                          {"SUBJECTS", subjects_json}});
    BackendRequest request = make_request(roles.worker, system, image,
                                          {Part::make_text(subjects_json),
                                           Part::make_text(serialize_candidates(verified)),
                                           Part::make_text(serialize_report(report))});
    BackendResponse response = call_model(backend, request, ledger);
    try {
        return parse_worker_output(response.text, image.width, image.height);
    } catch (const ProtocolError& e) {
        Parsed<std::vector<SubjectInstance>> out;
        out.warnings.push_back(std::string("worker refresh unparseable: ") + e.what());
        return out;
    }
}

Parsed<SupervisorReport> supervisor_evaluate(ModelBackend& backend,
                                             const ImageHandle& image,
                                             const SubjectRegistry& registry,
                                             const std::vector<ScoredGuideline>& guidelines,
                                             const RoleSet& roles, CostLedger* ledger) {
    std::string subjects_json = serialize_instances(registry.subjects());
    std::string system = render_template(roles.prompts.supervisor_eval,
                                         {{"GUIDELINES", guidelines_block(guidelines)},
                                          {"SUBJECTS", subjects_json}});
    BackendRequest request = make_request(roles.supervisor_eval, system, image,
                                          {Part::make_text(subjects_json)});
    BackendResponse response = call_model(backend, request, ledger);
    try {
        return parse_supervisor_eval(response.text);
    } catch (const ProtocolError& e) {
        Parsed<SupervisorReport> out;
        out.warnings.push_back(std::string("WARNING: critique unparseable, treating as "
                                           "clean report: ") +
                               e.what());
        return out;
    }
}

Parsed<std::vector<CandidateBox>> supervisor_boxgen(ModelBackend& backend,
                                                    const ImageHandle& image,
                                                    const SubjectRegistry& registry,
                                                    const SupervisorReport& report,
                                                    const RoleSet& roles,
                                                    CostLedger* ledger) {
    std::string subjects_json = serialize_instances(registry.subjects());
    std::string system = render_template(roles.prompts.supervisor_boxgen,
                                         {{"SUBJECTS", subjects_json}});
    BackendRequest request = make_request(roles.supervisor_boxgen, system, image,
                                          {Part::make_text(serialize_report(report)),
                                           Part::make_text(subjects_json)});
    BackendResponse response = call_model(backend, request, ledger);
    try {
        return parse_boxgen_output(response.text, report, image.width, image.height);
    } catch (const ProtocolError& e) {
        Parsed<std::vector<CandidateBox>> out;
        out.warnings.push_back(std::string("box proposals unparseable: ") + e.what());
        return out;
    }
}

BoundingBox buffered_crop(const BoundingBox& box, double buffer_frac, int width,
                          int height) {
    int dx = static_cast<int>(std::lround(buffer_frac * box.width()));
    int dy = static_cast<int>(std::lround(buffer_frac * box.height()));
    return dilate(box, dy, dx, width, height);
}

namespace {

// Crop handle for the verifier; composes with an existing crop window so the
// region stays in original-image coordinates.
ImageHandle crop_view(const ImageHandle& image, const BoundingBox& local_box) {
    if (!image.region) {
        return image.cropped(CropRegion{image.width, image.height, local_box});
    }
    return image.cropped(CropRegion{image.region->parent_width,
                                    image.region->parent_height,
                                    to_parent(*image.region, local_box)});
}

}  // namespace

Parsed<std::vector<CandidateBox>> verify_candidates(std::vector<CandidateBox> candidates,
                                                    const ImageHandle& image,
                                                    VerifierScorer& scorer,
                                                    double buffer_frac,
                                                    double threshold) {
    Parsed<std::vector<CandidateBox>> out;
    for (auto& candidate : candidates) {
        BoundingBox crop_box =
            buffered_crop(candidate.box, buffer_frac, image.width, image.height);
        double probability = 0.0;
        try {
            probability = sigmoid(scorer.score(crop_view(image, crop_box), candidate.label));
        } catch (const std::exception& e) {
            out.warnings.push_back("verifier failed on " + candidate.box_id + ": " +
                                   e.what() + ", candidate rejected");
            continue;
        }
        candidate.score = probability;
        if (probability >= threshold) {
            candidate.verified = true;
            out.value.push_back(std::move(candidate));
        }
    }
    return out;
}

BinaryMask segment(Segmenter& segmenter, const ImageHandle& image,
                   const SegmenterPrompt& prompt) {
    prompt.validate();
    return segmenter.segment(image, prompt);
}

}  // namespace segref
