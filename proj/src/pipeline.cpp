#include "segref/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <utility>

#include <json.hpp>

namespace segref {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

enum StreamTag : std::uint64_t {
    kControllerStream = 0x4354,
    kBackendStream = 0x5242,
    kVerifierStream = 0x5256,
};

}  // namespace

void RunConfig::validate() const {
    if (prompt.empty()) throw ValidationError("run config needs a prompt");
    if (top_k < 1) throw ValidationError("top_k must be at least 1");
    if (downscale <= 0.0 || downscale > 1.0) {
        throw ValidationError("downscale must lie in (0,1]");
    }
    if (crop_margin < 0) throw ValidationError("crop_margin must be nonnegative");
    for (double t : {worker_temperature, eval_temperature, boxgen_temperature}) {
        if (t < 0.0 || t > 2.0) {
            throw ValidationError("role temperatures must lie in [0,2]");
        }
    }
    if (verifier_buffer < 0.0) {
        throw ValidationError("verifier_buffer must be nonnegative");
    }
    if (verifier_threshold < 0.0 || verifier_threshold > 1.0) {
        throw ValidationError("verifier_threshold must lie in [0,1]");
    }
    if (!bounds.valid()) {
        throw ValidationError("iteration bounds require 1 <= min <= max");
    }
    if (airc_mode != "train" && airc_mode != "greedy") {
        throw ValidationError("airc_mode must be \"train\" or \"greedy\"");
    }
    if (backend != "remote" && backend != "simulated") {
        throw ValidationError("backend must be \"remote\" or \"simulated\"");
    }
    if (backend == "remote" && remote.base_url.empty()) {
        throw ValidationError("remote backend needs a base_url");
    }
    sim_error_model.validate();
}

std::string RunConfig::to_json() const {
    ordered_json doc;
    doc["prompt"] = prompt;
    doc["corpus_path"] = corpus_path;
    doc["top_k"] = top_k;
    doc["downscale"] = downscale;
    doc["crop_margin"] = crop_margin;
    ordered_json temps;
    temps["worker"] = worker_temperature;
    temps["supervisor_eval"] = eval_temperature;
    temps["supervisor_boxgen"] = boxgen_temperature;
    doc["temperatures"] = std::move(temps);
    ordered_json verifier;
    verifier["buffer"] = verifier_buffer;
    verifier["threshold"] = verifier_threshold;
    doc["verifier"] = std::move(verifier);
    ordered_json b;
    b["min_iters"] = bounds.min_iters;
    b["max_iters"] = bounds.max_iters;
    doc["bounds"] = std::move(b);
    doc["airc_mode"] = airc_mode;
    doc["backend"] = backend;
    ordered_json rem;
    rem["base_url"] = remote.base_url;
    rem["path"] = remote.path;
    rem["credential_env"] = remote.credential_env;
    rem["timeout_ms"] = remote.timeout_ms;
    doc["remote"] = std::move(rem);
    ordered_json prices_doc;
    prices_doc["usd_per_m_input"] = prices.usd_per_m_input;
    prices_doc["usd_per_m_output"] = prices.usd_per_m_output;
    doc["prices"] = std::move(prices_doc);
    doc["seed"] = seed;
    doc["prompts_dir"] = prompts_dir;
    doc["sim_error_model"] = json::parse(sim_error_model.to_json());
    return doc.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
    json doc = json::parse(text, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) {
        throw FormatError("run config is not valid JSON");
    }
    RunConfig config;
    config.prompt = doc.value("prompt", config.prompt);
    config.corpus_path = doc.value("corpus_path", config.corpus_path);
    config.top_k = doc.value("top_k", config.top_k);
    config.downscale = doc.value("downscale", config.downscale);
    config.crop_margin = doc.value("crop_margin", config.crop_margin);
    if (doc.contains("temperatures")) {
        const json& t = doc["temperatures"];
        config.worker_temperature = t.value("worker", config.worker_temperature);
        config.eval_temperature = t.value("supervisor_eval", config.eval_temperature);
        config.boxgen_temperature =
            t.value("supervisor_boxgen", config.boxgen_temperature);
    }
    if (doc.contains("verifier")) {
        const json& v = doc["verifier"];
        config.verifier_buffer = v.value("buffer", config.verifier_buffer);
        config.verifier_threshold = v.value("threshold", config.verifier_threshold);
    }
    if (doc.contains("bounds")) {
        const json& b = doc["bounds"];
        config.bounds.min_iters = b.value("min_iters", config.bounds.min_iters);
        config.bounds.max_iters = b.value("max_iters", config.bounds.max_iters);
    }
    config.airc_mode = doc.value("airc_mode", config.airc_mode);
    config.backend = doc.value("backend", config.backend);
    if (doc.contains("remote")) {
        const json& r = doc["remote"];
        config.remote.base_url = r.value("base_url", config.remote.base_url);
        config.remote.path = r.value("path", config.remote.path);
        config.remote.credential_env =
            r.value("credential_env", config.remote.credential_env);
        config.remote.timeout_ms = r.value("timeout_ms", config.remote.timeout_ms);
    }
    if (doc.contains("prices")) {
        const json& p = doc["prices"];
        config.prices.usd_per_m_input =
            p.value("usd_per_m_input", config.prices.usd_per_m_input);
        config.prices.usd_per_m_output =
            p.value("usd_per_m_output", config.prices.usd_per_m_output);
    }
    config.seed = doc.value("seed", config.seed);
    config.prompts_dir = doc.value("prompts_dir", config.prompts_dir);
    if (doc.contains("sim_error_model")) {
        config.sim_error_model = ErrorModel::from_json(doc["sim_error_model"].dump());
    }
    config.validate();
    return config;
}

void write_file_atomic(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp + " for writing");
        out << content;
        if (!out) throw IoError("short write to " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw IoError("cannot rename " + tmp + " to " + path);
    }
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

namespace {

std::string segmenter_prompt_json(const SegmenterPrompt& prompt) {
    ordered_json doc;
    doc["mode"] = prompt.mode == SegmenterPrompt::Mode::BoxPositive
                      ? "box_positive"
                      : "box_negative_point";
    doc["box_2d"] = ordered_json::array(
        {prompt.box.y_min, prompt.box.x_min, prompt.box.y_max, prompt.box.x_max});
    if (prompt.point) {
        doc["point"] = ordered_json::array({prompt.point->first, prompt.point->second});
    }
    return doc.dump();
}

}  // namespace

BinaryMask RemoteSegmenter::segment(const ImageHandle& image,
                                    const SegmenterPrompt& prompt) {
    prompt.validate();
    BackendRequest request;
    request.role = RoleConfig{"segmenter", "", 0.0, false, false};
    request.parts.push_back(Part::make_image(image));
    request.parts.push_back(Part::make_text(segmenter_prompt_json(prompt)));
    BackendResponse response = http_.complete(request);
    try {
        return BinaryMask::from_rle_json(response.text);
    } catch (const Error& e) {
        throw BackendError(std::string("segmenter returned an unusable mask: ") +
                           e.what());
    }
}

double RemoteVerifier::score(const ImageHandle& crop, const std::string& label) {
    BackendRequest request;
    request.role = RoleConfig{"verifier", "", 0.0, false, false};
    request.parts.push_back(Part::make_image(crop));
    ordered_json query;
    query["label"] = label;
    request.parts.push_back(Part::make_text(query.dump()));
    BackendResponse response = http_.complete(request);
    try {
        return std::stod(response.text);
    } catch (const std::exception&) {
        throw BackendError("verifier returned a non-numeric score: " + response.text);
    }
}

RuntimeStack::RuntimeStack(const RunConfig& config, const GuidelineIndex* index,
                           const Embedder* embedder) {
    config.validate();
    if (config.backend == "remote") {
        http_ = std::make_unique<HttpBackend>(config.remote);
        remote_segmenter_ = std::make_unique<RemoteSegmenter>(*http_);
        remote_verifier_ = std::make_unique<RemoteVerifier>(*http_);
        env_.backend = http_.get();
        env_.segmenter = remote_segmenter_.get();
        env_.verifier = remote_verifier_.get();
    } else {
        sim_backend_ = std::make_unique<SimBackend>(
            config.sim_error_model, derive_seed(config.seed, {kBackendStream}));
        sim_segmenter_ = std::make_unique<SimSegmenter>();
        sim_verifier_ = std::make_unique<SimVerifierScorer>(
            config.sim_error_model, derive_seed(config.seed, {kVerifierStream}));
        sim_captioner_ = std::make_unique<SimCaptioner>();
        sim_detector_ = std::make_unique<SimCoarseDetector>();
        env_.backend = sim_backend_.get();
        env_.segmenter = sim_segmenter_.get();
        env_.verifier = sim_verifier_.get();
        env_.captioner = sim_captioner_.get();
        env_.detector = sim_detector_.get();
    }
    env_.index = index;
    env_.embedder = embedder;
}

namespace {

json report_to_json_value(const SupervisorReport& report) {
    return json::parse(serialize_report(report));
}

json candidates_to_json_value(const std::vector<CandidateBox>& candidates) {
    json doc = json::parse(serialize_candidates(candidates));
    json& list = doc["instances"];
    // serialize_candidates carries only the wire fields; attach the
    // verification outcome for the trace.
    for (std::size_t i = 0; i < candidates.size() && i < list.size(); ++i) {
        json& row = list[static_cast<int>(i)];
        row["verified"] = candidates[i].verified;
        if (candidates[i].score) {
            row["score"] = *candidates[i].score;
        } else {
            row["score"] = nullptr;
        }
    }
    return doc;
}

// Runs the refinement loop on one crop; fills the trace and returns the final
// registry in crop-local coordinates.
SubjectRegistry run_crop(const ImageHandle& crop, const RunConfig& config,
                         const std::vector<ScoredGuideline>& guidelines,
                         const RoleSet& roles, Controller& controller,
                         const PipelineEnv& env, CostLedger& ledger,
                         CropTrace& trace) {
    MaskFn mask_fn = [&](const BoundingBox& box) -> std::optional<BinaryMask> {
        try {
            return segment(*env.segmenter, crop,
                           SegmenterPrompt{SegmenterPrompt::Mode::BoxPositive, box,
                                           std::nullopt});
        } catch (const std::exception&) {
            return std::nullopt;
        }
    };
    EraseFn erase_fn = [&](const BoundingBox& box) {
        std::pair<int, int> center{(box.y_min + box.y_max) / 2,
                                   (box.x_min + box.x_max) / 2};
        try {
            segment(*env.segmenter, crop,
                    SegmenterPrompt{SegmenterPrompt::Mode::BoxWithNegativePoint, box,
                                    center});
        } catch (const std::exception&) {
            // the registry removal already happened; the erase is advisory
        }
    };

    WorkerResult detect = worker_detect(*env.backend, env.segmenter, crop,
                                        config.prompt, guidelines, roles, &ledger);
    SubjectRegistry registry = std::move(detect.registry);
    int initial_count = static_cast<int>(registry.size());
    std::vector<std::string> carried_warnings = std::move(detect.warnings);

    std::vector<CandidateBox> pending;
    SupervisorReport pending_report;
    double prev_issue = 0.0;
    int prev_state = 0;
    bool training = controller.training();

    for (int t = 1; t <= config.bounds.max_iters; ++t) {
        std::vector<std::string> warnings = std::move(carried_warnings);
        carried_warnings.clear();
        bool skipped = false;
        if (t > 1) {
            bool have_work = !pending.empty() || !pending_report.refinements.empty();
            if (have_work) {
                auto refreshed =
                    worker_refresh(*env.backend, crop, registry, pending,
                                   pending_report, config.prompt, guidelines, roles,
                                   &ledger);
                warnings.insert(warnings.end(), refreshed.warnings.begin(),
                                refreshed.warnings.end());
                ChangeSummary applied =
                    apply_actions(registry, pending, pending_report, mask_fn, erase_fn);
                warnings.insert(warnings.end(), applied.warnings.begin(),
                                applied.warnings.end());
            } else {
                skipped = true;
            }
        }

        auto eval =
            supervisor_evaluate(*env.backend, crop, registry, guidelines, roles, &ledger);
        warnings.insert(warnings.end(), eval.warnings.begin(), eval.warnings.end());
        IssueCounts counts{static_cast<int>(eval.value.missing_objects.size()),
                           static_cast<int>(eval.value.false_positives.size()),
                           static_cast<int>(eval.value.refinements.size())};
        double issue = issue_score(counts);
        int s = encode_state(initial_count, counts).encoded();

        if (t > 1) {
            double r = reward(prev_issue, issue, Action::Continue, false);
            if (training) {
                controller.update(prev_state, Action::Continue, r, s,
                                  t >= config.bounds.max_iters);
            }
            trace.iterations.back().reward = r;
        }

        pending_report = std::move(eval.value);
        pending.clear();
        bool boxgen_skipped = true;
        if (pending_report.has_candidate_work()) {
            boxgen_skipped = false;
            auto proposals = supervisor_boxgen(*env.backend, crop, registry,
                                               pending_report, roles, &ledger);
            warnings.insert(warnings.end(), proposals.warnings.begin(),
                            proposals.warnings.end());
            auto verified =
                verify_candidates(std::move(proposals.value), crop, *env.verifier,
                                  config.verifier_buffer, config.verifier_threshold);
            warnings.insert(warnings.end(), verified.warnings.begin(),
                            verified.warnings.end());
            pending = std::move(verified.value);
        }

        Action action = controller.decide(s, t, config.bounds);
        bool forced = t < config.bounds.min_iters || t >= config.bounds.max_iters;

        CropIteration record;
        record.iteration = t;
        record.registry_json = serialize_instances(registry.subjects());
        record.report = pending_report;
        record.candidates = pending;
        record.counts = counts;
        record.issue_score = issue;
        record.state = s;
        record.action = action;
        record.forced = forced;
        record.worker_call_skipped = skipped;
        record.boxgen_skipped = boxgen_skipped;
        record.warnings = std::move(warnings);
        trace.iterations.push_back(std::move(record));

        if (action == Action::Stop) {
            bool at_max = t >= config.bounds.max_iters;
            double r = reward(issue, issue, Action::Stop, at_max);
            trace.iterations.back().reward = r;
            // A stop forced by the cap is not a decision worth learning from.
            if (training && !at_max) controller.update(s, Action::Stop, r, s, true);
            break;
        }
        prev_issue = issue;
        prev_state = s;
    }

    trace.final_registry_json = serialize_instances(registry.subjects());
    return registry;
}

BoundingBox union_box(const BoundingBox& a, const BoundingBox& b) {
    return BoundingBox{std::min(a.y_min, b.y_min), std::min(a.x_min, b.x_min),
                       std::max(a.y_max, b.y_max), std::max(a.x_max, b.x_max)};
}

}  // namespace

RunResult run_image(const ImageHandle& image, const RunConfig& config,
                    const QTable& table, const PipelineEnv& env) {
    config.validate();
    if (env.backend == nullptr || env.segmenter == nullptr || env.verifier == nullptr ||
        env.index == nullptr || env.embedder == nullptr) {
        throw ValidationError(
            "pipeline env needs backend, segmenter, verifier, index and embedder");
    }

    RoleSet roles;
    roles.worker.temperature = config.worker_temperature;
    roles.supervisor_eval.temperature = config.eval_temperature;
    roles.supervisor_boxgen.temperature = config.boxgen_temperature;
    if (!config.prompts_dir.empty()) {
        roles.prompts = RolePrompts::load_dir(config.prompts_dir);
    }

    ContextOptions context_options{config.top_k, config.downscale, config.crop_margin};
    SceneContext context =
        construct_context(image, config.prompt, *env.index, *env.embedder,
                          env.captioner, env.detector, context_options);

    Controller controller(table, config.airc_mode == "train",
                          derive_seed(config.seed, {kControllerStream}));
    CostLedger ledger(config.prices);

    RunResult result;
    result.mask = BinaryMask(image.width, image.height);
    result.trace.image_ref = image.ref;
    result.trace.query = context.query;
    for (const auto& g : context.guidelines) {
        result.trace.guideline_ids.push_back(g.guideline.id);
    }
    result.trace.warnings = context.warnings;

    struct ParentSubject {
        std::string label;
        BoundingBox box;
        BinaryMask mask;
    };
    std::vector<ParentSubject> merged;

    for (const CropRegion& region : context.plan.crops) {
        CropTrace crop_trace;
        crop_trace.region = region;
        ImageHandle crop = image.cropped(region);
        try {
            SubjectRegistry registry = run_crop(crop, config, context.guidelines, roles,
                                                controller, env, ledger, crop_trace);
            for (const SubjectInstance& subject : registry.subjects()) {
                ParentSubject entry;
                entry.label = subject.label;
                entry.box = to_parent(region, subject.box);
                entry.mask = BinaryMask(image.width, image.height);
                if (subject.mask && subject.mask->any()) {
                    entry.mask.blit_union(*subject.mask, region.box.y_min,
                                          region.box.x_min);
                } else {
                    // No usable mask: fall back to the box footprint rather
                    // than silently dropping the subject from the class mask.
                    entry.mask = rasterize(clip(entry.box, image.width, image.height),
                                           image.width, image.height);
                }
                bool absorbed = false;
                for (ParentSubject& existing : merged) {
                    if (existing.label == subject.label &&
                        box_iou(existing.box, entry.box) >= 0.5) {
                        existing.mask = existing.mask.unite(entry.mask);
                        existing.box = union_box(existing.box, entry.box);
                        absorbed = true;
                        break;
                    }
                }
                if (!absorbed) merged.push_back(std::move(entry));
            }
        } catch (const Error& e) {
            crop_trace.error = e.what();
        }
        result.trace.crops.push_back(std::move(crop_trace));
    }

    for (const ParentSubject& entry : merged) {
        result.mask = result.mask.unite(entry.mask);
        result.registry.add(entry.label, entry.box, entry.mask);
    }
    result.trace.cost = ledger_summary(ledger);
    result.table = controller.snapshot();
    return result;
}

std::string RunTrace::to_jsonl() const {
    std::ostringstream out;
    for (std::size_t c = 0; c < crops.size(); ++c) {
        const CropTrace& crop = crops[c];
        for (const CropIteration& it : crop.iterations) {
            ordered_json line;
            line["kind"] = "iteration";
            line["crop"] = c;
            line["iteration"] = it.iteration;
            line["registry"] = json::parse(it.registry_json);
            line["report"] = report_to_json_value(it.report);
            line["candidates"] = candidates_to_json_value(it.candidates);
            line["misses"] = it.counts.misses;
            line["falses"] = it.counts.falses;
            line["refinements"] = it.counts.refinements;
            line["issue_score"] = it.issue_score;
            line["state"] = it.state;
            line["action"] = action_name(it.action);
            line["forced"] = it.forced;
            line["reward"] = it.reward;
            line["worker_call_skipped"] = it.worker_call_skipped;
            line["boxgen_skipped"] = it.boxgen_skipped;
            line["warnings"] = it.warnings;
            out << line.dump() << '\n';
        }
        ordered_json summary;
        summary["kind"] = "crop_summary";
        summary["crop"] = c;
        summary["region"] = ordered_json::array({crop.region.box.y_min,
                                                 crop.region.box.x_min,
                                                 crop.region.box.y_max,
                                                 crop.region.box.x_max});
        summary["iterations"] = crop.iterations.size();
        summary["final_registry"] = crop.final_registry_json.empty()
                                        ? json()
                                        : json::parse(crop.final_registry_json);
        if (crop.error.empty()) {
            summary["error"] = nullptr;
        } else {
            summary["error"] = crop.error;
        }
        out << summary.dump() << '\n';
    }
    ordered_json run_line;
    run_line["kind"] = "run_summary";
    run_line["image"] = image_ref;
    run_line["query"] = query;
    run_line["guidelines"] = guideline_ids;
    run_line["crops"] = crops.size();
    run_line["warnings"] = warnings;
    json cost_doc = json::parse(cost.to_json());
    for (auto& [key, value] : cost_doc.items()) run_line[key] = value;
    out << run_line.dump() << '\n';
    return out.str();
}

}  // namespace segref
