#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "segref/protocol.hpp"
#include "segref/rng.hpp"

using namespace segref;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

MaskFn box_mask_fn(int width, int height) {
    return [width, height](const BoundingBox& box) -> std::optional<BinaryMask> {
        return rasterize(clip(box, width, height), width, height);
    };
}

SupervisorReport report_with_missing(const std::string& id) {
    SupervisorReport report;
    report.missing_objects.push_back({id, "umbrella", "not boxed, include per G4"});
    return report;
}

}  // namespace

TEST_CASE("subject ids and the registry counter") {
    CHECK(subject_number("sub_0") == 0);
    CHECK(subject_number("sub_12") == 12);
    CHECK_THROWS_AS(subject_number("sub_"), ValidationError);
    CHECK_THROWS_AS(subject_number("sub_x"), ValidationError);
    CHECK_THROWS_AS(subject_number("m_1"), ValidationError);

    SubjectRegistry registry;
    CHECK(registry.add("pedestrian", {0, 0, 10, 10}, std::nullopt) == "sub_0");
    CHECK(registry.add("pedestrian", {0, 0, 10, 10}, std::nullopt) == "sub_1");
    registry.insert({"sub_7", "pedestrian", {0, 0, 5, 5}, std::nullopt});
    CHECK(registry.next_id() == 8);
    CHECK(registry.add("pedestrian", {0, 0, 10, 10}, std::nullopt) == "sub_8");
    CHECK(registry.size() == 4);

    CHECK_THROWS_AS(registry.insert({"sub_1", "dup", {0, 0, 1, 1}, std::nullopt}),
                    ValidationError);
    CHECK(registry.remove("sub_1"));
    CHECK_FALSE(registry.remove("sub_1"));
    CHECK(registry.find("sub_1") == nullptr);
    REQUIRE(registry.find("sub_7") != nullptr);
    CHECK(registry.find("sub_7")->label == "pedestrian");
    // Removal never frees an id for reuse.
    CHECK(registry.add("pedestrian", {0, 0, 10, 10}, std::nullopt) == "sub_9");
}

TEST_CASE("worker output golden file") {
    Parsed<std::vector<SubjectInstance>> parsed =
        parse_worker_output(slurp("tests/golden/worker_output.json"), 640, 480);
    CHECK(parsed.warnings.empty());
    REQUIRE(parsed.value.size() == 1);
    CHECK(parsed.value[0].id == "sub_0");
    CHECK(parsed.value[0].label == "pedestrian");
    CHECK(parsed.value[0].box == BoundingBox{100, 100, 200, 200});
}

TEST_CASE("worker parsing tolerates prose and code fences") {
    std::string wrapped =
        "Here are the detections you asked for:\n```json\n"
        "{\"instances\":[{\"id\":\"sub_3\",\"label\":\"car\",\"box_2d\":[1,2,30,40]}]}\n"
        "```\nLet me know if anything is off.";
    Parsed<std::vector<SubjectInstance>> parsed = parse_worker_output(wrapped, 100, 100);
    REQUIRE(parsed.value.size() == 1);
    CHECK(parsed.value[0].id == "sub_3");
    CHECK(parsed.value[0].box == BoundingBox{1, 2, 30, 40});

    CHECK(parse_worker_output("{\"instances\":[]}", 100, 100).value.empty());
}

TEST_CASE("worker parsing clips and drops bad instances") {
    std::string text =
        "{\"instances\":["
        "{\"id\":\"sub_0\",\"label\":\"a\",\"box_2d\":[-10,-10,50,50]},"
        "{\"id\":\"sub_1\",\"label\":\"b\",\"box_2d\":[500,500,600,600]},"
        "{\"id\":\"bad-id\",\"label\":\"c\",\"box_2d\":[0,0,10,10]},"
        "{\"id\":\"sub_2\",\"label\":\"d\",\"box_2d\":[0,0,10]},"
        "{\"label\":\"e\",\"box_2d\":[0,0,10,10]}"
        "]}";
    Parsed<std::vector<SubjectInstance>> parsed = parse_worker_output(text, 100, 100);
    REQUIRE(parsed.value.size() == 1);
    CHECK(parsed.value[0].box == BoundingBox{0, 0, 50, 50});
    CHECK(parsed.warnings.size() == 4);

    CHECK_THROWS_AS(parse_worker_output("no json here", 100, 100), ProtocolError);
    CHECK_THROWS_AS(parse_worker_output("{\"items\":[]}", 100, 100), ProtocolError);
    try {
        parse_worker_output("total garbage", 100, 100);
        FAIL("expected a protocol error");
    } catch (const ProtocolError& e) {
        CHECK(e.raw_text() == "total garbage");
    }
}

TEST_CASE("supervisor critique golden file") {
    Parsed<SupervisorReport> parsed =
        parse_supervisor_eval(slurp("tests/golden/supervisor_eval.json"));
    CHECK(parsed.warnings.empty());
    REQUIRE(parsed.value.missing_objects.size() == 1);
    CHECK(parsed.value.missing_objects[0].id == "m_1");
    CHECK(parsed.value.missing_objects[0].label == "umbrella");
    CHECK(parsed.value.false_positives.empty());
    CHECK(parsed.value.refinements.empty());
    CHECK_FALSE(parsed.value.clean());
    CHECK(parsed.value.has_candidate_work());
}

TEST_CASE("supervisor critique field validation") {
    std::string empty = R"({"missing_objects":[],"false_positives":[],"refinements":[]})";
    Parsed<SupervisorReport> clean = parse_supervisor_eval(empty);
    CHECK(clean.value.clean());
    CHECK_FALSE(clean.value.has_candidate_work());

    // All three list fields are mandatory.
    CHECK_THROWS_AS(parse_supervisor_eval(R"({"missing_objects":[]})"), ProtocolError);
    CHECK_THROWS_AS(
        parse_supervisor_eval(
            R"({"missing_objects":[],"false_positives":{},"refinements":[]})"),
        ProtocolError);

    // Malformed ids and boxes are hard failures.
    CHECK_THROWS_AS(parse_supervisor_eval(
                        R"({"missing_objects":[{"missing_object_id":"x_1","label":"a",)"
                        R"("reason":"per G1"}],"false_positives":[],"refinements":[]})"),
                    ProtocolError);
    CHECK_THROWS_AS(parse_supervisor_eval(
                        R"({"missing_objects":[],"false_positives":[{"id":"e_0",)"
                        R"("subject_ref":"nope","reason":"per G1"}],"refinements":[]})"),
                    ProtocolError);
    CHECK_THROWS_AS(parse_supervisor_eval(
                        R"({"missing_objects":[],"false_positives":[],"refinements":)"
                        R"([{"box_id":"sub_1","instruction":"x","replacement_box":[1,2]}]})"),
                    ProtocolError);
    CHECK_THROWS_AS(parse_supervisor_eval(
                        R"({"missing_objects":[{"missing_object_id":"m_0","label":"a",)"
                        R"("reason":""}],"false_positives":[],"refinements":[]})"),
                    ProtocolError);
    // Duplicate issue ids are rejected.
    CHECK_THROWS_AS(
        parse_supervisor_eval(
            R"({"missing_objects":[{"missing_object_id":"m_0","reason":"per G1"},)"
            R"({"missing_object_id":"m_0","reason":"per G2"}],)"
            R"("false_positives":[],"refinements":[]})"),
        ProtocolError);

    // A reason that cites no guideline id warns but still parses.
    Parsed<SupervisorReport> uncited = parse_supervisor_eval(
        R"({"missing_objects":[{"missing_object_id":"m_0","label":"a",)"
        R"("reason":"left side looks empty"}],"false_positives":[],"refinements":[]})");
    CHECK(uncited.value.missing_objects.size() == 1);
    REQUIRE(uncited.warnings.size() == 1);

    // Refinements with a replacement box parse fully.
    Parsed<SupervisorReport> refined = parse_supervisor_eval(
        R"({"missing_objects":[],"false_positives":[],"refinements":)"
        R"([{"box_id":"sub_2","instruction":"tighten per G3",)"
        R"("replacement_box":[10,10,20,20]}]})");
    REQUIRE(refined.value.refinements.size() == 1);
    CHECK(refined.value.refinements[0].replacement_box == BoundingBox{10, 10, 20, 20});
}

TEST_CASE("box proposal golden file") {
    SupervisorReport report = report_with_missing("m_1");
    Parsed<std::vector<CandidateBox>> parsed =
        parse_boxgen_output(slurp("tests/golden/boxgen_output.json"), report, 1000, 1000);
    CHECK(parsed.warnings.empty());
    REQUIRE(parsed.value.size() == 1);
    CHECK(parsed.value[0].box_id == "m_1");
    CHECK(parsed.value[0].label == "umbrella");
    CHECK(parsed.value[0].box == BoundingBox{123, 456, 789, 987});
    CHECK_FALSE(parsed.value[0].verified);
    CHECK_FALSE(parsed.value[0].score.has_value());
}

TEST_CASE("box proposals are cross-checked against the report") {
    SupervisorReport report = report_with_missing("m_1");
    report.false_positives.push_back({"e_0", "shadow", std::nullopt, "exclude per G2"});

    std::string text =
        "{\"instances\":["
        "{\"box_id\":\"m_1\",\"label\":\"umbrella\",\"box_2d\":[0,0,10,10]},"
        "{\"box_id\":\"m_9\",\"label\":\"ghost\",\"box_2d\":[0,0,10,10]},"
        "{\"box_id\":\"e_0\",\"label\":\"shadow\",\"box_2d\":[20,20,30,30]},"
        "{\"box_id\":\"sub_1\",\"label\":\"wrong\",\"box_2d\":[0,0,10,10]},"
        "{\"box_id\":\"m_1\",\"box_2d\":[0,0,0,0]}"
        "]}";
    Parsed<std::vector<CandidateBox>> parsed = parse_boxgen_output(text, report, 100, 100);
    REQUIRE(parsed.value.size() == 2);
    CHECK(parsed.value[0].box_id == "m_1");
    CHECK(parsed.value[1].box_id == "e_0");
    // m_9 unknown, sub_1 wrong prefix, degenerate box: all dropped with warnings.
    CHECK(parsed.warnings.size() == 3);

    CHECK_THROWS_AS(parse_boxgen_output("nothing", report, 100, 100), ProtocolError);
}

TEST_CASE("serialization round-trips through the parsers") {
    std::vector<SubjectInstance> instances;
    instances.push_back({"sub_0", "pedestrian", {5, 6, 50, 60}, std::nullopt});
    instances.push_back({"sub_3", "cyclist", {10, 20, 30, 40}, std::nullopt});
    Parsed<std::vector<SubjectInstance>> reparsed =
        parse_worker_output(serialize_instances(instances), 100, 100);
    REQUIRE(reparsed.value.size() == 2);
    for (std::size_t i = 0; i < instances.size(); ++i) {
        CHECK(reparsed.value[i].id == instances[i].id);
        CHECK(reparsed.value[i].label == instances[i].label);
        CHECK(reparsed.value[i].box == instances[i].box);
    }

    SupervisorReport report;
    report.missing_objects.push_back({"m_0", "umbrella", "include per G4"});
    report.false_positives.push_back({"e_0", "shadow", "sub_1", "exclude per G2"});
    report.refinements.push_back({"sub_0", "tighten per G3", BoundingBox{1, 2, 3, 4}});
    Parsed<SupervisorReport> report2 = parse_supervisor_eval(serialize_report(report));
    CHECK(report2.warnings.empty());
    REQUIRE(report2.value.missing_objects.size() == 1);
    CHECK(report2.value.missing_objects[0].id == "m_0");
    CHECK(report2.value.missing_objects[0].reason == "include per G4");
    REQUIRE(report2.value.false_positives.size() == 1);
    CHECK(report2.value.false_positives[0].subject_ref == "sub_1");
    REQUIRE(report2.value.refinements.size() == 1);
    CHECK(report2.value.refinements[0].replacement_box == BoundingBox{1, 2, 3, 4});

    std::vector<CandidateBox> candidates;
    candidates.push_back({"m_0", "umbrella", {7, 8, 70, 80}, false, std::nullopt});
    Parsed<std::vector<CandidateBox>> candidates2 =
        parse_boxgen_output(serialize_candidates(candidates), report, 100, 100);
    REQUIRE(candidates2.value.size() == 1);
    CHECK(candidates2.value[0].box_id == "m_0");
    CHECK(candidates2.value[0].box == BoundingBox{7, 8, 70, 80});
}

TEST_CASE("apply_actions adds verified missing objects") {
    SubjectRegistry registry;
    registry.add("pedestrian", {0, 0, 20, 20}, std::nullopt);

    SupervisorReport report = report_with_missing("m_1");
    std::vector<CandidateBox> candidates;
    candidates.push_back({"m_1", "umbrella", {40, 40, 60, 60}, true, 0.9});

    ChangeSummary summary = apply_actions(registry, candidates, report,
                                          box_mask_fn(100, 100));
    CHECK(summary.added == 1);
    CHECK(summary.removed == 0);
    CHECK(summary.refined == 0);
    REQUIRE(registry.size() == 2);
    const SubjectInstance* added = registry.find("sub_1");
    REQUIRE(added != nullptr);
    CHECK(added->label == "umbrella");
    CHECK(added->box == BoundingBox{40, 40, 60, 60});
    REQUIRE(added->mask.has_value());
    CHECK(added->mask->popcount() == 400);
}

TEST_CASE("apply_actions ignores unverified candidates") {
    SubjectRegistry registry;
    SupervisorReport report = report_with_missing("m_0");
    std::vector<CandidateBox> candidates;
    candidates.push_back({"m_0", "umbrella", {0, 0, 10, 10}, false, 0.3});
    ChangeSummary summary = apply_actions(registry, candidates, report,
                                          box_mask_fn(100, 100));
    CHECK(summary.added == 0);
    CHECK(registry.size() == 0);
    CHECK(summary.warnings.size() == 1);
}

TEST_CASE("apply_actions removes false positives by overlap") {
    SubjectRegistry registry;
    registry.add("pedestrian", {0, 0, 20, 20}, std::nullopt);   // sub_0
    registry.add("pedestrian", {50, 50, 70, 70}, std::nullopt); // sub_1
    registry.add("pedestrian", {0, 50, 20, 70}, std::nullopt);  // sub_2

    SupervisorReport report;
    report.false_positives.push_back(
        {"e_1", "pedestrian", std::nullopt, "reflection, exclude per G7"});
    std::vector<CandidateBox> candidates;
    // Overlaps sub_2 at IoU 0.9; the other subjects do not overlap at all.
    candidates.push_back({"e_1", "pedestrian", {0, 50, 20, 68}, true, 0.9});

    int erase_calls = 0;
    EraseFn erase_fn = [&](const BoundingBox& box) {
        ++erase_calls;
        CHECK(box == BoundingBox{0, 50, 20, 70});
    };
    ChangeSummary summary =
        apply_actions(registry, candidates, report, box_mask_fn(100, 100), erase_fn);
    CHECK(summary.removed == 1);
    CHECK(erase_calls == 1);
    CHECK(registry.find("sub_2") == nullptr);
    CHECK(registry.size() == 2);
}

TEST_CASE("apply_actions prefers an explicit subject_ref for removals") {
    SubjectRegistry registry;
    registry.add("pedestrian", {0, 0, 20, 20}, std::nullopt);   // sub_0
    registry.add("pedestrian", {0, 2, 20, 22}, std::nullopt);   // sub_1, heavy overlap

    SupervisorReport report;
    report.false_positives.push_back(
        {"e_0", "pedestrian", std::string("sub_0"), "exclude per G7"});
    std::vector<CandidateBox> candidates;
    candidates.push_back({"e_0", "pedestrian", {0, 2, 20, 22}, true, 0.9});

    apply_actions(registry, candidates, report, box_mask_fn(100, 100));
    CHECK(registry.find("sub_0") == nullptr);
    CHECK(registry.find("sub_1") != nullptr);
}

TEST_CASE("apply_actions skips removals that match nothing") {
    SubjectRegistry registry;
    registry.add("pedestrian", {0, 0, 10, 10}, std::nullopt);
    SupervisorReport report;
    report.false_positives.push_back({"e_0", "pedestrian", std::nullopt, "per G7"});
    std::vector<CandidateBox> candidates;
    candidates.push_back({"e_0", "pedestrian", {80, 80, 90, 90}, true, 0.9});
    ChangeSummary summary = apply_actions(registry, candidates, report,
                                          box_mask_fn(100, 100));
    CHECK(summary.removed == 0);
    CHECK(registry.size() == 1);
    CHECK(summary.warnings.size() == 1);
}

TEST_CASE("apply_actions applies replacement-box refinements") {
    SubjectRegistry registry;
    registry.add("pedestrian", {0, 0, 20, 20}, rasterize({0, 0, 20, 20}, 100, 100));
    registry.add("pedestrian", {50, 50, 60, 60}, std::nullopt);

    SupervisorReport report;
    report.refinements.push_back({"sub_0", "tighten per G3", BoundingBox{2, 2, 18, 18}});

    std::vector<SubjectInstance> before = registry.subjects();
    ChangeSummary summary = apply_actions(registry, {}, report, box_mask_fn(100, 100));
    CHECK(summary.refined == 1);
    CHECK(summary.added == 0);
    CHECK(summary.removed == 0);

    // Diff against the snapshot: only sub_0's box and mask changed.
    REQUIRE(registry.size() == before.size());
    for (std::size_t i = 0; i < before.size(); ++i) {
        CHECK(registry.subjects()[i].id == before[i].id);
        CHECK(registry.subjects()[i].label == before[i].label);
    }
    CHECK(registry.find("sub_0")->box == BoundingBox{2, 2, 18, 18});
    CHECK(registry.find("sub_0")->mask->popcount() == 256);
    CHECK(registry.find("sub_1")->box == before[1].box);
}

TEST_CASE("instruction-only refinements resolve through the refine hook") {
    SubjectRegistry registry;
    registry.add("pedestrian", {0, 0, 20, 20}, std::nullopt);
    SupervisorReport report;
    report.refinements.push_back({"sub_0", "extend to include the bag per G5", std::nullopt});

    // No hook available: the refinement is skipped with a warning.
    ChangeSummary skipped = apply_actions(registry, {}, report, box_mask_fn(100, 100));
    CHECK(skipped.refined == 0);
    CHECK(skipped.warnings.size() == 1);
    CHECK(registry.find("sub_0")->box == BoundingBox{0, 0, 20, 20});

    RefineFn refine_fn = [](const SubjectInstance& subject, const std::string& instruction)
        -> std::optional<BoundingBox> {
        CHECK(subject.id == "sub_0");
        CHECK(instruction == "extend to include the bag per G5");
        return BoundingBox{0, 0, 25, 25};
    };
    ChangeSummary applied =
        apply_actions(registry, {}, report, box_mask_fn(100, 100), {}, refine_fn);
    CHECK(applied.refined == 1);
    CHECK(registry.find("sub_0")->box == BoundingBox{0, 0, 25, 25});

    // Refinements on removed subjects are reported, not fatal.
    SupervisorReport stale;
    stale.refinements.push_back({"sub_9", "whatever per G1", BoundingBox{0, 0, 5, 5}});
    ChangeSummary missing = apply_actions(registry, {}, stale, box_mask_fn(100, 100));
    CHECK(missing.refined == 0);
    CHECK(missing.warnings.size() == 1);
}

TEST_CASE("segmentation failures keep the subject without a mask") {
    SubjectRegistry registry;
    SupervisorReport report = report_with_missing("m_0");
    std::vector<CandidateBox> candidates;
    candidates.push_back({"m_0", "umbrella", {0, 0, 10, 10}, true, 0.9});

    MaskFn failing = [](const BoundingBox&) -> std::optional<BinaryMask> {
        return std::nullopt;
    };
    ChangeSummary summary = apply_actions(registry, candidates, report, failing);
    CHECK(summary.added == 1);
    REQUIRE(registry.size() == 1);
    CHECK_FALSE(registry.subjects()[0].mask.has_value());
    CHECK(summary.warnings.size() == 1);
}

TEST_CASE("apply_actions conserves ids across mixed changes") {
    SubjectRegistry registry;
    registry.add("pedestrian", {0, 0, 20, 20}, std::nullopt);   // sub_0
    registry.add("pedestrian", {40, 40, 60, 60}, std::nullopt); // sub_1
    std::set<std::string> before;
    for (const auto& s : registry.subjects()) before.insert(s.id);

    SupervisorReport report;
    report.missing_objects.push_back({"m_0", "umbrella", "include per G4"});
    report.false_positives.push_back({"e_0", "pedestrian", std::string("sub_1"), "per G7"});
    report.refinements.push_back({"sub_0", "tighten per G3", BoundingBox{1, 1, 19, 19}});

    std::vector<CandidateBox> candidates;
    candidates.push_back({"m_0", "umbrella", {70, 70, 90, 90}, true, 0.9});
    candidates.push_back({"e_0", "pedestrian", {40, 40, 60, 60}, true, 0.9});

    ChangeSummary summary = apply_actions(registry, candidates, report,
                                          box_mask_fn(100, 100));
    CHECK(summary.added == 1);
    CHECK(summary.removed == 1);
    CHECK(summary.refined == 1);

    std::set<std::string> after;
    for (const auto& s : registry.subjects()) after.insert(s.id);
    // Surviving ids are a subset of the originals plus exactly the fresh adds.
    for (const auto& id : after) {
        bool was_there = before.count(id) > 0;
        bool is_fresh = subject_number(id) >= 2;
        CHECK((was_there || is_fresh));
    }
    CHECK(after.count("sub_1") == 0);
    CHECK(after.count("sub_0") == 1);
    CHECK(after.count("sub_2") == 1);
}

TEST_CASE("parsers survive fuzzed input without crashing") {
    Rng rng(173);
    const std::string pool = "{}[]\":,abme_0123456789 .\n\\tinstancesboxlr";
    SupervisorReport report = report_with_missing("m_0");
    for (int trial = 0; trial < 300; ++trial) {
        std::size_t length = rng.uniform_u64(200);
        std::string text;
        for (std::size_t i = 0; i < length; ++i) {
            text.push_back(pool[rng.uniform_u64(pool.size())]);
        }
        try {
            parse_worker_output(text, 100, 100);
        } catch (const Error&) {
        }
        try {
            parse_supervisor_eval(text);
        } catch (const Error&) {
        }
        try {
            parse_boxgen_output(text, report, 100, 100);
        } catch (const Error&) {
        }
    }
    // Structured but wrongly typed documents also stay within typed errors.
    std::vector<std::string> hostile = {
        R"({"instances":5})",
        R"({"instances":[5,null,[]]})",
        R"({"instances":[{"id":5,"label":6,"box_2d":"x"}]})",
        R"({"missing_objects":[5],"false_positives":[],"refinements":[]})",
        R"({"missing_objects":[{"missing_object_id":7}],"false_positives":[],"refinements":[]})",
        R"({"missing_objects":[],"false_positives":[{"id":["e_0"]}],"refinements":[]})",
        R"({"missing_objects":[],"false_positives":[],"refinements":[{"box_id":9}]})",
        R"({"missing_objects":null,"false_positives":[],"refinements":[]})",
    };
    for (const auto& text : hostile) {
        try {
            parse_worker_output(text, 100, 100);
        } catch (const Error&) {
        }
        try {
            parse_supervisor_eval(text);
        } catch (const Error&) {
        }
        try {
            parse_boxgen_output(text, report, 100, 100);
        } catch (const Error&) {
        }
    }
    CHECK(true);
}
