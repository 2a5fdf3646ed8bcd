#include <algorithm>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "segref/airc.hpp"
#include "segref/guidelines.hpp"
#include "segref/metrics.hpp"
#include "segref/pipeline.hpp"
#include "segref/sim.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Validation and config problems exit 1; runtime failures exit 2.
int exit_code_for(const segref::Error& error) {
    static const std::set<std::string> config_kinds = {
        "validation", "format", "ingest", "empty_corpus", "bounds", "shape"};
    return config_kinds.count(error.kind()) != 0 ? 1 : 2;
}

void print_error(const std::string& kind, const std::string& message) {
    ordered_json doc;
    doc["error"] = kind;
    doc["message"] = message;
    std::cerr << doc.dump() << std::endl;
}

std::vector<fs::path> collect_json_files(const std::string& path) {
    std::vector<fs::path> files;
    fs::path p(path);
    if (fs::is_directory(p)) {
        for (const auto& entry : fs::directory_iterator(p)) {
            if (entry.is_regular_file() && entry.path().extension() == ".json") {
                files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
        if (files.empty()) {
            throw segref::ValidationError("no .json files in " + path);
        }
    } else if (fs::exists(p)) {
        files.push_back(p);
    } else {
        throw segref::ValidationError("no such file or directory: " + path);
    }
    return files;
}

int cmd_index(const std::string& corpus, const std::string& out, int dim) {
    auto guidelines = segref::ingest(segref::read_file(corpus));
    segref::HashEmbedder embedder(dim);
    auto index = segref::build_index(guidelines, embedder);
    segref::write_file_atomic(out, segref::index_to_json(index));
    std::cout << "indexed " << index.size() << " guidelines -> " << out << "\n";
    return 0;
}

segref::ImageHandle load_image_handle(const fs::path& file, const segref::RunConfig& config) {
    std::string doc = segref::read_file(file.string());
    if (config.backend == "simulated") {
        auto scene = segref::SyntheticScene::from_json(doc);
        return segref::make_scene_handle(scene, "sim://" + file.stem().string());
    }
    // Remote runs take a descriptor naming the image the service can resolve.
    json d = json::parse(doc, nullptr, false);
    if (d.is_discarded() || !d.is_object() || !d.contains("ref") ||
        !d.contains("width") || !d.contains("height")) {
        throw segref::FormatError(file.string() +
                                  ": remote image descriptors need ref, width, height");
    }
    segref::ImageHandle handle;
    handle.ref = d["ref"].get<std::string>();
    handle.width = d["width"].get<int>();
    handle.height = d["height"].get<int>();
    return handle;
}

int cmd_run(const std::string& image, const std::string& config_path,
            const std::string& qtable_path, const std::string& qtable_out,
            const std::string& out_dir) {
    segref::RunConfig config = segref::RunConfig::from_json(segref::read_file(config_path));
    if (config.corpus_path.empty()) {
        throw segref::ValidationError("run config needs corpus_path");
    }
    auto guidelines = segref::ingest(segref::read_file(config.corpus_path));
    segref::HashEmbedder embedder;
    auto index = segref::build_index(guidelines, embedder);
    segref::QTable table =
        qtable_path.empty() ? segref::QTable{} : segref::load_qtable(qtable_path);
    segref::RuntimeStack stack(config, &index, &embedder);

    std::vector<fs::path> inputs = collect_json_files(image);
    fs::create_directories(out_dir);

    auto summaries = ordered_json::array();
    long total_calls = 0, total_in = 0, total_out = 0;
    double total_cost = 0.0;
    for (const fs::path& input : inputs) {
        segref::ImageHandle handle = load_image_handle(input, config);
        segref::RunResult result = segref::run_image(handle, config, table, stack.env());
        if (config.airc_mode == "train") table = result.table;

        std::string stem = input.stem().string();
        segref::write_file_atomic((fs::path(out_dir) / (stem + ".mask.json")).string(),
                                  result.mask.to_rle_json());
        segref::write_file_atomic((fs::path(out_dir) / (stem + ".trace.jsonl")).string(),
                                  result.trace.to_jsonl());

        ordered_json entry = json::parse(result.trace.cost.to_json());
        entry["image"] = stem;
        summaries.push_back(std::move(entry));
        total_calls += result.trace.cost.calls;
        total_in += result.trace.cost.input_tokens;
        total_out += result.trace.cost.output_tokens;
        total_cost += result.trace.cost.cost_usd;
    }

    ordered_json cost_doc;
    cost_doc["images"] = std::move(summaries);
    ordered_json total;
    total["calls"] = total_calls;
    total["input_tokens"] = total_in;
    total["output_tokens"] = total_out;
    total["cost_usd"] = total_cost;
    cost_doc["total"] = std::move(total);
    segref::write_file_atomic((fs::path(out_dir) / "cost_summary.json").string(),
                              cost_doc.dump(2) + "\n");

    if (!qtable_out.empty()) segref::save_qtable(table, qtable_out);
    std::cout << "processed " << inputs.size() << " image(s) -> " << out_dir
              << " (total $" << total_cost << ")\n";
    return 0;
}

int cmd_simulate_scene(std::uint64_t seed, const std::string& density,
                       const std::string& config_path, const std::string& out,
                       const std::string& gt_out) {
    segref::SimulationConfig sim_config;
    if (!config_path.empty()) {
        sim_config = segref::SimulationConfig::from_json(segref::read_file(config_path));
    }
    auto scene = segref::generate_scene(seed, segref::density_from_name(density),
                                        sim_config.error_model);
    segref::write_file_atomic(out, scene.to_json() + "\n");
    if (!gt_out.empty()) {
        segref::BinaryMask gt(scene.width, scene.height);
        for (std::size_t i : scene.included_indices()) {
            gt = gt.unite(segref::rasterize(scene.entities[i].box, scene.width,
                                            scene.height));
        }
        segref::write_file_atomic(gt_out, gt.to_rle_json());
    }
    std::cout << "scene with " << scene.included_count() << " objects -> " << out << "\n";
    return 0;
}

int cmd_simulate_train(const std::string& config_path, int episodes,
                       const std::string& qtable_out, const std::string& trace_out) {
    segref::SimulationConfig sim_config;
    if (!config_path.empty()) {
        sim_config = segref::SimulationConfig::from_json(segref::read_file(config_path));
    }
    if (episodes > 0) sim_config.episodes = episodes;

    std::ostringstream trace_lines;
    double cumulative = 0.0;
    std::function<void(int, const segref::EpisodeTrace&)> sink;
    if (!trace_out.empty()) {
        sink = [&](int i, const segref::EpisodeTrace& trace) {
            cumulative += trace.total_reward;
            ordered_json line = json::parse(trace.to_json());
            line["episode"] = i;
            line["cumulative_reward"] = cumulative;
            trace_lines << line.dump() << '\n';
        };
    }
    segref::TrainResult result = segref::train_controller(
        sim_config.episodes, sim_config.error_model, sim_config.bounds, sim_config.seed,
        sim_config.density_mix, sink);
    segref::save_qtable(result.table, qtable_out);
    if (!trace_out.empty()) segref::write_file_atomic(trace_out, trace_lines.str());
    std::cout << "trained " << sim_config.episodes << " episodes, final cumulative reward "
              << result.episode_cumulative.back() << " -> " << qtable_out << "\n";
    return 0;
}

int cmd_simulate_ablate(const std::string& config_path, const std::string& qtable_path,
                        int scenes, const std::string& out_dir) {
    segref::SimulationConfig sim_config;
    if (!config_path.empty()) {
        sim_config = segref::SimulationConfig::from_json(segref::read_file(config_path));
    }
    segref::QTable table = segref::load_qtable(qtable_path);
    int n = scenes > 0 ? scenes : 500;
    segref::AblationReport report = segref::ablate_policies(
        sim_config.error_model, n, sim_config.seed, table, sim_config.bounds,
        sim_config.density_mix);
    fs::create_directories(out_dir);
    segref::write_file_atomic((fs::path(out_dir) / "ablation.json").string(),
                              report.to_json());
    segref::write_file_atomic((fs::path(out_dir) / "ablation.csv").string(),
                              report.to_csv());
    std::cout << "adaptive " << report.adaptive_resolved << " vs fixed "
              << report.fixed_resolved << " issues resolved per crop (extra passes on "
              << report.extra_pass_fraction * 100 << "% of crops) -> " << out_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& gt_dir,
             const std::string& out) {
    std::vector<fs::path> pred_files = collect_json_files(pred_dir);
    std::vector<segref::ImagePair> pairs;
    for (const fs::path& pred_file : pred_files) {
        fs::path gt_file = fs::path(gt_dir) / pred_file.filename();
        if (!fs::exists(gt_file)) {
            throw segref::ValidationError("no ground-truth mask for " +
                                          pred_file.filename().string());
        }
        segref::ImagePair pair;
        pair.predicted =
            segref::BinaryMask::from_rle_json(segref::read_file(pred_file.string()));
        pair.truth =
            segref::BinaryMask::from_rle_json(segref::read_file(gt_file.string()));
        pairs.push_back(std::move(pair));
    }
    segref::MetricReport report = segref::evaluate(pairs);
    bool csv = fs::path(out).extension() == ".csv";
    segref::write_file_atomic(out, csv ? report.to_csv() : report.to_json());
    std::cout << "gIoU " << report.g_iou << ", cIoU " << report.c_iou << " over "
              << pairs.size() << " image(s) -> " << out << "\n";
    return 0;
}

int cmd_report(const std::string& traces_dir, const std::string& out_dir) {
    std::vector<fs::path> files;
    if (!fs::is_directory(traces_dir)) {
        throw segref::ValidationError("not a directory: " + traces_dir);
    }
    for (const auto& entry : fs::directory_iterator(traces_dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".jsonl") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
        throw segref::ValidationError("no .jsonl trace files in " + traces_dir);
    }

    std::vector<std::pair<long, double>> curve;  // episode -> cumulative reward
    std::map<std::string, std::pair<long, double>> density_sums;  // count, resolved
    std::vector<double> costs;
    for (const fs::path& file : files) {
        std::istringstream lines(segref::read_file(file.string()));
        std::string line;
        while (std::getline(lines, line)) {
            if (line.empty()) continue;
            json doc = json::parse(line, nullptr, false);
            if (doc.is_discarded() || !doc.is_object()) continue;
            if (doc.contains("episode") && doc.contains("cumulative_reward")) {
                curve.emplace_back(doc["episode"].get<long>(),
                                   doc["cumulative_reward"].get<double>());
            }
            if (doc.contains("density") && doc.contains("issues_resolved")) {
                auto& bucket = density_sums[doc["density"].get<std::string>()];
                bucket.first += 1;
                bucket.second += doc["issues_resolved"].get<double>();
            }
            if (doc.contains("cost_usd")) {
                costs.push_back(doc["cost_usd"].get<double>());
            }
        }
    }
    std::sort(curve.begin(), curve.end());

    fs::create_directories(out_dir);
    int written = 0;
    if (!curve.empty()) {
        std::ostringstream csv;
        csv << "episode,cumulative_reward\n";
        auto rows = ordered_json::array();
        for (const auto& [episode, cumulative] : curve) {
            csv << episode << ',' << cumulative << '\n';
            ordered_json row;
            row["episode"] = episode;
            row["cumulative_reward"] = cumulative;
            rows.push_back(std::move(row));
        }
        segref::write_file_atomic((fs::path(out_dir) / "cumulative_reward.csv").string(),
                                  csv.str());
        segref::write_file_atomic((fs::path(out_dir) / "cumulative_reward.json").string(),
                                  rows.dump(2) + "\n");
        written += 2;
    }
    if (!density_sums.empty()) {
        std::ostringstream csv;
        csv << "density,episodes,mean_issues_resolved\n";
        auto rows = ordered_json::array();
        for (const auto& [density, bucket] : density_sums) {
            double mean = bucket.second / static_cast<double>(bucket.first);
            csv << density << ',' << bucket.first << ',' << mean << '\n';
            ordered_json row;
            row["density"] = density;
            row["episodes"] = bucket.first;
            row["mean_issues_resolved"] = mean;
            rows.push_back(std::move(row));
        }
        segref::write_file_atomic((fs::path(out_dir) / "issues_by_density.csv").string(),
                                  csv.str());
        segref::write_file_atomic((fs::path(out_dir) / "issues_by_density.json").string(),
                                  rows.dump(2) + "\n");
        written += 2;
    }
    if (!costs.empty()) {
        double max_cost = *std::max_element(costs.begin(), costs.end());
        const int bins = 10;
        double width = max_cost > 0.0 ? max_cost / bins : 1.0;
        std::vector<long> counts(bins, 0);
        for (double c : costs) {
            int b = std::min(bins - 1, static_cast<int>(c / width));
            counts[static_cast<std::size_t>(b)] += 1;
        }
        std::ostringstream csv;
        csv << "bin_low,bin_high,count\n";
        auto rows = ordered_json::array();
        for (int b = 0; b < bins; ++b) {
            csv << b * width << ',' << (b + 1) * width << ',' << counts[b] << '\n';
            ordered_json row;
            row["bin_low"] = b * width;
            row["bin_high"] = (b + 1) * width;
            row["count"] = counts[b];
            rows.push_back(std::move(row));
        }
        segref::write_file_atomic((fs::path(out_dir) / "cost_histogram.csv").string(),
                                  csv.str());
        segref::write_file_atomic((fs::path(out_dir) / "cost_histogram.json").string(),
                                  rows.dump(2) + "\n");
        written += 2;
    }
    if (written == 0) {
        throw segref::ValidationError("trace files contained no reportable records");
    }
    std::cout << "wrote " << written << " report file(s) -> " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Guideline-consistent segmentation refinement pipeline"};
    app.require_subcommand(1);

    auto* index_cmd =
        app.add_subcommand("index", "Build and persist a guideline similarity index");
    std::string index_corpus, index_out;
    int index_dim = 64;
    index_cmd->add_option("--corpus", index_corpus, "Guideline corpus file")->required();
    index_cmd->add_option("--out", index_out, "Output index file")->required();
    index_cmd->add_option("--dim", index_dim, "Embedding dimension");

    auto* run_cmd = app.add_subcommand("run", "Run the refinement pipeline on images");
    std::string run_image, run_config, run_qtable, run_qtable_out, run_out;
    run_cmd->add_option("--image", run_image, "Image file or directory")->required();
    run_cmd->add_option("--config", run_config, "Run config JSON")->required();
    run_cmd->add_option("--qtable", run_qtable, "Trained Q-table (omit for a fresh one)");
    run_cmd->add_option("--qtable-out", run_qtable_out,
                        "Persist the (possibly updated) Q-table here");
    run_cmd->add_option("--out", run_out, "Output directory")->required();

    auto* sim_cmd = app.add_subcommand("simulate", "Simulation environment commands");
    sim_cmd->require_subcommand(1);

    auto* scene_cmd = sim_cmd->add_subcommand("scene", "Generate a synthetic scene file");
    std::uint64_t scene_seed = 0;
    std::string scene_density = "medium", scene_config, scene_out, scene_gt;
    scene_cmd->add_option("--seed", scene_seed, "Scene seed");
    scene_cmd->add_option("--density", scene_density, "few, medium or crowd");
    scene_cmd->add_option("--config", scene_config, "Simulation config JSON");
    scene_cmd->add_option("--out", scene_out, "Output scene file")->required();
    scene_cmd->add_option("--gt", scene_gt, "Also write the ground-truth class mask");

    auto* train_cmd = sim_cmd->add_subcommand("train", "Train the stop controller");
    std::string train_config, train_qtable, train_trace;
    int train_episodes = 0;
    train_cmd->add_option("--config", train_config, "Simulation config JSON");
    train_cmd->add_option("--episodes", train_episodes, "Override episode count");
    train_cmd->add_option("--qtable", train_qtable, "Output Q-table file")->required();
    train_cmd->add_option("--trace", train_trace, "Episode trace JSONL output");

    auto* ablate_cmd =
        sim_cmd->add_subcommand("ablate", "Compare adaptive stopping to the fixed baseline");
    std::string ablate_config, ablate_qtable, ablate_out = ".";
    int ablate_scenes = 0;
    ablate_cmd->add_option("--config", ablate_config, "Simulation config JSON");
    ablate_cmd->add_option("--qtable", ablate_qtable, "Trained Q-table file")->required();
    ablate_cmd->add_option("--scenes", ablate_scenes, "Paired scenes to evaluate");
    ablate_cmd->add_option("--out", ablate_out, "Output directory");

    auto* eval_cmd = app.add_subcommand("eval", "Score predicted masks against ground truth");
    std::string eval_pred, eval_gt, eval_out;
    eval_cmd->add_option("--pred", eval_pred, "Directory of predicted masks")->required();
    eval_cmd->add_option("--gt", eval_gt, "Directory of ground-truth masks")->required();
    eval_cmd->add_option("--out", eval_out, "Report file (.json or .csv)")->required();

    auto* report_cmd = app.add_subcommand("report", "Aggregate trace files into plot data");
    std::string report_traces, report_out;
    report_cmd->add_option("--traces", report_traces, "Directory of .jsonl traces")
        ->required();
    report_cmd->add_option("--out", report_out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        return 1;
    }

    try {
        if (*index_cmd) return cmd_index(index_corpus, index_out, index_dim);
        if (*run_cmd) {
            return cmd_run(run_image, run_config, run_qtable, run_qtable_out, run_out);
        }
        if (*scene_cmd) {
            return cmd_simulate_scene(scene_seed, scene_density, scene_config, scene_out,
                                      scene_gt);
        }
        if (*train_cmd) {
            return cmd_simulate_train(train_config, train_episodes, train_qtable,
                                      train_trace);
        }
        if (*ablate_cmd) {
            return cmd_simulate_ablate(ablate_config, ablate_qtable, ablate_scenes,
                                       ablate_out);
        }
        if (*eval_cmd) return cmd_eval(eval_pred, eval_gt, eval_out);
        if (*report_cmd) return cmd_report(report_traces, report_out);
        print_error("usage", "no subcommand given");
        return 1;
    } catch (const segref::Error& e) {
        print_error(e.kind(), e.what());
        return exit_code_for(e);
    } catch (const std::exception& e) {
        print_error("internal", e.what());
        return 2;
    }
}
