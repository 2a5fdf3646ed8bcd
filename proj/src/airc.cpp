#include "segref/airc.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "segref/errors.hpp"

namespace segref {

using nlohmann::json;
using nlohmann::ordered_json;

double issue_score(const IssueCounts& counts) {
    return counts.misses + counts.falses + 0.1 * counts.refinements;
}

const char* action_name(Action a) {
    return a == Action::Stop ? "STOP" : "CONTINUE";
}

int density_bucket(int initial_object_count, const DensityThresholds& thresholds) {
    if (initial_object_count < 0) {
        throw ValidationError("object count must be nonnegative");
    }
    if (initial_object_count <= thresholds.few_max) return 0;
    if (initial_object_count <= thresholds.medium_max) return 1;
    return 2;
}

ControllerState encode_state(int initial_object_count, const IssueCounts& counts,
                             const DensityThresholds& thresholds,
                             bool refinements_dirty) {
    ControllerState state;
    state.d = density_bucket(initial_object_count, thresholds);
    bool dirty = counts.misses + counts.falses > 0;
    if (refinements_dirty) dirty = dirty || counts.refinements > 0;
    state.v = dirty ? 1 : 0;
    return state;
}

double reward(double issues_t, double issues_next, Action action, bool at_max,
              const RewardConstants& constants) {
    if (action == Action::Continue) {
        double r = (issues_t - issues_next) - constants.step_cost;
        // The bonus pays for driving a full-weight defect down to a clean
        // critique. Granting it for refinement-weight residue alone would
        // let the controller farm it from states it cannot tell apart from
        // clean ones, since the state bit ignores refinements.
        if (issues_next == 0.0 && issues_t >= 1.0) r += constants.clean_bonus;
        return r;
    }
    if (issues_t == 0.0) return 0.0;
    return at_max ? 0.0 : -constants.early_stop_penalty;
}

namespace {

void check_state(int s) {
    if (s < 0 || s >= QTable::kStates) {
        throw ValidationError("controller state out of range: " + std::to_string(s));
    }
}

}  // namespace

void q_update(QTable& table, int s, Action a, double r, int s_next, bool terminal) {
    check_state(s);
    check_state(s_next);
    int ai = static_cast<int>(a);
    double future = 0.0;
    if (!terminal) {
        future = std::max(table.q[s_next][0], table.q[s_next][1]);
    }
    table.q[s][ai] += table.alpha * (r + table.gamma * future - table.q[s][ai]);
    table.visits[s][ai] += 1;
    double prev = table.cumulative_reward_trace.empty()
                      ? 0.0
                      : table.cumulative_reward_trace.back();
    table.cumulative_reward_trace.push_back(prev + r);
}

Action decide(const QTable& table, int s, int iteration, const IterationBounds& bounds,
              Rng* explore) {
    check_state(s);
    if (!bounds.valid()) {
        throw ValidationError("iteration bounds require 1 <= min <= max");
    }
    if (iteration < bounds.min_iters) return Action::Continue;
    if (iteration >= bounds.max_iters) return Action::Stop;
    if (explore != nullptr && explore->bernoulli(table.epsilon)) {
        return explore->bernoulli(0.5) ? Action::Continue : Action::Stop;
    }
    int si = s;
    return table.q[si][static_cast<int>(Action::Continue)] >
                   table.q[si][static_cast<int>(Action::Stop)]
               ? Action::Continue
               : Action::Stop;
}

double q_value_estimate(double mu_delta, double pi_clear, double v_next,
                        const RewardConstants& constants, double gamma) {
    return mu_delta - constants.step_cost + constants.clean_bonus * pi_clear +
           gamma * v_next;
}

std::string qtable_to_json(const QTable& table) {
    ordered_json doc;
    doc["version"] = 1;
    ordered_json hp;
    hp["alpha"] = table.alpha;
    hp["gamma"] = table.gamma;
    hp["epsilon"] = table.epsilon;
    hp["step_cost"] = table.rewards.step_cost;
    hp["early_stop_penalty"] = table.rewards.early_stop_penalty;
    hp["clean_bonus"] = table.rewards.clean_bonus;
    doc["hyperparams"] = std::move(hp);
    doc["density_thresholds"] = {table.density.few_max, table.density.medium_max};
    auto grid = [&](const auto& cells) {
        ordered_json rows = ordered_json::array();
        for (int s = 0; s < QTable::kStates; ++s) {
            rows.push_back(ordered_json::array({cells[s][0], cells[s][1]}));
        }
        return rows;
    };
    doc["q"] = grid(table.q);
    doc["visits"] = grid(table.visits);
    doc["cumulative_reward_trace"] = table.cumulative_reward_trace;
    return doc.dump(2) + "\n";
}

QTable qtable_from_json(const std::string& text) {
    json doc = json::parse(text, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) {
        throw FormatError("q-table file is not valid JSON");
    }
    if (!doc.contains("version") || doc["version"] != 1) {
        throw FormatError("unsupported q-table version");
    }
    try {
        QTable table;
        const json& hp = doc.at("hyperparams");
        table.alpha = hp.at("alpha").get<double>();
        table.gamma = hp.at("gamma").get<double>();
        table.epsilon = hp.at("epsilon").get<double>();
        table.rewards.step_cost = hp.at("step_cost").get<double>();
        table.rewards.early_stop_penalty = hp.at("early_stop_penalty").get<double>();
        table.rewards.clean_bonus = hp.at("clean_bonus").get<double>();
        table.density.few_max = doc.at("density_thresholds").at(0).get<int>();
        table.density.medium_max = doc.at("density_thresholds").at(1).get<int>();
        for (int s = 0; s < QTable::kStates; ++s) {
            for (int a = 0; a < QTable::kActions; ++a) {
                table.q[s][a] = doc.at("q").at(s).at(a).get<double>();
                table.visits[s][a] = doc.at("visits").at(s).at(a).get<long>();
            }
        }
        table.cumulative_reward_trace =
            doc.at("cumulative_reward_trace").get<std::vector<double>>();
        return table;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed q-table file: ") + e.what());
    }
}

void save_qtable(const QTable& table, const std::string& path) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp);
        out << qtable_to_json(table);
        if (!out) throw IoError("write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw IoError("cannot move " + tmp + " to " + path);
    }
}

QTable load_qtable(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return qtable_from_json(buf.str());
}

Controller::Controller(QTable table, bool training, std::uint64_t seed)
    : table_(std::move(table)), training_(training), rng_(seed) {}

Action Controller::decide(int s, int iteration, const IterationBounds& bounds) {
    std::lock_guard<std::mutex> lock(mutex_);
    return segref::decide(table_, s, iteration, bounds, training_ ? &rng_ : nullptr);
}

void Controller::update(int s, Action a, double r, int s_next, bool terminal) {
    std::lock_guard<std::mutex> lock(mutex_);
    q_update(table_, s, a, r, s_next, terminal);
}

QTable Controller::snapshot() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return table_;
}

}  // namespace segref
