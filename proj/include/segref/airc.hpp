#pragma once

#include <mutex>
#include <string>
#include <vector>

#include "segref/rng.hpp"

namespace segref {

// Weighted issue tally produced by one supervisor pass. Misses and false
// positives count 1 point each; refinements are low-impact and count 0.1.
struct IssueCounts {
    int misses = 0;
    int falses = 0;
    int refinements = 0;

    int total_entries() const { return misses + falses + refinements; }
    bool operator==(const IssueCounts&) const = default;
};

double issue_score(const IssueCounts& counts);

enum class Action { Stop = 0, Continue = 1 };

const char* action_name(Action a);

// Scene-complexity buckets from the initial object count: few (≤ few_max),
// medium (≤ medium_max), crowd (above).
struct DensityThresholds {
    int few_max = 2;
    int medium_max = 7;

    bool operator==(const DensityThresholds&) const = default;
};

// Controller state (d, v): density bucket and residual-violation flag,
// encoded as s = 2d + v in {0..5}.
struct ControllerState {
    int d = 0;
    int v = 0;

    int encoded() const { return 2 * d + v; }
};

int density_bucket(int initial_object_count, const DensityThresholds& thresholds = {});

// By default refinement-only residue does not set the violation flag
// (refinements are mask tweaks, not guideline violations); pass
// refinements_dirty=true for the stricter reading v = [score > 0].
ControllerState encode_state(int initial_object_count, const IssueCounts& counts,
                             const DensityThresholds& thresholds = {},
                             bool refinements_dirty = false);

// Reward constants stored as positive magnitudes; the reward function applies
// them with their intended signs (cost and penalty subtract, bonus adds).
struct RewardConstants {
    double step_cost = 0.02;
    double early_stop_penalty = 2.0;
    double clean_bonus = 1.0;

    bool operator==(const RewardConstants&) const = default;
};

// Per-transition reward.
//   CONTINUE: (issues_t - issues_next) - step_cost
//             + clean_bonus when the pass resolves at least one full-weight
//             issue down to a clean critique (issues_next == 0 with
//             issues_t >= 1).
//   STOP with no issues: 0.
//   STOP with issues: -early_stop_penalty, waived when the stop is forced by
//   the iteration cap (at_max) because that stop is not early.
double reward(double issues_t, double issues_next, Action action, bool at_max,
              const RewardConstants& constants = {});

struct IterationBounds {
    int min_iters = 2;
    int max_iters = 4;

    bool valid() const { return 1 <= min_iters && min_iters <= max_iters; }
    bool operator==(const IterationBounds&) const = default;
};

// Tabular action-value store for the six controller states.
struct QTable {
    static constexpr int kStates = 6;
    static constexpr int kActions = 2;

    double q[kStates][kActions] = {};
    long visits[kStates][kActions] = {};
    double alpha = 0.3;
    double gamma = 0.9;
    double epsilon = 0.02;
    RewardConstants rewards;
    DensityThresholds density;
    // Running total of all rewards seen, one point per update.
    std::vector<double> cumulative_reward_trace;

    bool operator==(const QTable&) const = default;
};

// One Q-learning step:
//   Q(s,a) += alpha * (r + gamma * max_a' Q(s',a') * [!terminal] - Q(s,a))
// Also bumps the (s,a) visit count and extends the cumulative reward trace.
void q_update(QTable& table, int s, Action a, double r, int s_next, bool terminal);

// Stop/continue decision. Iterations below min_iters force CONTINUE and the
// max_iters iteration forces STOP. In between: with probability epsilon (only
// when `explore` is non-null, i.e. training) the action is uniform random;
// otherwise CONTINUE iff Q(s,CONTINUE) strictly exceeds Q(s,STOP).
Action decide(const QTable& table, int s, int iteration, const IterationBounds& bounds,
              Rng* explore = nullptr);

// Closed-form diagnostic estimate of Q(s, CONTINUE): expected issues fixed,
// minus the step cost, plus the clear probability times the bonus, plus the
// discounted future value. Used in simulation reports, not for control.
double q_value_estimate(double mu_delta, double pi_clear, double v_next,
                        const RewardConstants& constants = {}, double gamma = 0.9);

std::string qtable_to_json(const QTable& table);
QTable qtable_from_json(const std::string& text);
void save_qtable(const QTable& table, const std::string& path);
QTable load_qtable(const std::string& path);

// Serializes decisions and updates when crops run concurrently. Exploration
// is active only in training mode; inference is pure greedy.
class Controller {
public:
    Controller(QTable table, bool training, std::uint64_t seed);

    Action decide(int s, int iteration, const IterationBounds& bounds);
    void update(int s, Action a, double r, int s_next, bool terminal);
    QTable snapshot() const;
    bool training() const { return training_; }

private:
    mutable std::mutex mutex_;
    QTable table_;
    bool training_;
    Rng rng_;
};

}  // namespace segref
