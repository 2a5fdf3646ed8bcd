#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "segref/airc.hpp"
#include "segref/errors.hpp"

using namespace segref;

TEST_CASE("issue scores weight refinements at one tenth") {
    CHECK(issue_score({2, 1, 3}) == doctest::Approx(3.3));
    CHECK(issue_score({0, 0, 0}) == 0.0);
    CHECK(issue_score({0, 0, 7}) == doctest::Approx(0.7));
    CHECK(issue_score({1, 0, 0}) == doctest::Approx(1.0));
    CHECK(IssueCounts{2, 1, 3}.total_entries() == 6);
}

TEST_CASE("density buckets and state encoding") {
    CHECK(density_bucket(0) == 0);
    CHECK(density_bucket(2) == 0);
    CHECK(density_bucket(3) == 1);
    CHECK(density_bucket(7) == 1);
    CHECK(density_bucket(8) == 2);
    CHECK(density_bucket(100) == 2);
    CHECK_THROWS_AS(density_bucket(-1), ValidationError);

    CHECK(encode_state(1, {0, 0, 0}).encoded() == 0);
    CHECK(encode_state(12, {1, 0, 0}).encoded() == 5);
    // Refinement-only residue stays clean unless the strict flag is set.
    CHECK(encode_state(5, {0, 0, 4}).encoded() == 2);
    CHECK(encode_state(5, {0, 0, 4}, {}, true).encoded() == 3);
    CHECK(encode_state(5, {0, 1, 0}).encoded() == 3);

    DensityThresholds wide{4, 10};
    CHECK(encode_state(4, {0, 0, 0}, wide).encoded() == 0);
    CHECK(encode_state(10, {0, 0, 0}, wide).encoded() == 2);
}

TEST_CASE("reward function on the worked transitions") {
    // Progress: five issues down to one.
    CHECK(reward(5.0, 1.0, Action::Continue, false) == doctest::Approx(3.98));
    // Resolving pass earns the clean bonus on top.
    CHECK(reward(1.0, 0.0, Action::Continue, false) == doctest::Approx(1.98));
    // Stopping clean is free; stopping dirty early is the big penalty.
    CHECK(reward(0.0, 0.0, Action::Stop, false) == 0.0);
    CHECK(reward(2.1, 2.1, Action::Stop, false) == doctest::Approx(-2.0));
    // The cap waives the penalty: that stop was never a choice.
    CHECK(reward(2.1, 2.1, Action::Stop, true) == 0.0);

    // A pass that changes nothing always costs exactly the step price.
    for (double issues : {0.0, 0.3, 1.0, 4.2, 9.0}) {
        CHECK(reward(issues, issues, Action::Continue, false) == doctest::Approx(-0.02));
    }

    RewardConstants custom{0.1, 5.0, 2.0};
    CHECK(reward(1.0, 0.0, Action::Continue, false, custom) == doctest::Approx(2.9));
    CHECK(reward(1.0, 1.0, Action::Stop, false, custom) == doctest::Approx(-5.0));
}

TEST_CASE("q updates follow the tabular rule") {
    QTable table;
    q_update(table, 0, Action::Stop, 1.0, 0, true);
    CHECK(table.q[0][0] == doctest::Approx(0.3));
    CHECK(table.visits[0][0] == 1);
    REQUIRE(table.cumulative_reward_trace.size() == 1);
    CHECK(table.cumulative_reward_trace[0] == doctest::Approx(1.0));

    QTable bootstrapped;
    bootstrapped.q[1][0] = 1.0;
    q_update(bootstrapped, 0, Action::Continue, 0.0, 1, false);
    CHECK(bootstrapped.q[0][1] == doctest::Approx(0.27));

    // Terminal transitions ignore the next state's value.
    QTable terminal;
    terminal.q[1][0] = 100.0;
    q_update(terminal, 0, Action::Continue, 0.5, 1, true);
    CHECK(terminal.q[0][1] == doctest::Approx(0.15));

    CHECK_THROWS_AS(q_update(table, 6, Action::Stop, 0.0, 0, true), ValidationError);
    CHECK_THROWS_AS(q_update(table, 0, Action::Stop, 0.0, -1, true), ValidationError);
}

TEST_CASE("q updates touch only the addressed cell") {
    QTable table;
    for (int s = 0; s < QTable::kStates; ++s) {
        table.q[s][0] = s * 0.5;
        table.q[s][1] = s * 0.25;
    }
    QTable before = table;
    q_update(table, 3, Action::Continue, 1.0, 4, false);
    for (int s = 0; s < QTable::kStates; ++s) {
        for (int a = 0; a < QTable::kActions; ++a) {
            if (s == 3 && a == 1) continue;
            CHECK(table.q[s][a] == before.q[s][a]);
            CHECK(table.visits[s][a] == before.visits[s][a]);
        }
    }
}

TEST_CASE("a 200-step update sequence matches straight-line recomputation") {
    Rng rng(211);
    QTable table;

    double shadow_q[QTable::kStates][QTable::kActions] = {};
    long shadow_visits[QTable::kStates][QTable::kActions] = {};
    std::vector<double> shadow_trace;
    double running = 0.0;

    for (int step = 0; step < 200; ++step) {
        int s = static_cast<int>(rng.uniform_int(0, 5));
        int s_next = static_cast<int>(rng.uniform_int(0, 5));
        Action a = rng.bernoulli(0.5) ? Action::Continue : Action::Stop;
        double r = rng.uniform_real() * 4.0 - 2.0;
        bool terminal = rng.bernoulli(0.3);

        double future = terminal ? 0.0 : std::max(shadow_q[s_next][0], shadow_q[s_next][1]);
        int ai = static_cast<int>(a);
        shadow_q[s][ai] += table.alpha * (r + table.gamma * future - shadow_q[s][ai]);
        shadow_visits[s][ai] += 1;
        running += r;
        shadow_trace.push_back(running);

        q_update(table, s, a, r, s_next, terminal);
    }

    for (int s = 0; s < QTable::kStates; ++s) {
        for (int a = 0; a < QTable::kActions; ++a) {
            CHECK(table.q[s][a] == shadow_q[s][a]);
            CHECK(table.visits[s][a] == shadow_visits[s][a]);
        }
    }
    REQUIRE(table.cumulative_reward_trace.size() == shadow_trace.size());
    for (std::size_t i = 0; i < shadow_trace.size(); ++i) {
        CHECK(table.cumulative_reward_trace[i] == shadow_trace[i]);
    }
}

TEST_CASE("decide respects bounds, greed and the stop tie-break") {
    QTable table;
    table.q[2][static_cast<int>(Action::Continue)] = 0.5;
    table.q[2][static_cast<int>(Action::Stop)] = 0.2;
    IterationBounds bounds{2, 4};

    CHECK(decide(table, 2, 1, bounds) == Action::Continue);  // below min: forced
    CHECK(decide(table, 2, 4, bounds) == Action::Stop);      // at max: forced
    CHECK(decide(table, 2, 5, bounds) == Action::Stop);
    CHECK(decide(table, 2, 2, bounds) == Action::Continue);  // greedy
    CHECK(decide(table, 2, 3, bounds) == Action::Continue);

    table.q[3][0] = 0.4;
    table.q[3][1] = 0.4;
    CHECK(decide(table, 3, 2, bounds) == Action::Stop);  // exact tie stops

    table.q[4][0] = 0.9;
    table.q[4][1] = 0.1;
    CHECK(decide(table, 4, 2, bounds) == Action::Stop);

    CHECK_THROWS_AS(decide(table, 9, 2, bounds), ValidationError);
    CHECK_THROWS_AS(decide(table, 2, 2, IterationBounds{0, 4}), ValidationError);
    CHECK_THROWS_AS(decide(table, 2, 2, IterationBounds{5, 4}), ValidationError);
}

TEST_CASE("greedy decisions are invariant to a constant value shift") {
    Rng rng(223);
    IterationBounds bounds{2, 4};
    for (int trial = 0; trial < 100; ++trial) {
        QTable table;
        for (int s = 0; s < QTable::kStates; ++s) {
            for (int a = 0; a < QTable::kActions; ++a) {
                table.q[s][a] = rng.uniform_real() * 10.0 - 5.0;
            }
        }
        QTable shifted = table;
        double c = rng.uniform_real() * 100.0 - 50.0;
        for (int s = 0; s < QTable::kStates; ++s) {
            for (int a = 0; a < QTable::kActions; ++a) {
                shifted.q[s][a] += c;
            }
        }
        for (int s = 0; s < QTable::kStates; ++s) {
            for (int iteration = 2; iteration <= 3; ++iteration) {
                CHECK(decide(table, s, iteration, bounds) ==
                      decide(shifted, s, iteration, bounds));
            }
        }
    }
}

TEST_CASE("exploration only fires through the provided stream") {
    QTable table;
    table.epsilon = 1.0;  // every non-forced decision explores
    table.q[0][static_cast<int>(Action::Continue)] = 10.0;
    IterationBounds bounds{2, 4};

    // Without a stream the decision stays greedy despite epsilon.
    CHECK(decide(table, 0, 2, bounds, nullptr) == Action::Continue);

    Rng explore(31);
    int stops = 0, continues = 0;
    for (int i = 0; i < 200; ++i) {
        Action a = decide(table, 0, 2, bounds, &explore);
        (a == Action::Stop ? stops : continues) += 1;
    }
    CHECK(stops > 50);
    CHECK(continues > 50);

    // Forced regions never explore.
    Rng forced_stream(32);
    for (int i = 0; i < 50; ++i) {
        CHECK(decide(table, 0, 1, bounds, &forced_stream) == Action::Continue);
        CHECK(decide(table, 0, 4, bounds, &forced_stream) == Action::Stop);
    }
}

TEST_CASE("closed-form value estimate") {
    CHECK(q_value_estimate(1.0, 1.0, 0.0) == doctest::Approx(1.98));
    CHECK(q_value_estimate(0.0, 0.0, 0.0) == doctest::Approx(-0.02));
    CHECK(q_value_estimate(0.5, 0.5, 0.0) == doctest::Approx(0.98));
    CHECK(q_value_estimate(0.0, 0.0, 1.0) == doctest::Approx(0.88));
    CHECK(q_value_estimate(1.0, 0.0, 0.0, {0.1, 2.0, 3.0}, 0.5) == doctest::Approx(0.9));
}

TEST_CASE("value estimate agrees with a monte-carlo rollout") {
    // One residual issue; each extra pass resolves it with probability 0.5 and
    // the episode ends either way.
    Rng rng(229);
    const int n = 10000;
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        bool resolved = rng.bernoulli(0.5);
        total += resolved ? reward(1.0, 0.0, Action::Continue, false)
                          : reward(1.0, 1.0, Action::Continue, false);
    }
    double mc = total / n;
    CHECK(mc == doctest::Approx(q_value_estimate(0.5, 0.5, 0.0)).epsilon(0.1));
}

TEST_CASE("q-table persistence round-trips and rejects bad files") {
    QTable table;
    table.q[0][0] = 0.125;
    table.q[5][1] = -3.5;
    table.visits[2][1] = 42;
    table.epsilon = 0.05;
    table.cumulative_reward_trace = {0.5, 1.25, 1.0};

    std::string path =
        (std::filesystem::temp_directory_path() / "segref_test_qtable.json").string();
    save_qtable(table, path);
    QTable loaded = load_qtable(path);
    CHECK(loaded == table);

    // Serialization is stable: saving the loaded table reproduces the bytes.
    CHECK(qtable_to_json(loaded) == qtable_to_json(table));

    CHECK_THROWS_AS(qtable_from_json("not json"), FormatError);
    CHECK_THROWS_AS(qtable_from_json("{}"), FormatError);
    std::string versioned = qtable_to_json(table);
    std::size_t at = versioned.find("\"version\": 1");
    REQUIRE(at != std::string::npos);
    versioned.replace(at, 12, "\"version\": 2");
    CHECK_THROWS_AS(qtable_from_json(versioned), FormatError);
    CHECK_THROWS_AS(qtable_from_json(R"({"version":1,"hyperparams":{}})"), FormatError);
    CHECK_THROWS_AS(load_qtable("/no/such/file.json"), IoError);
    std::remove(path.c_str());
}

TEST_CASE("controller serializes decisions and honors the training flag") {
    QTable table;
    table.epsilon = 1.0;
    table.q[0][static_cast<int>(Action::Continue)] = 1.0;
    IterationBounds bounds{2, 4};

    Controller greedy(table, false, 77);
    CHECK_FALSE(greedy.training());
    for (int i = 0; i < 50; ++i) {
        CHECK(greedy.decide(0, 2, bounds) == Action::Continue);
    }

    Controller training(table, true, 77);
    CHECK(training.training());
    int stops = 0;
    for (int i = 0; i < 200; ++i) {
        if (training.decide(0, 2, bounds) == Action::Stop) ++stops;
    }
    CHECK(stops > 50);

    Controller learner(QTable{}, true, 1);
    learner.update(0, Action::Stop, 1.0, 0, true);
    QTable snap = learner.snapshot();
    CHECK(snap.q[0][0] == doctest::Approx(0.3));
    CHECK(snap.visits[0][0] == 1);
}

TEST_CASE("action names") {
    CHECK(std::string(action_name(Action::Stop)) == "STOP");
    CHECK(std::string(action_name(Action::Continue)) == "CONTINUE");
}
