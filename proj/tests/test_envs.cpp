#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "psec/envs.hpp"

using namespace psec;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("step: zero action at rest leaves the position; Hold reward 0 at origin") {
  PointEnv env{make_task(TaskKind::Hold)};
  auto s = env.make_state(0.0, 0.0, 0.0, 0.0);
  auto res = env.step(s, {0.0, 0.0});
  CHECK(res.next_state[0] == 0.0);
  CHECK(res.next_state[1] == 0.0);
  CHECK(res.reward == 0.0);
  CHECK(res.cost == 0.0);
  CHECK_FALSE(res.clipped_action);
}

TEST_CASE("step: damping 1, gain 1, a=(1,0) from rest gives vx = dt = 0.05") {
  TaskSpec task = make_task(TaskKind::Hold);
  task.damping = 1.0;
  task.gain = 1.0;
  PointEnv env{task};
  auto s = env.make_state(0.0, 0.0, 0.0, 0.0);
  auto res = env.step(s, {1.0, 0.0});
  CHECK(res.next_state[2] == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(res.next_state[0] == doctest::Approx(0.05 * PointEnv::kDt).epsilon(1e-15));
}

TEST_CASE("step: hazard occupancy costs exactly 1; out-of-box actions are clipped") {
  PointEnv env{make_task(TaskKind::SafeReach)};  // hazard at origin, radius 1.1
  auto inside = env.make_state(0.0, 0.0, 0.0, 0.0);
  CHECK(env.step(inside, {0.0, 0.0}).cost == 1.0);
  auto outside = env.make_state(-3.0, 0.0, 0.0, 0.0);
  CHECK(env.step(outside, {0.0, 0.0}).cost == 0.0);
  CHECK(env.step(outside, {2.0, 0.0}).clipped_action);
  CHECK_THROWS_AS(env.step({0.0, 0.0}, {0.0, 0.0}), std::invalid_argument);
}

TEST_CASE("scripted_expert: near-zero action at the goal, deterministic when noiseless") {
  SeededRng rng(1);
  for (TaskKind kind : {TaskKind::Hold, TaskKind::Slow, TaskKind::Fast, TaskKind::SafeReach}) {
    TaskSpec task = make_task(kind);
    PointEnv env{task};
    auto s = env.make_state(task.goal[0], task.goal[1], 0.0, 0.0);
    auto a = scripted_expert(task, s, 0.0, rng);
    CHECK(std::abs(a[0]) < 1e-9);
    CHECK(std::abs(a[1]) < 1e-9);
  }
  // noiseless trajectories do not depend on the rng stream
  TaskSpec task = make_task(TaskKind::Fast);
  PointEnv env{task};
  SeededRng r1(10), r2(99);
  auto s1 = env.make_state(-3.0, 0.2, 0.0, 0.0);
  auto s2 = s1;
  for (int t = 0; t < 50; ++t) {
    auto a1 = scripted_expert(task, s1, 0.0, r1);
    auto a2 = scripted_expert(task, s2, 0.0, r2);
    CHECK(a1 == a2);
    s1 = env.step(s1, a1).next_state;
    s2 = env.step(s2, a2).next_state;
  }
}

TEST_CASE("scripted_expert: safe variant stays out of hazards over 100 rollouts") {
  TaskSpec task = make_task(TaskKind::SafeReach);
  PointEnv env{task};
  SeededRng rng(42);
  PolicySampler safe = scripted_sampler(task, ExpertKind::SafeExpert);
  for (int ep = 0; ep < 100; ++ep) {
    SeededRng ep_rng = rng.split();
    auto traj = rollout(env, safe, ep, ep_rng);
    for (const Transition& tr : traj) CHECK(tr.c == 0.0);
  }
}

TEST_CASE("generate_dataset: same seed produces byte-identical NDJSON") {
  TaskSpec task = make_task(TaskKind::SafeReach);
  TrajectoryDataset d1 = generate_dataset(task, "mixed", 5, 123);
  TrajectoryDataset d2 = generate_dataset(task, "mixed", 5, 123);
  fs::path dir = fs::temp_directory_path() / "psec_test_envs";
  fs::create_directories(dir);
  save_dataset(d1, (dir / "a.ndjson").string());
  save_dataset(d2, (dir / "b.ndjson").string());
  CHECK(slurp(dir / "a.ndjson") == slurp(dir / "b.ndjson"));
  CHECK(slurp(dir / "a.ndjson.stats.json") == slurp(dir / "b.ndjson.stats.json"));

  // round trip through the loader
  TrajectoryDataset back = load_dataset((dir / "a.ndjson").string());
  REQUIRE(back.transitions.size() == d1.transitions.size());
  CHECK(back.transitions[7].s == d1.transitions[7].s);
  CHECK(back.transitions[7].a == d1.transitions[7].a);
  CHECK(back.stats.mean == d1.stats.mean);
}

TEST_CASE("generate_dataset: zero episodes is empty; stats on empty data error") {
  TaskSpec task = make_task(TaskKind::Hold);
  TrajectoryDataset ds = generate_dataset(task, "expert", 0, 5);
  CHECK(ds.transitions.empty());
  CHECK_THROWS_AS(ds.compute_stats(), std::runtime_error);
  CHECK_THROWS_AS(generate_dataset(task, "what", 1, 5), std::invalid_argument);
}

TEST_CASE("generate_dataset: risky demos cost more than safe demos on SafeReach") {
  TaskSpec task = make_task(TaskKind::SafeReach);
  auto mean_cost = [&](const std::string& kind) {
    TrajectoryDataset ds = generate_dataset(task, kind, 20, 321);
    double total = 0.0;
    for (const Transition& tr : ds.transitions) total += tr.c;
    return total / 20.0;
  };
  CHECK(mean_cost("risky") > mean_cost("safe"));
}

TEST_CASE("evaluate_policy: expert near 1, random near 0, safe expert cost below 1") {
  for (TaskKind kind : {TaskKind::Hold, TaskKind::Slow, TaskKind::Fast, TaskKind::SafeReach}) {
    TaskSpec task = make_task(kind);
    TaskReferences refs = task_references(task, 7700, 200);
    ExpertKind expert =
        kind == TaskKind::SafeReach ? ExpertKind::SafeExpert : ExpertKind::Expert;
    EvalMetrics em =
        evaluate_policy(scripted_sampler(task, expert), task, 200, 9001, &refs);
    CHECK(std::abs(em.normalized_return - 1.0) < 0.05);
    EvalMetrics rm =
        evaluate_policy(scripted_sampler(task, ExpertKind::Random), task, 200, 9002, &refs);
    CHECK(std::abs(rm.normalized_return) < 0.05);
    if (kind == TaskKind::SafeReach) CHECK(em.normalized_cost < 1.0);
  }
  TaskSpec task = make_task(TaskKind::Hold);
  CHECK_THROWS_AS(evaluate_policy(scripted_sampler(task, ExpertKind::Expert), task, 0, 1),
                  std::invalid_argument);
}

TEST_CASE("dynamics-shift pair produces measurably different trajectories") {
  TaskSpec source = make_task(TaskKind::Fast);
  source.damping = 0.8;
  source.gain = 1.2;
  TaskSpec target = make_task(TaskKind::Fast);
  target.damping = 0.95;
  target.gain = 1.0;
  PointEnv env_s{source}, env_t{target};
  auto s1 = env_s.make_state(-3.0, 0.0, 0.0, 0.0);
  auto s2 = s1;
  SeededRng rng(3);
  double max_gap = 0.0;
  for (int t = 0; t < 100; ++t) {
    // same action sequence under both dynamics
    auto a = scripted_expert(source, s1, 0.0, rng);
    s1 = env_s.step(s1, a).next_state;
    s2 = env_t.step(s2, a).next_state;
    max_gap = std::max(max_gap, std::hypot(s1[0] - s2[0], s1[1] - s2[1]));
  }
  CHECK(max_gap > 0.3);
}
