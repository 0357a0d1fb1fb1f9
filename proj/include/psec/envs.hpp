#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psec/rng.hpp"

namespace psec {

enum class TaskKind { Hold, Slow, Fast, SafeReach };

inline std::string task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::Hold: return "hold";
    case TaskKind::Slow: return "slow";
    case TaskKind::Fast: return "fast";
    case TaskKind::SafeReach: return "safe_reach";
  }
  return "?";
}

inline TaskKind task_kind_from_name(const std::string& s) {
  if (s == "hold") return TaskKind::Hold;
  if (s == "slow") return TaskKind::Slow;
  if (s == "fast") return TaskKind::Fast;
  if (s == "safe_reach") return TaskKind::SafeReach;
  throw std::invalid_argument("unknown task kind: " + s);
}

struct Hazard {
  double cx = 0.0, cy = 0.0, radius = 0.0;
};

struct TaskSpec {
  TaskKind kind = TaskKind::Hold;
  std::array<double, 2> goal{0.0, 0.0};
  std::vector<Hazard> hazards;
  double speed_lo = 0.0, speed_hi = 0.0;  // band for Slow/Fast bonus
  double damping = 0.9;
  double gain = 1.0;
  double cost_threshold = 10.0;  // per-episode normalization for cost
  std::size_t episode_len = 100;
};

// Canonical task instances shared by pipelines and tests. With damping d and
// gain g the steady-state speed under a unit action is g*dt/(1-d), so the
// default 0.95/1.0 pair tops out at 1.0 and goals sit within reach of a
// 100-step episode.
inline TaskSpec make_task(TaskKind kind) {
  TaskSpec t;
  t.kind = kind;
  t.damping = 0.95;
  t.gain = 1.0;
  switch (kind) {
    case TaskKind::Hold:
      t.goal = {0.0, 0.0};
      break;
    case TaskKind::Slow:
      t.goal = {2.0, 0.0};
      t.speed_lo = 0.2;
      t.speed_hi = 0.7;
      break;
    case TaskKind::Fast:
      t.goal = {2.0, 0.0};
      t.speed_lo = 0.8;
      t.speed_hi = 10.0;
      break;
    case TaskKind::SafeReach:
      t.goal = {2.0, 0.0};
      t.hazards = {{0.0, 0.0, 0.8}};
      break;
  }
  return t;
}

// Point-mass in a [-5,5]^2 box: v <- damping*v + gain*a*dt, p <- p + v*dt.
struct PointEnv {
  static constexpr double kDt = 0.05;
  static constexpr double kBox = 5.0;

  TaskSpec task;

  static std::size_t state_dim() { return 6; }  // x, y, vx, vy, goal dx, goal dy
  static std::size_t action_dim() { return 2; }

  std::vector<double> make_state(double x, double y, double vx, double vy) const {
    return {x, y, vx, vy, task.goal[0] - x, task.goal[1] - y};
  }

  std::vector<double> reset(SeededRng& rng) const {
    double x, y;
    if (task.kind == TaskKind::Hold) {
      x = rng.uniform(-2.0, 2.0);
      y = rng.uniform(-2.0, 2.0);
    } else {
      x = -2.0 + rng.uniform(-0.3, 0.3);
      y = rng.uniform(-0.5, 0.5);
    }
    return make_state(x, y, 0.0, 0.0);
  }

  bool in_hazard(double x, double y) const {
    for (const Hazard& h : task.hazards) {
      const double dx = x - h.cx, dy = y - h.cy;
      if (dx * dx + dy * dy < h.radius * h.radius) return true;
    }
    return false;
  }

  struct StepResult {
    std::vector<double> next_state;
    double reward = 0.0;
    double cost = 0.0;
    bool clipped_action = false;
  };

  StepResult step(const std::vector<double>& state, const std::vector<double>& action) const {
    if (state.size() != state_dim() || action.size() != action_dim())
      throw std::invalid_argument("PointEnv::step: bad state/action dims");
    StepResult res;
    double ax = action[0], ay = action[1];
    if (ax < -1.0 || ax > 1.0 || ay < -1.0 || ay > 1.0) {
      res.clipped_action = true;
      ax = std::clamp(ax, -1.0, 1.0);
      ay = std::clamp(ay, -1.0, 1.0);
    }
    double x = state[0], y = state[1], vx = state[2], vy = state[3];
    const double dist_before = std::hypot(task.goal[0] - x, task.goal[1] - y);
    vx = task.damping * vx + task.gain * ax * kDt;
    vy = task.damping * vy + task.gain * ay * kDt;
    x = std::clamp(x + vx * kDt, -kBox, kBox);
    y = std::clamp(y + vy * kDt, -kBox, kBox);
    const double dist_after = std::hypot(task.goal[0] - x, task.goal[1] - y);
    const double speed = std::hypot(vx, vy);
    switch (task.kind) {
      case TaskKind::Hold:
        res.reward = -std::hypot(x, y);
        break;
      case TaskKind::Slow:
      case TaskKind::Fast:
        // progress pays only inside the speed band, so sloppy speed control
        // is visible in the return instead of washing out
        if (speed >= task.speed_lo && speed <= task.speed_hi) {
          res.reward = dist_before - dist_after + 0.05;
        } else {
          res.reward = -0.02;
        }
        break;
      case TaskKind::SafeReach:
        res.reward = dist_before - dist_after;
        break;
    }
    res.cost = in_hazard(x, y) ? 1.0 : 0.0;
    res.next_state = make_state(x, y, vx, vy);
    return res;
  }
};

enum class ExpertKind { Expert, SafeExpert, Risky, Random };

// PD controller toward the task target; the safe variant steers around
// hazards. Gaussian exploration noise added on top.
inline std::vector<double> scripted_expert(const TaskSpec& task,
                                           const std::vector<double>& state,
                                           double noise_level, SeededRng& rng,
                                           bool safe_detour = false) {
  const double x = state[0], y = state[1], vx = state[2], vy = state[3];
  double ax = 0.0, ay = 0.0;
  const double gx = task.goal[0] - x, gy = task.goal[1] - y;
  const double gdist = std::hypot(gx, gy);
  switch (task.kind) {
    case TaskKind::Hold: {
      ax = -4.0 * x - 8.0 * vx;
      ay = -4.0 * y - 8.0 * vy;
      break;
    }
    case TaskKind::Slow:
    case TaskKind::Fast: {
      // track a target velocity in the middle of the speed band
      double target_speed = task.kind == TaskKind::Slow
                                ? 0.5 * (task.speed_lo + task.speed_hi)
                                : std::max(task.speed_lo * 1.3, 1.5);
      if (gdist < 0.4) target_speed *= gdist / 0.4;
      const double inv = gdist > 1e-9 ? 1.0 / gdist : 0.0;
      const double tvx = gx * inv * target_speed;
      const double tvy = gy * inv * target_speed;
      ax = 12.0 * (tvx - vx);
      ay = 12.0 * (tvy - vy);
      break;
    }
    case TaskKind::SafeReach: {
      double tx = gx, ty = gy;
      if (safe_detour) {
        for (const Hazard& h : task.hazards) {
          const double dx = x - h.cx, dy = y - h.cy;
          const double d = std::hypot(dx, dy);
          const double influence = h.radius + 0.9;
          if (d < influence && d > 1e-9) {
            // push away plus a tangential component to slide around
            const double push = 6.0 * (influence - d) / influence;
            tx += push * dx;
            ty += push * dy;
            tx += push * -dy * 0.8;
            ty += push * dx * 0.8;
          }
        }
      }
      const double tdist = std::hypot(tx, ty);
      double target_speed = 1.2;
      if (gdist < 0.4) target_speed *= gdist / 0.4;
      const double inv = tdist > 1e-9 ? 1.0 / tdist : 0.0;
      ax = 12.0 * (tx * inv * target_speed - vx);
      ay = 12.0 * (ty * inv * target_speed - vy);
      break;
    }
  }
  ax += noise_level * rng.normal();
  ay += noise_level * rng.normal();
  return {std::clamp(ax, -1.0, 1.0), std::clamp(ay, -1.0, 1.0)};
}

struct Transition {
  int ep = 0;
  int t = 0;
  std::vector<double> s;
  std::vector<double> a;
  double r = 0.0;
  double c = 0.0;
  bool done = false;
  std::vector<double> s_next;
};

struct DatasetStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  std::vector<double> normalize(const std::vector<double>& s) const {
    std::vector<double> out(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = (s[i] - mean[i]) / stddev[i];
    return out;
  }
};

struct TrajectoryDataset {
  std::vector<Transition> transitions;
  DatasetStats stats;

  std::size_t num_episodes() const {
    int max_ep = -1;
    for (const Transition& tr : transitions) max_ep = std::max(max_ep, tr.ep);
    return static_cast<std::size_t>(max_ep + 1);
  }

  double episode_return(int ep) const {
    double r = 0.0;
    for (const Transition& tr : transitions)
      if (tr.ep == ep) r += tr.r;
    return r;
  }

  double episode_cost(int ep) const {
    double c = 0.0;
    for (const Transition& tr : transitions)
      if (tr.ep == ep) c += tr.c;
    return c;
  }

  void compute_stats() {
    if (transitions.empty())
      throw std::runtime_error("compute_stats: empty dataset");
    const std::size_t d = transitions[0].s.size();
    stats.mean.assign(d, 0.0);
    stats.stddev.assign(d, 0.0);
    for (const Transition& tr : transitions)
      for (std::size_t i = 0; i < d; ++i) stats.mean[i] += tr.s[i];
    const double inv_n = 1.0 / static_cast<double>(transitions.size());
    for (double& v : stats.mean) v *= inv_n;
    for (const Transition& tr : transitions)
      for (std::size_t i = 0; i < d; ++i) {
        const double dlt = tr.s[i] - stats.mean[i];
        stats.stddev[i] += dlt * dlt;
      }
    for (double& v : stats.stddev) v = std::max(std::sqrt(v * inv_n), 1e-6);
  }
};

using PolicySampler =
    std::function<std::vector<double>(const std::vector<double>& state, SeededRng& rng)>;

inline PolicySampler scripted_sampler(const TaskSpec& task, ExpertKind kind,
                                      double noise_level = 0.05) {
  return [task, kind, noise_level](const std::vector<double>& s, SeededRng& rng) {
    switch (kind) {
      case ExpertKind::Expert:
        return scripted_expert(task, s, noise_level, rng, false);
      case ExpertKind::SafeExpert:
        return scripted_expert(task, s, noise_level, rng, true);
      case ExpertKind::Risky:
        return scripted_expert(task, s, noise_level * 3.0, rng, false);
      case ExpertKind::Random: {
        return std::vector<double>{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
      }
    }
    return std::vector<double>(2, 0.0);
  };
}

// Roll out a policy; records full transitions.
inline std::vector<Transition> rollout(const PointEnv& env, const PolicySampler& policy,
                                       int ep_index, SeededRng& rng) {
  std::vector<Transition> out;
  std::vector<double> s = env.reset(rng);
  for (std::size_t t = 0; t < env.task.episode_len; ++t) {
    std::vector<double> a = policy(s, rng);
    for (double& v : a) v = std::clamp(v, -1.0, 1.0);
    PointEnv::StepResult res = env.step(s, a);
    Transition tr;
    tr.ep = ep_index;
    tr.t = static_cast<int>(t);
    tr.s = s;
    tr.a = a;
    tr.r = res.reward;
    tr.c = res.cost;
    tr.done = t + 1 == env.task.episode_len;
    tr.s_next = res.next_state;
    out.push_back(std::move(tr));
    s = res.next_state;
  }
  return out;
}

// Mixed-quality option blends expert/risky/random 40/30/30 by episode.
inline TrajectoryDataset generate_dataset(const TaskSpec& task, const std::string& policy_kind,
                                          std::size_t episodes, std::uint64_t seed) {
  PointEnv env{task};
  TrajectoryDataset ds;
  SeededRng rng(seed);
  const bool safe_cap = task.kind == TaskKind::SafeReach;
  for (std::size_t ep = 0; ep < episodes; ++ep) {
    ExpertKind kind;
    if (policy_kind == "expert") {
      kind = safe_cap ? ExpertKind::SafeExpert : ExpertKind::Expert;
    } else if (policy_kind == "safe") {
      kind = ExpertKind::SafeExpert;
    } else if (policy_kind == "risky") {
      kind = ExpertKind::Risky;
    } else if (policy_kind == "random") {
      kind = ExpertKind::Random;
    } else if (policy_kind == "mixed") {
      const double u = static_cast<double>(ep) / static_cast<double>(episodes);
      kind = u < 0.4 ? (safe_cap ? ExpertKind::SafeExpert : ExpertKind::Expert)
                     : (u < 0.7 ? ExpertKind::Risky : ExpertKind::Random);
    } else {
      throw std::invalid_argument("generate_dataset: unknown policy kind " + policy_kind);
    }
    SeededRng ep_rng = rng.split();
    auto traj = rollout(env, scripted_sampler(task, kind), static_cast<int>(ep), ep_rng);
    ds.transitions.insert(ds.transitions.end(), traj.begin(), traj.end());
  }
  if (!ds.transitions.empty()) ds.compute_stats();
  return ds;
}

struct EvalMetrics {
  double mean_return = 0.0;
  double mean_cost = 0.0;
  double normalized_return = 0.0;
  double normalized_cost = 0.0;
  double success_rate = 0.0;
};

struct TaskReferences {
  double r_expert = 0.0;
  double r_random = 0.0;
};

inline double mean_return_of(const TaskSpec& task, ExpertKind kind, std::size_t episodes,
                             std::uint64_t seed) {
  PointEnv env{task};
  SeededRng rng(seed);
  double total = 0.0;
  for (std::size_t ep = 0; ep < episodes; ++ep) {
    SeededRng ep_rng = rng.split();
    auto traj = rollout(env, scripted_sampler(task, kind), 0, ep_rng);
    for (const Transition& tr : traj) total += tr.r;
  }
  return total / static_cast<double>(episodes);
}

// Reference returns from the scripted policies, used for normalization.
inline TaskReferences task_references(const TaskSpec& task, std::uint64_t seed = 7700,
                                      std::size_t episodes = 20) {
  TaskReferences refs;
  ExpertKind expert =
      task.kind == TaskKind::SafeReach ? ExpertKind::SafeExpert : ExpertKind::Expert;
  refs.r_expert = mean_return_of(task, expert, episodes, seed);
  refs.r_random = mean_return_of(task, ExpertKind::Random, episodes, seed + 1);
  return refs;
}

inline EvalMetrics evaluate_policy(const PolicySampler& policy, const TaskSpec& task,
                                   std::size_t episodes, std::uint64_t seed,
                                   const TaskReferences* refs_in = nullptr) {
  if (episodes == 0) throw std::invalid_argument("evaluate_policy: episodes must be > 0");
  TaskReferences refs = refs_in ? *refs_in : task_references(task);
  PointEnv env{task};
  SeededRng rng(seed);
  EvalMetrics m;
  for (std::size_t ep = 0; ep < episodes; ++ep) {
    SeededRng ep_rng = rng.split();
    auto traj = rollout(env, policy, 0, ep_rng);
    double ep_r = 0.0, ep_c = 0.0;
    for (const Transition& tr : traj) {
      ep_r += tr.r;
      ep_c += tr.c;
    }
    m.mean_return += ep_r;
    m.mean_cost += ep_c;
    const std::vector<double>& last = traj.back().s_next;
    const double dist_goal = std::hypot(task.goal[0] - last[0], task.goal[1] - last[1]);
    if (dist_goal < 0.5) m.success_rate += 1.0;
  }
  const double inv_n = 1.0 / static_cast<double>(episodes);
  m.mean_return *= inv_n;
  m.mean_cost *= inv_n;
  m.success_rate *= inv_n;
  const double denom = refs.r_expert - refs.r_random;
  m.normalized_return = denom != 0.0 ? (m.mean_return - refs.r_random) / denom : 0.0;
  m.normalized_cost = m.mean_cost / task.cost_threshold;
  return m;
}

// --- NDJSON dataset IO (one transition per line) + stats sidecar ---

inline void save_dataset(const TrajectoryDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_dataset: cannot open " + path);
  for (const Transition& tr : ds.transitions) {
    nlohmann::json j;
    j["ep"] = tr.ep;
    j["t"] = tr.t;
    j["s"] = tr.s;
    j["a"] = tr.a;
    j["r"] = tr.r;
    j["c"] = tr.c;
    j["d"] = tr.done;
    j["sn"] = tr.s_next;
    out << j.dump() << "\n";
  }
  nlohmann::json stats;
  stats["mean"] = ds.stats.mean;
  stats["std"] = ds.stats.stddev;
  std::ofstream sout(path + ".stats.json");
  sout << stats.dump(2) << "\n";
}

inline TrajectoryDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
  TrajectoryDataset ds;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    Transition tr;
    tr.ep = j["ep"];
    tr.t = j["t"];
    tr.s = j["s"].get<std::vector<double>>();
    tr.a = j["a"].get<std::vector<double>>();
    tr.r = j["r"];
    tr.c = j["c"];
    tr.done = j["d"];
    tr.s_next = j["sn"].get<std::vector<double>>();
    ds.transitions.push_back(std::move(tr));
  }
  std::ifstream sin(path + ".stats.json");
  if (sin) {
    nlohmann::json stats = nlohmann::json::parse(sin);
    ds.stats.mean = stats["mean"].get<std::vector<double>>();
    ds.stats.stddev = stats["std"].get<std::vector<double>>();
  } else if (!ds.transitions.empty()) {
    ds.compute_stats();
  }
  return ds;
}

}  // namespace psec
