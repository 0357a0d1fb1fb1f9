#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psec/compose.hpp"
#include "psec/critics.hpp"
#include "psec/diffusion.hpp"
#include "psec/envs.hpp"
#include "psec/lora.hpp"
#include "psec/skills.hpp"

namespace psec {

using json = nlohmann::json;

// Resolved run configuration. Defaults are desk-scale; every report echoes
// the full resolved config.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string task = "hold";
  std::string policy_kind = "expert";
  std::size_t episodes = 50;
  std::string dataset;
  std::string library;
  std::string out;      // report path
  std::string csv_out;  // comparison / trace / feature CSV path
  std::string skill_name = "skill";
  std::string composer_name = "composer";
  std::string weighting = "bc";  // bc | reward | safety
  std::vector<std::string> skill_names;
  std::vector<std::string> modes{"parameter"};
  std::vector<std::size_t> ranks{8};
  std::vector<double> fixed_alphas;
  json compare_skills = json::array();  // [{name, dataset, weighting}]

  std::size_t diffusion_T = 5;
  std::size_t hidden = 256;
  std::size_t hidden_layers = 2;
  std::size_t critic_hidden = 256;
  double lr = 3e-4;
  double critic_lr = 3e-4;
  std::size_t batch = 256;
  std::size_t critic_batch = 256;
  std::size_t pretrain_steps = 20000;
  std::size_t skill_steps = 5000;
  std::size_t composer_steps = 1000;
  std::size_t critic_steps = 2000;
  double tau = 0.9;
  double gamma = 0.99;
  double target_rate = 1e-3;
  std::size_t lora_rank = 8;
  double lora_scale = 16.0;
  std::string mode = "parameter";
  double clip = 100.0;
  std::size_t eval_episodes = 20;
  std::size_t filter_top_k = 30;
  double filter_cost_ceiling = 5.0;
  bool use_filter = false;
  bool raw_delta = false;
  std::size_t layer_index = 1;
  std::size_t feature_samples = 512;
  // dynamics overrides for the shift experiments; negative = task default
  double damping = -1.0;
  double gain = -1.0;

  TaskSpec make_task_spec() const {
    TaskSpec t = make_task(task_kind_from_name(task));
    if (damping >= 0.0) t.damping = damping;
    if (gain >= 0.0) t.gain = gain;
    return t;
  }

  static RunConfig from_json(const json& j) {
    RunConfig c;
    c.seed = j.value("seed", c.seed);
    c.task = j.value("task", c.task);
    c.policy_kind = j.value("policy_kind", c.policy_kind);
    c.episodes = j.value("episodes", c.episodes);
    c.dataset = j.value("dataset", c.dataset);
    c.library = j.value("library", c.library);
    c.out = j.value("out", c.out);
    c.csv_out = j.value("csv_out", c.csv_out);
    c.skill_name = j.value("skill_name", c.skill_name);
    c.composer_name = j.value("composer_name", c.composer_name);
    c.weighting = j.value("weighting", c.weighting);
    c.skill_names = j.value("skill_names", c.skill_names);
    c.modes = j.value("modes", c.modes);
    c.ranks = j.value("ranks", c.ranks);
    c.fixed_alphas = j.value("fixed_alphas", c.fixed_alphas);
    if (j.contains("compare_skills")) c.compare_skills = j.at("compare_skills");
    c.diffusion_T = j.value("diffusion_T", c.diffusion_T);
    c.hidden = j.value("hidden", c.hidden);
    c.hidden_layers = j.value("hidden_layers", c.hidden_layers);
    c.critic_hidden = j.value("critic_hidden", c.critic_hidden);
    c.lr = j.value("lr", c.lr);
    c.critic_lr = j.value("critic_lr", c.critic_lr);
    c.batch = j.value("batch", c.batch);
    c.critic_batch = j.value("critic_batch", c.critic_batch);
    c.pretrain_steps = j.value("pretrain_steps", c.pretrain_steps);
    c.skill_steps = j.value("skill_steps", c.skill_steps);
    c.composer_steps = j.value("composer_steps", c.composer_steps);
    c.critic_steps = j.value("critic_steps", c.critic_steps);
    c.tau = j.value("tau", c.tau);
    c.gamma = j.value("gamma", c.gamma);
    c.target_rate = j.value("target_rate", c.target_rate);
    c.lora_rank = j.value("lora_rank", c.lora_rank);
    c.lora_scale = j.value("lora_scale", c.lora_scale);
    c.mode = j.value("mode", c.mode);
    c.clip = j.value("clip", c.clip);
    c.eval_episodes = j.value("eval_episodes", c.eval_episodes);
    c.filter_top_k = j.value("filter_top_k", c.filter_top_k);
    c.filter_cost_ceiling = j.value("filter_cost_ceiling", c.filter_cost_ceiling);
    c.use_filter = j.value("use_filter", c.use_filter);
    c.raw_delta = j.value("raw_delta", c.raw_delta);
    c.layer_index = j.value("layer_index", c.layer_index);
    c.feature_samples = j.value("feature_samples", c.feature_samples);
    c.damping = j.value("damping", c.damping);
    c.gain = j.value("gain", c.gain);
    return c;
  }

  json to_json() const {
    json j;
    j["seed"] = seed;
    j["task"] = task;
    j["policy_kind"] = policy_kind;
    j["episodes"] = episodes;
    j["dataset"] = dataset;
    j["library"] = library;
    j["out"] = out;
    j["csv_out"] = csv_out;
    j["skill_name"] = skill_name;
    j["composer_name"] = composer_name;
    j["weighting"] = weighting;
    j["skill_names"] = skill_names;
    j["modes"] = modes;
    j["ranks"] = ranks;
    j["fixed_alphas"] = fixed_alphas;
    j["compare_skills"] = compare_skills;
    j["diffusion_T"] = diffusion_T;
    j["hidden"] = hidden;
    j["hidden_layers"] = hidden_layers;
    j["critic_hidden"] = critic_hidden;
    j["lr"] = lr;
    j["critic_lr"] = critic_lr;
    j["batch"] = batch;
    j["critic_batch"] = critic_batch;
    j["pretrain_steps"] = pretrain_steps;
    j["skill_steps"] = skill_steps;
    j["composer_steps"] = composer_steps;
    j["critic_steps"] = critic_steps;
    j["tau"] = tau;
    j["gamma"] = gamma;
    j["target_rate"] = target_rate;
    j["lora_rank"] = lora_rank;
    j["lora_scale"] = lora_scale;
    j["mode"] = mode;
    j["clip"] = clip;
    j["eval_episodes"] = eval_episodes;
    j["filter_top_k"] = filter_top_k;
    j["filter_cost_ceiling"] = filter_cost_ceiling;
    j["use_filter"] = use_filter;
    j["raw_delta"] = raw_delta;
    j["layer_index"] = layer_index;
    j["feature_samples"] = feature_samples;
    j["damping"] = damping;
    j["gain"] = gain;
    return j;
  }
};

// "--set key=value" override; value parsed as JSON when possible.
inline void apply_override(json& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("override must be key=value: " + kv);
  const std::string key = kv.substr(0, eq);
  const std::string val = kv.substr(eq + 1);
  json parsed = json::parse(val, nullptr, false);
  cfg[key] = parsed.is_discarded() ? json(val) : parsed;
}

struct RunReport {
  json body;

  RunReport(const std::string& command, const RunConfig& cfg) {
    body["schema_version"] = 1;
    body["command"] = command;
    body["config"] = cfg.to_json();
  }

  // Hash over everything except volatile wall time, so identical seeded
  // runs produce identical hashes.
  std::string content_hash() const {
    json stable = body;
    stable.erase("wall_time_s");
    stable.erase("content_hash");
    std::string s = stable.dump();
    return Sha256::hex(Sha256::hash(s.data(), s.size()));
  }

  void finalize(double wall_time_s) {
    body["wall_time_s"] = wall_time_s;
    body["content_hash"] = content_hash();
  }

  void write(const std::string& path) const {
    if (path.empty()) return;
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::filesystem::path tmp = p;
    tmp += ".tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw std::runtime_error("cannot write report " + path);
      out << body.dump(2) << "\n";
    }
    std::filesystem::rename(tmp, p);
  }
};

class Timer {
 public:
  Timer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

namespace detail {

struct NormalizedData {
  std::vector<std::vector<double>> states;
  std::vector<std::vector<double>> actions;
};

inline NormalizedData normalized_pairs(const TrajectoryDataset& ds,
                                       const DatasetStats& stats) {
  NormalizedData nd;
  nd.states.reserve(ds.transitions.size());
  nd.actions.reserve(ds.transitions.size());
  for (const Transition& tr : ds.transitions) {
    nd.states.push_back(stats.normalize(tr.s));
    nd.actions.push_back(tr.a);
  }
  return nd;
}

inline std::vector<double> thin_curve(const std::vector<double>& losses,
                                      std::size_t max_points = 200) {
  if (losses.size() <= max_points) return losses;
  std::vector<double> out;
  const std::size_t stride = losses.size() / max_points;
  for (std::size_t i = 0; i < losses.size(); i += stride) out.push_back(losses[i]);
  return out;
}

}  // namespace detail

// Train the base noise predictor with unit weights and start a fresh library.
inline TrainCurve pretrain_base(NoisePredictor& predictor, const DiffusionSchedule& sched,
                                const detail::NormalizedData& data, std::size_t steps,
                                double lr, std::size_t batch_size, SeededRng& rng) {
  TrainCurve curve;
  AdamState adam = AdamState::init(predictor.params);
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<DenoiseBatchItem> batch(batch_size);
    for (auto& item : batch) {
      const std::size_t i = static_cast<std::size_t>(rng.next_below(data.states.size()));
      item = DenoiseBatchItem{&data.states[i], &data.actions[i], 1.0};
    }
    ParamStore grads = predictor.params.zeros_like();
    double loss = diffusion_loss(predictor, sched, batch, rng, {}, &grads, nullptr);
    adam_step(predictor.params, grads, adam, lr);
    curve.losses.push_back(loss);
  }
  return curve;
}

inline RunReport cmd_pretrain(const RunConfig& cfg) {
  Timer timer;
  RunReport report("pretrain", cfg);
  TrajectoryDataset ds = load_dataset(cfg.dataset);
  detail::NormalizedData data = detail::normalized_pairs(ds, ds.stats);
  SeededRng rng(cfg.seed);
  NoisePredictor predictor =
      make_noise_predictor(ds.transitions[0].s.size(), ds.transitions[0].a.size(),
                           cfg.hidden, cfg.hidden_layers, rng);
  DiffusionSchedule sched = build_schedule(cfg.diffusion_T);
  TrainCurve curve =
      pretrain_base(predictor, sched, data, cfg.pretrain_steps, cfg.lr, cfg.batch, rng);
  SkillLibrary lib = make_library(std::move(predictor), ds.stats, cfg.diffusion_T);
  save_library(lib, cfg.library);
  report.body["loss_curve"] = detail::thin_curve(curve.losses);
  report.body["final_loss"] = curve.losses.empty() ? 0.0 : curve.losses.back();
  report.body["base_hash"] = lib.base_hash;
  report.finalize(timer.seconds());
  report.write(cfg.out);
  return report;
}

// Train reward and/or feasibility critics on a dataset, states normalized.
inline CriticSet train_critics(const TrajectoryDataset& ds, const DatasetStats& stats,
                               const std::string& weighting, const RunConfig& cfg,
                               SeededRng& rng) {
  CriticSet critics = make_critic_set(ds.transitions[0].s.size(),
                                      ds.transitions[0].a.size(), cfg.critic_hidden,
                                      cfg.hidden_layers, rng);
  ExpectileConfig ecfg;
  ecfg.tau = cfg.tau;
  ecfg.gamma = cfg.gamma;
  ecfg.target_rate = cfg.target_rate;
  ecfg.clip = cfg.clip;
  for (std::size_t step = 0; step < cfg.critic_steps; ++step) {
    std::vector<CriticBatchItem> batch(cfg.critic_batch);
    for (auto& it : batch) {
      const Transition& tr =
          ds.transitions[static_cast<std::size_t>(rng.next_below(ds.transitions.size()))];
      it.s = stats.normalize(tr.s);
      it.a = tr.a;
      it.s_next = stats.normalize(tr.s_next);
      it.signal = weighting == "safety" ? (tr.c > 0.0 ? 1.0 : 0.0) : tr.r;
    }
    if (weighting == "safety") {
      update_feasibility_critics(critics, batch, ecfg, cfg.critic_lr);
    } else {
      update_reward_critics(critics, batch, ecfg, cfg.critic_lr);
    }
  }
  return critics;
}

inline RunReport cmd_train_skill(const RunConfig& cfg) {
  Timer timer;
  RunReport report("train-skill", cfg);
  SkillLibrary lib = load_library(cfg.library);
  TrajectoryDataset ds = load_dataset(cfg.dataset);
  const DatasetStats& stats = lib.normalization;
  detail::NormalizedData data = detail::normalized_pairs(ds, stats);
  SeededRng rng(cfg.seed);
  std::vector<double> weights(data.states.size(), 1.0);
  if (cfg.weighting == "reward" || cfg.weighting == "safety") {
    SeededRng critic_rng = rng.split();
    CriticSet critics = train_critics(ds, stats, cfg.weighting, cfg, critic_rng);
    for (std::size_t i = 0; i < data.states.size(); ++i) {
      weights[i] = cfg.weighting == "reward"
                       ? reward_weight(critics, data.states[i], data.actions[i], cfg.clip)
                       : safety_weight(critics, data.states[i], data.actions[i], cfg.clip);
    }
  } else if (cfg.weighting != "bc") {
    throw std::invalid_argument("unknown weighting: " + cfg.weighting);
  }
  DiffusionSchedule sched = build_schedule(lib.diffusion_T);
  LoraAdapter adapter = init_adapter(lib.base.spec, cfg.lora_rank, rng, cfg.lora_scale);
  TrainCurve curve = train_skill(lib.base, sched, adapter, data.states, data.actions,
                                 weights, cfg.skill_steps, cfg.lr, cfg.batch, rng);
  SkillEntry entry;
  entry.name = cfg.skill_name;
  entry.adapter = std::move(adapter);
  entry.provenance = SkillProvenance{cfg.dataset, cfg.weighting, cfg.skill_steps, cfg.seed,
                                     curve.losses.empty() ? 0.0 : curve.losses.back()};
  entry.created_at = "seed-" + std::to_string(cfg.seed);
  lib.add_skill(std::move(entry));
  save_library(lib, cfg.library);
  report.body["loss_curve"] = detail::thin_curve(curve.losses);
  report.body["final_loss"] = curve.losses.empty() ? 0.0 : curve.losses.back();
  report.body["base_hash"] = lib.base_hash;
  report.body["skill"] = cfg.skill_name;
  report.finalize(timer.seconds());
  report.write(cfg.out);
  return report;
}

inline ComposedPolicy make_composed_policy(const SkillLibrary& lib,
                                           const DiffusionSchedule& sched,
                                           const std::vector<std::string>& skill_names,
                                           CompositionMode mode, bool raw_delta = false) {
  ComposedPolicy policy;
  policy.base = &lib.base;
  policy.sched = &sched;
  policy.mode = mode;
  policy.raw_delta = raw_delta;
  for (const std::string& name : skill_names) policy.skills.push_back(&lib.find(name).adapter);
  return policy;
}

// Policy sampler over raw env states (normalizes internally).
inline PolicySampler composed_sampler(const ComposedPolicy& policy,
                                      const DatasetStats& stats) {
  return [&policy, &stats](const std::vector<double>& s, SeededRng& rng) {
    return policy.sample(stats.normalize(s), rng, true);
  };
}

inline RunReport cmd_train_composer(const RunConfig& cfg) {
  Timer timer;
  RunReport report("train-composer", cfg);
  SkillLibrary lib = load_library(cfg.library);
  if (cfg.skill_names.empty())
    throw std::invalid_argument("train-composer: needs at least one skill name");
  TrajectoryDataset ds = load_dataset(cfg.dataset);
  bool filter_warning = false;
  if (cfg.use_filter) {
    FilterResult fr = filter_top_trajectories(ds, cfg.filter_top_k, cfg.filter_cost_ceiling);
    filter_warning = fr.truncated_warning;
    ds = std::move(fr.dataset);
    if (ds.transitions.empty())
      throw std::runtime_error("train-composer: no trajectories pass the cost ceiling");
  }
  detail::NormalizedData data = detail::normalized_pairs(ds, lib.normalization);
  SeededRng rng(cfg.seed);
  DiffusionSchedule sched = build_schedule(lib.diffusion_T);
  ComposedPolicy policy = make_composed_policy(lib, sched, cfg.skill_names,
                                               composition_mode_from_name(cfg.mode),
                                               cfg.raw_delta);
  policy.composer = make_composition_net(lib.base.state_dim, policy.skills.size(),
                                         cfg.hidden, cfg.hidden_layers, rng);
  TrainCurve curve = train_composer(policy, data.states, data.actions, cfg.composer_steps,
                                    cfg.lr, cfg.batch, rng);
  ComposerEntry entry;
  entry.name = cfg.composer_name;
  entry.net = policy.composer;
  entry.mode = policy.mode;
  entry.skill_names = cfg.skill_names;
  lib.composers.push_back(entry);
  save_library(lib, cfg.library);
  if (!cfg.csv_out.empty()) {
    // per-state alpha trace over the training set
    std::ofstream csv(cfg.csv_out);
    csv << "step";
    for (std::size_t i = 0; i < lib.base.state_dim; ++i) csv << ",s" << i;
    for (std::size_t i = 0; i < policy.skills.size(); ++i) csv << ",alpha_" << (i + 1);
    csv << "\n";
    const std::size_t stride = std::max<std::size_t>(1, data.states.size() / 200);
    for (std::size_t i = 0; i < data.states.size(); i += stride) {
      std::vector<double> alphas = policy.composer.forward(data.states[i]);
      csv << i;
      for (double v : data.states[i]) csv << "," << v;
      for (double v : alphas) csv << "," << v;
      csv << "\n";
    }
  }
  report.body["loss_curve"] = detail::thin_curve(curve.losses);
  report.body["final_loss"] = curve.losses.empty() ? 0.0 : curve.losses.back();
  report.body["filter_warning"] = filter_warning;
  report.body["composer"] = cfg.composer_name;
  report.body["base_hash"] = lib.base_hash;
  report.finalize(timer.seconds());
  report.write(cfg.out);
  return report;
}

inline json metrics_to_json(const EvalMetrics& m) {
  return json{{"mean_return", m.mean_return},
              {"mean_cost", m.mean_cost},
              {"normalized_return", m.normalized_return},
              {"normalized_cost", m.normalized_cost},
              {"success_rate", m.success_rate}};
}

inline RunReport cmd_eval(const RunConfig& cfg) {
  Timer timer;
  RunReport report("eval", cfg);
  if (cfg.eval_episodes == 0) throw std::invalid_argument("eval: episodes must be > 0");
  SkillLibrary lib = load_library(cfg.library);
  DiffusionSchedule sched = build_schedule(lib.diffusion_T);
  TaskSpec task = cfg.make_task_spec();
  ComposedPolicy policy;
  if (!cfg.composer_name.empty() && !lib.composers.empty() &&
      [&] {
        for (const auto& c : lib.composers)
          if (c.name == cfg.composer_name) return true;
        return false;
      }()) {
    const ComposerEntry& ce = lib.find_composer(cfg.composer_name);
    policy = make_composed_policy(lib, sched, ce.skill_names, ce.mode, cfg.raw_delta);
    policy.composer = ce.net;
  } else {
    policy = make_composed_policy(lib, sched, cfg.skill_names, CompositionMode::Fixed,
                                  cfg.raw_delta);
    policy.fixed_alphas = cfg.fixed_alphas;
    policy.fixed_alphas.resize(policy.skills.size(), 0.0);
  }
  EvalMetrics m =
      evaluate_policy(composed_sampler(policy, lib.normalization), task, cfg.eval_episodes,
                      cfg.seed);
  report.body["metrics"] = metrics_to_json(m);
  report.body["base_hash"] = lib.base_hash;
  report.finalize(timer.seconds());
  report.write(cfg.out);
  return report;
}

// Mode/rank sweep: retrains the listed skills at each rank, then one
// composer per mode, all with shared seeds; emits a CSV comparison table.
inline RunReport cmd_compare(const RunConfig& cfg) {
  Timer timer;
  RunReport report("compare", cfg);
  SkillLibrary lib = load_library(cfg.library);
  DiffusionSchedule sched = build_schedule(lib.diffusion_T);
  TaskSpec task = cfg.make_task_spec();
  TrajectoryDataset composer_ds = load_dataset(cfg.dataset);
  if (cfg.use_filter) {
    FilterResult fr = filter_top_trajectories(composer_ds, cfg.filter_top_k,
                                              cfg.filter_cost_ceiling);
    composer_ds = std::move(fr.dataset);
  }
  detail::NormalizedData comp_data = detail::normalized_pairs(composer_ds, lib.normalization);

  std::ostringstream csv;
  csv << "mode,rank,normalized_return,normalized_cost,success_rate\n";
  json rows = json::array();
  for (std::size_t rank : cfg.ranks) {
    // (re)train each listed skill at this rank with a shared seed
    std::vector<std::string> names;
    std::vector<LoraAdapter> adapters;
    for (const json& sk : cfg.compare_skills) {
      const std::string name = sk.at("name");
      names.push_back(name);
      TrajectoryDataset ds = load_dataset(sk.at("dataset"));
      detail::NormalizedData data = detail::normalized_pairs(ds, lib.normalization);
      SeededRng rng(cfg.seed + 1000 * rank);
      std::vector<double> weights(data.states.size(), 1.0);
      const std::string weighting = sk.value("weighting", "bc");
      if (weighting == "reward" || weighting == "safety") {
        SeededRng crng = rng.split();
        CriticSet critics = train_critics(ds, lib.normalization, weighting, cfg, crng);
        for (std::size_t i = 0; i < data.states.size(); ++i) {
          weights[i] = weighting == "reward"
                           ? reward_weight(critics, data.states[i], data.actions[i], cfg.clip)
                           : safety_weight(critics, data.states[i], data.actions[i], cfg.clip);
        }
      }
      LoraAdapter ad = init_adapter(lib.base.spec, rank, rng, cfg.lora_scale);
      train_skill(lib.base, sched, ad, data.states, data.actions, weights, cfg.skill_steps,
                  cfg.lr, cfg.batch, rng);
      adapters.push_back(std::move(ad));
    }
    if (adapters.empty()) {
      // fall back to skills already in the library
      for (const SkillEntry& e : lib.entries) {
        names.push_back(e.name);
        adapters.push_back(e.adapter);
      }
    }
    for (const std::string& mode_name : cfg.modes) {
      ComposedPolicy policy;
      policy.base = &lib.base;
      policy.sched = &sched;
      for (const LoraAdapter& ad : adapters) policy.skills.push_back(&ad);
      policy.mode = composition_mode_from_name(mode_name);
      policy.raw_delta = cfg.raw_delta;
      SeededRng rng(cfg.seed + 7);
      if (policy.mode == CompositionMode::Fixed) {
        policy.fixed_alphas = cfg.fixed_alphas;
        policy.fixed_alphas.resize(policy.skills.size(), 0.0);
      } else {
        policy.composer = make_composition_net(lib.base.state_dim, policy.skills.size(),
                                               cfg.hidden, cfg.hidden_layers, rng);
        train_composer(policy, comp_data.states, comp_data.actions, cfg.composer_steps,
                       cfg.lr, cfg.batch, rng);
      }
      EvalMetrics m = evaluate_policy(composed_sampler(policy, lib.normalization), task,
                                      cfg.eval_episodes, cfg.seed);
      csv << mode_name << "," << rank << "," << m.normalized_return << ","
          << m.normalized_cost << "," << m.success_rate << "\n";
      json row;
      row["mode"] = mode_name;
      row["rank"] = rank;
      row["metrics"] = metrics_to_json(m);
      rows.push_back(row);
    }
  }
  if (!cfg.csv_out.empty()) {
    std::ofstream out(cfg.csv_out);
    out << csv.str();
  }
  report.body["rows"] = rows;
  report.body["csv"] = csv.str();
  report.finalize(timer.seconds());
  report.write(cfg.out);
  return report;
}

// Feature dump for projection-style analysis: per skill, mid-layer features
// of noisy samples at diffusion step 1, the predicted noise, and an action.
inline RunReport cmd_dump_features(const RunConfig& cfg) {
  Timer timer;
  RunReport report("dump-features", cfg);
  SkillLibrary lib = load_library(cfg.library);
  if (lib.entries.empty()) throw std::runtime_error("dump-features: library has no skills");
  DiffusionSchedule sched = build_schedule(lib.diffusion_T);
  TrajectoryDataset ds = load_dataset(cfg.dataset);
  detail::NormalizedData data = detail::normalized_pairs(ds, lib.normalization);
  if (cfg.layer_index >= lib.base.spec.num_layers())
    throw std::invalid_argument("dump-features: layer index out of range");
  SeededRng rng(cfg.seed);
  std::ostringstream csv;
  csv << "skill,feature,noise,action\n";
  std::size_t rows = 0;
  for (const SkillEntry& entry : lib.entries) {
    std::vector<AdapterRef> ref{entry.adapter.ref(entry.adapter.scale)};
    for (std::size_t n = 0; n < cfg.feature_samples; ++n) {
      const std::size_t i = static_cast<std::size_t>(rng.next_below(data.states.size()));
      const std::vector<double>& s = data.states[i];
      std::vector<double> eps(data.actions[i].size());
      for (double& e : eps) e = rng.normal();
      std::vector<double> a1 = forward_noise(sched, data.actions[i], 1, eps);
      ForwardCache cache;
      std::vector<double> noise = lib.base.eval(s, a1, 1, sched.T, ref, &cache);
      const std::vector<double>& feat = cache.preacts[cfg.layer_index];
      SeededRng srng = rng.split();
      std::vector<double> action = sample_action(lib.base, s, sched, srng, true, ref);
      auto join = [](const std::vector<double>& v) {
        std::ostringstream os;
        for (std::size_t j = 0; j < v.size(); ++j) os << (j ? ";" : "") << v[j];
        return os.str();
      };
      csv << entry.name << "," << join(feat) << "," << join(noise) << "," << join(action)
          << "\n";
      ++rows;
    }
  }
  if (!cfg.csv_out.empty()) {
    std::ofstream out(cfg.csv_out);
    out << csv.str();
  }
  report.body["rows"] = rows;
  report.finalize(timer.seconds());
  report.write(cfg.out);
  return report;
}

inline RunReport cmd_gen_data(const RunConfig& cfg) {
  Timer timer;
  RunReport report("gen-data", cfg);
  TaskSpec task = cfg.make_task_spec();
  TrajectoryDataset ds = generate_dataset(task, cfg.policy_kind, cfg.episodes, cfg.seed);
  if (ds.transitions.empty()) throw std::runtime_error("gen-data: zero episodes requested");
  save_dataset(ds, cfg.dataset);
  report.body["transitions"] = ds.transitions.size();
  report.body["episodes"] = ds.num_episodes();
  report.finalize(timer.seconds());
  report.write(cfg.out);
  return report;
}

}  // namespace psec
