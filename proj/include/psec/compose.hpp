#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "psec/adam.hpp"
#include "psec/diffusion.hpp"
#include "psec/envs.hpp"
#include "psec/lora.hpp"
#include "psec/mlp.hpp"

namespace psec {

enum class CompositionMode { ParameterLevel, NoiseLevel, ActionLevel, Fixed };

inline std::string composition_mode_name(CompositionMode m) {
  switch (m) {
    case CompositionMode::ParameterLevel: return "parameter";
    case CompositionMode::NoiseLevel: return "noise";
    case CompositionMode::ActionLevel: return "action";
    case CompositionMode::Fixed: return "fixed";
  }
  return "?";
}

inline CompositionMode composition_mode_from_name(const std::string& s) {
  if (s == "parameter") return CompositionMode::ParameterLevel;
  if (s == "noise") return CompositionMode::NoiseLevel;
  if (s == "action") return CompositionMode::ActionLevel;
  if (s == "fixed") return CompositionMode::Fixed;
  throw std::invalid_argument("unknown composition mode: " + s);
}

// State-conditioned weight head alpha(s) in R^k. The output layer starts at
// zero so an untrained composer reproduces the base policy.
struct CompositionNet {
  std::size_t state_dim = 0;
  std::size_t k = 0;
  MlpSpec spec;
  ParamStore params;

  std::vector<double> forward(const std::vector<double>& s_norm,
                              ForwardCache* cache = nullptr) const {
    return mlp_forward(spec, params, {}, s_norm, cache);
  }
};

inline CompositionNet make_composition_net(std::size_t state_dim, std::size_t k,
                                           std::size_t hidden, std::size_t hidden_layers,
                                           SeededRng& rng) {
  if (k == 0) throw std::invalid_argument("make_composition_net: k must be >= 1");
  CompositionNet net;
  net.state_dim = state_dim;
  net.k = k;
  net.spec.layer_dims.push_back(state_dim);
  for (std::size_t i = 0; i < hidden_layers; ++i) net.spec.layer_dims.push_back(hidden);
  net.spec.layer_dims.push_back(k);
  net.params = init_mlp_params(net.spec, rng);
  const std::size_t last = net.spec.num_layers() - 1;
  net.params.at(weight_name(last)).fill(0.0);
  net.params.at(bias_name(last)).fill(0.0);
  return net;
}

inline std::vector<double> alpha_forward(const CompositionNet& net,
                                         const std::vector<double>& s_norm) {
  return net.forward(s_norm);
}

// Build per-layer weight deltas for all skills at the given alphas. With
// scaled deltas (default), alpha_i = 1 reproduces skill i exactly.
inline std::vector<AdapterRef> composition_refs(
    const std::vector<const LoraAdapter*>& skills, const std::vector<double>& alphas,
    bool raw_delta = false) {
  if (skills.size() != alphas.size())
    throw std::invalid_argument("composition: |alphas| != number of skills");
  std::vector<AdapterRef> refs;
  refs.reserve(skills.size());
  for (std::size_t i = 0; i < skills.size(); ++i) {
    const double c = raw_delta ? alphas[i] : alphas[i] * skills[i]->scale;
    refs.push_back(AdapterRef{&skills[i]->b_mats, &skills[i]->a_mats, c});
  }
  return refs;
}

// Parameter-level composition: eval through W0 + sum alpha_i * scale_i B_i A_i.
inline std::vector<double> composed_noise_parameter(
    const NoisePredictor& base, const std::vector<const LoraAdapter*>& skills,
    const std::vector<double>& alphas, const std::vector<double>& a_t, std::size_t t,
    std::size_t T, const std::vector<double>& s, bool raw_delta = false) {
  return base.eval(s, a_t, t, T, composition_refs(skills, alphas, raw_delta));
}

// Noise-level composition: eps = eps_0 + sum alpha_i eps_i, each eps_i from
// skill i's fully adapted predictor.
inline std::vector<double> composed_noise_noise_level(
    const NoisePredictor& base, const std::vector<const LoraAdapter*>& skills,
    const std::vector<double>& alphas, const std::vector<double>& a_t, std::size_t t,
    std::size_t T, const std::vector<double>& s) {
  if (skills.size() != alphas.size())
    throw std::invalid_argument("composition: |alphas| != number of skills");
  std::vector<double> eps = base.eval(s, a_t, t, T);
  for (std::size_t i = 0; i < skills.size(); ++i) {
    std::vector<AdapterRef> ref{skills[i]->ref(skills[i]->scale)};
    std::vector<double> eps_i = base.eval(s, a_t, t, T, ref);
    axpy(eps, alphas[i], eps_i);
  }
  return eps;
}

// Action-level composition: a = a_0 + sum alpha_i a_i, independently sampled.
inline std::vector<double> composed_action_action_level(
    const NoisePredictor& base, const std::vector<const LoraAdapter*>& skills,
    const std::vector<double>& alphas, const DiffusionSchedule& sched,
    const std::vector<double>& s, SeededRng& rng, bool clamp = true) {
  if (skills.size() != alphas.size())
    throw std::invalid_argument("composition: |alphas| != number of skills");
  std::vector<double> a = sample_action(base, s, sched, rng, false);
  for (std::size_t i = 0; i < skills.size(); ++i) {
    std::vector<AdapterRef> ref{skills[i]->ref(skills[i]->scale)};
    std::vector<double> a_i = sample_action(base, s, sched, rng, false, ref);
    axpy(a, alphas[i], a_i);
  }
  if (clamp) {
    for (double& v : a) v = std::clamp(v, -1.0, 1.0);
  }
  return a;
}

struct ComposedPolicy {
  const NoisePredictor* base = nullptr;
  const DiffusionSchedule* sched = nullptr;
  std::vector<const LoraAdapter*> skills;
  CompositionMode mode = CompositionMode::ParameterLevel;
  CompositionNet composer;                // unused in Fixed mode
  std::vector<double> fixed_alphas;       // Fixed mode only
  bool raw_delta = false;

  std::vector<double> alphas_for(const std::vector<double>& s_norm) const {
    if (mode == CompositionMode::Fixed) return fixed_alphas;
    return composer.forward(s_norm);
  }

  // Draw one action; s_norm must be in the space the nets were trained on.
  std::vector<double> sample(const std::vector<double>& s_norm, SeededRng& rng,
                             bool clamp = true) const {
    std::vector<double> alphas = alphas_for(s_norm);
    switch (mode) {
      case CompositionMode::ActionLevel:
        return composed_action_action_level(*base, skills, alphas, *sched, s_norm, rng,
                                            clamp);
      case CompositionMode::NoiseLevel:
        return sample_action_with(
            *sched, base->action_dim,
            [&](const std::vector<double>& a_t, std::size_t t) {
              return composed_noise_noise_level(*base, skills, alphas, a_t, t, sched->T,
                                                s_norm);
            },
            rng, clamp);
      case CompositionMode::ParameterLevel:
      case CompositionMode::Fixed: {
        std::vector<AdapterRef> refs = composition_refs(skills, alphas, raw_delta);
        return sample_action(*base, s_norm, *sched, rng, clamp, refs);
      }
    }
    throw std::logic_error("unreachable");
  }
};

// Keep trajectories with total cost < cost_ceiling, then the K highest-return
// among them; ties broken by earlier episode index.
struct FilterResult {
  TrajectoryDataset dataset;
  bool truncated_warning = false;  // fewer than K qualifying episodes
};

inline FilterResult filter_top_trajectories(const TrajectoryDataset& ds, std::size_t K,
                                            double cost_ceiling) {
  struct EpStat {
    int ep;
    double ret;
    double cost;
  };
  std::vector<EpStat> stats;
  const std::size_t n_eps = ds.num_episodes();
  for (std::size_t e = 0; e < n_eps; ++e) {
    const int ep = static_cast<int>(e);
    stats.push_back({ep, ds.episode_return(ep), ds.episode_cost(ep)});
  }
  std::vector<EpStat> qualifying;
  for (const EpStat& st : stats)
    if (st.cost < cost_ceiling) qualifying.push_back(st);
  std::stable_sort(qualifying.begin(), qualifying.end(),
                   [](const EpStat& a, const EpStat& b) { return a.ret > b.ret; });
  FilterResult res;
  res.truncated_warning = qualifying.size() < K;
  if (qualifying.size() > K) qualifying.resize(K);
  std::vector<bool> keep(n_eps, false);
  for (const EpStat& st : qualifying) keep[static_cast<std::size_t>(st.ep)] = true;
  for (const Transition& tr : ds.transitions)
    if (keep[static_cast<std::size_t>(tr.ep)]) res.dataset.transitions.push_back(tr);
  if (!res.dataset.transitions.empty()) res.dataset.compute_stats();
  return res;
}

// One denoising sample of the composed predictor (Parameter or Noise mode):
// returns grad_scale * ||eps_hat - eps||^2 and accumulates d/dtheta into
// theta_grads. Only the composer receives gradients.
inline double composer_sample_grad(const ComposedPolicy& policy,
                                   const std::vector<double>& s,
                                   const std::vector<double>& a0, std::size_t t,
                                   const std::vector<double>& eps, double grad_scale,
                                   ParamStore* theta_grads) {
  const NoisePredictor& base = *policy.base;
  const DiffusionSchedule& sched = *policy.sched;
  const CompositionNet& net = policy.composer;
  const std::size_t k = policy.skills.size();
  ForwardCache comp_cache, pred_cache;
  std::vector<double> alphas = net.forward(s, &comp_cache);
  std::vector<double> dalpha(k, 0.0);
  std::vector<double> a_t = forward_noise(sched, a0, t, eps);
  double loss = 0.0;
  if (policy.mode == CompositionMode::ParameterLevel) {
    std::vector<AdapterRef> refs = composition_refs(policy.skills, alphas, policy.raw_delta);
    std::vector<double> pred = base.eval(s, a_t, t, sched.T, refs, &pred_cache);
    std::vector<double> out_grad(pred.size());
    for (std::size_t j = 0; j < pred.size(); ++j) {
      const double r = pred[j] - eps[j];
      loss += r * r * grad_scale;
      out_grad[j] = 2.0 * r * grad_scale;
    }
    std::vector<double> coeff_grads(k, 0.0);
    std::vector<AdapterGrad> sinks(k);
    for (std::size_t i = 0; i < k; ++i) sinks[i].coeff_grad = &coeff_grads[i];
    mlp_backward(base.spec, base.params, refs, pred_cache, out_grad, nullptr, &sinks);
    for (std::size_t i = 0; i < k; ++i) {
      const double chain = policy.raw_delta ? 1.0 : policy.skills[i]->scale;
      dalpha[i] = coeff_grads[i] * chain;
    }
  } else if (policy.mode == CompositionMode::NoiseLevel) {
    std::vector<double> pred = base.eval(s, a_t, t, sched.T);
    std::vector<std::vector<double>> eps_i(k);
    for (std::size_t i = 0; i < k; ++i) {
      std::vector<AdapterRef> ref{policy.skills[i]->ref(policy.skills[i]->scale)};
      eps_i[i] = base.eval(s, a_t, t, sched.T, ref);
      axpy(pred, alphas[i], eps_i[i]);
    }
    for (std::size_t j = 0; j < pred.size(); ++j) {
      const double r = pred[j] - eps[j];
      loss += r * r * grad_scale;
      for (std::size_t i = 0; i < k; ++i) dalpha[i] += 2.0 * r * eps_i[i][j] * grad_scale;
    }
  } else {
    throw std::invalid_argument("composer_sample_grad: Parameter or Noise mode only");
  }
  if (theta_grads)
    mlp_backward(net.spec, net.params, {}, comp_cache, dalpha, theta_grads, nullptr);
  return loss;
}

// Train the composer by denoising imitation: gradients reach only theta,
// through the alphas. Base and all skill adapters stay frozen.
inline TrainCurve train_composer(ComposedPolicy& policy,
                                 const std::vector<std::vector<double>>& states_norm,
                                 const std::vector<std::vector<double>>& actions,
                                 std::size_t steps, double lr, std::size_t batch_size,
                                 SeededRng& rng) {
  if (policy.mode == CompositionMode::Fixed)
    throw std::invalid_argument("train_composer: Fixed mode has nothing to train");
  if (states_norm.empty() || states_norm.size() != actions.size())
    throw std::invalid_argument("train_composer: bad dataset");
  const NoisePredictor& base = *policy.base;
  const DiffusionSchedule& sched = *policy.sched;
  CompositionNet& net = policy.composer;
  const std::size_t k = policy.skills.size();
  AdamState adam = AdamState::init(net.params);
  TrainCurve curve;
  ForwardCache comp_cache, pred_cache;
  for (std::size_t step = 0; step < steps; ++step) {
    ParamStore theta_grads = net.params.zeros_like();
    double loss = 0.0;
    const double inv_n = 1.0 / static_cast<double>(batch_size);
    for (std::size_t bi = 0; bi < batch_size; ++bi) {
      const std::size_t idx = static_cast<std::size_t>(rng.next_below(states_norm.size()));
      const std::vector<double>& s = states_norm[idx];
      const std::vector<double>& a0 = actions[idx];
      std::vector<double> alphas = net.forward(s, &comp_cache);
      std::vector<double> dalpha(k, 0.0);
      if (policy.mode == CompositionMode::ActionLevel) {
        // per-skill samples treated as constants within the step
        std::vector<double> a = sample_action(base, s, sched, rng, false);
        std::vector<std::vector<double>> skill_actions(k);
        for (std::size_t i = 0; i < k; ++i) {
          std::vector<AdapterRef> ref{policy.skills[i]->ref(policy.skills[i]->scale)};
          skill_actions[i] = sample_action(base, s, sched, rng, false, ref);
          axpy(a, alphas[i], skill_actions[i]);
        }
        for (std::size_t j = 0; j < a.size(); ++j) {
          const double r = a[j] - a0[j];
          loss += r * r * inv_n;
          for (std::size_t i = 0; i < k; ++i) dalpha[i] += 2.0 * r * skill_actions[i][j] * inv_n;
        }
        mlp_backward(net.spec, net.params, {}, comp_cache, dalpha, &theta_grads, nullptr);
      } else {
        const std::size_t t = 1 + static_cast<std::size_t>(rng.next_below(sched.T));
        std::vector<double> eps(a0.size());
        for (double& e : eps) e = rng.normal();
        loss += composer_sample_grad(policy, s, a0, t, eps, inv_n, &theta_grads);
      }
    }
    if (!std::isfinite(loss))
      throw std::runtime_error("train_composer: non-finite loss at step " +
                               std::to_string(step));
    adam_step(net.params, theta_grads, adam, lr);
    curve.losses.push_back(loss);
  }
  return curve;
}

// Denoising loss of the composed policy on a held-out set (no gradients).
inline double composed_denoise_loss(const ComposedPolicy& policy,
                                    const std::vector<std::vector<double>>& states_norm,
                                    const std::vector<std::vector<double>>& actions,
                                    SeededRng& rng, std::size_t samples) {
  const NoisePredictor& base = *policy.base;
  const DiffusionSchedule& sched = *policy.sched;
  double loss = 0.0;
  for (std::size_t n = 0; n < samples; ++n) {
    const std::size_t idx = static_cast<std::size_t>(rng.next_below(states_norm.size()));
    const std::vector<double>& s = states_norm[idx];
    const std::vector<double>& a0 = actions[idx];
    std::vector<double> alphas = policy.alphas_for(s);
    const std::size_t t = 1 + static_cast<std::size_t>(rng.next_below(sched.T));
    std::vector<double> eps(a0.size());
    for (double& e : eps) e = rng.normal();
    std::vector<double> a_t = forward_noise(sched, a0, t, eps);
    std::vector<double> pred;
    if (policy.mode == CompositionMode::NoiseLevel) {
      pred = composed_noise_noise_level(base, policy.skills, alphas, a_t, t, sched.T, s);
    } else {
      pred = composed_noise_parameter(base, policy.skills, alphas, a_t, t, sched.T, s,
                                      policy.raw_delta);
    }
    for (std::size_t j = 0; j < pred.size(); ++j) {
      const double r = pred[j] - eps[j];
      loss += r * r;
    }
  }
  return loss / static_cast<double>(samples);
}

}  // namespace psec
