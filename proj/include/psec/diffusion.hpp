#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "psec/mlp.hpp"
#include "psec/rng.hpp"

namespace psec {

// Variance schedule for T denoising steps. Index 1..T; rho_bar[0] = 1.
struct DiffusionSchedule {
  std::size_t T = 0;
  std::vector<double> beta;     // beta[0] unused
  std::vector<double> rho;      // 1 - beta
  std::vector<double> rho_bar;  // running product of rho

  void validate() const {
    if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
    for (std::size_t t = 1; t <= T; ++t) {
      if (!(beta[t] > 0.0 && beta[t] < 1.0))
        throw std::runtime_error("schedule: beta out of (0,1)");
      if (!(rho_bar[t] < rho_bar[t - 1]))
        throw std::runtime_error("schedule: rho_bar not strictly decreasing");
    }
    if (!(rho_bar[T] < 0.05)) throw std::runtime_error("schedule: rho_bar[T] too large");
  }
};

// Cosine-style schedule, well behaved at very small T.
inline DiffusionSchedule build_schedule(std::size_t T) {
  if (T == 0) throw std::invalid_argument("build_schedule: T must be >= 1");
  auto g = [T](double u) {
    double x = (u / static_cast<double>(T) + 0.008) / 1.008 * std::numbers::pi / 2.0;
    double c = std::cos(x);
    return c * c;
  };
  DiffusionSchedule s;
  s.T = T;
  s.beta.assign(T + 1, 0.0);
  s.rho.assign(T + 1, 0.0);
  s.rho_bar.assign(T + 1, 1.0);
  const double g0 = g(0.0);
  double prev = 1.0;
  for (std::size_t t = 1; t <= T; ++t) {
    double target = g(static_cast<double>(t)) / g0;
    double beta = 1.0 - target / prev;
    beta = std::min(beta, 0.999);
    s.beta[t] = beta;
    s.rho[t] = 1.0 - beta;
    s.rho_bar[t] = s.rho_bar[t - 1] * s.rho[t];
    prev = target;
  }
  s.validate();
  return s;
}

// 16-dim sinusoidal features of t/T.
inline std::vector<double> time_embedding(std::size_t t, std::size_t T) {
  constexpr std::size_t kDim = 16;
  std::vector<double> emb(kDim);
  const double u = static_cast<double>(t) / static_cast<double>(T);
  for (std::size_t j = 0; j < kDim / 2; ++j) {
    const double w = std::pow(2.0, static_cast<double>(j)) * std::numbers::pi;
    emb[2 * j] = std::sin(w * u);
    emb[2 * j + 1] = std::cos(w * u);
  }
  return emb;
}

constexpr std::size_t kTimeEmbedDim = 16;

// Conditional noise network eps(a_t, t, s). Input layout:
// concat(state, noisy action, time embedding).
struct NoisePredictor {
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  MlpSpec spec;
  ParamStore params;

  std::vector<double> make_input(const std::vector<double>& s,
                                 const std::vector<double>& a_t, std::size_t t,
                                 std::size_t T) const {
    std::vector<double> in;
    in.reserve(state_dim + action_dim + kTimeEmbedDim);
    in.insert(in.end(), s.begin(), s.end());
    in.insert(in.end(), a_t.begin(), a_t.end());
    std::vector<double> emb = time_embedding(t, T);
    in.insert(in.end(), emb.begin(), emb.end());
    return in;
  }

  std::vector<double> eval(const std::vector<double>& s, const std::vector<double>& a_t,
                           std::size_t t, std::size_t T,
                           const std::vector<AdapterRef>& adapters = {},
                           ForwardCache* cache = nullptr) const {
    return mlp_forward(spec, params, adapters, make_input(s, a_t, t, T), cache);
  }
};

inline NoisePredictor make_noise_predictor(std::size_t state_dim, std::size_t action_dim,
                                           std::size_t hidden, std::size_t hidden_layers,
                                           SeededRng& rng) {
  NoisePredictor p;
  p.state_dim = state_dim;
  p.action_dim = action_dim;
  p.spec.layer_dims.push_back(state_dim + action_dim + kTimeEmbedDim);
  for (std::size_t i = 0; i < hidden_layers; ++i) p.spec.layer_dims.push_back(hidden);
  p.spec.layer_dims.push_back(action_dim);
  p.params = init_mlp_params(p.spec, rng);
  return p;
}

enum class WeightKind { Unit, RewardAdvantage, SafetyAdvantage };

// a_t = sqrt(rho_bar[t]) a0 + sqrt(1 - rho_bar[t]) eps
inline std::vector<double> forward_noise(const DiffusionSchedule& sched,
                                         const std::vector<double>& a0, std::size_t t,
                                         const std::vector<double>& eps) {
  if (t < 1 || t > sched.T) throw std::invalid_argument("forward_noise: t out of range");
  check_shape(a0.size() == eps.size(), "forward_noise eps");
  const double c0 = std::sqrt(sched.rho_bar[t]);
  const double c1 = std::sqrt(1.0 - sched.rho_bar[t]);
  std::vector<double> a_t(a0.size());
  for (std::size_t i = 0; i < a0.size(); ++i) a_t[i] = c0 * a0[i] + c1 * eps[i];
  return a_t;
}

struct DenoiseBatchItem {
  const std::vector<double>* state = nullptr;
  const std::vector<double>* action = nullptr;
  double weight = 1.0;
  // test rigging: pin the step / noise draw instead of sampling them
  std::size_t fixed_t = 0;                          // 0 = draw uniformly
  const std::vector<double>* fixed_eps = nullptr;   // null = draw N(0, I)
};

// Weighted denoising loss over a batch, with gradients routed into the
// requested sinks (base params and/or adapter factors).
inline double diffusion_loss(const NoisePredictor& predictor, const DiffusionSchedule& sched,
                             const std::vector<DenoiseBatchItem>& batch, SeededRng& rng,
                             const std::vector<AdapterRef>& adapters = {},
                             ParamStore* base_grads = nullptr,
                             std::vector<AdapterGrad>* adapter_grads = nullptr) {
  if (batch.empty()) throw std::invalid_argument("diffusion_loss: empty batch");
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  ForwardCache cache;
  for (const DenoiseBatchItem& item : batch) {
    if (!(item.weight >= 0.0)) throw std::invalid_argument("diffusion_loss: negative weight");
    const std::size_t t =
        item.fixed_t != 0 ? item.fixed_t
                          : 1 + static_cast<std::size_t>(rng.next_below(sched.T));
    std::vector<double> eps;
    if (item.fixed_eps) {
      eps = *item.fixed_eps;
    } else {
      eps.resize(item.action->size());
      for (double& e : eps) e = rng.normal();
    }
    std::vector<double> a_t = forward_noise(sched, *item.action, t, eps);
    std::vector<double> pred =
        predictor.eval(*item.state, a_t, t, sched.T, adapters, &cache);
    std::vector<double> out_grad(pred.size());
    double sq = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double r = pred[i] - eps[i];
      sq += r * r;
      out_grad[i] = 2.0 * item.weight * r * inv_n;
    }
    loss += item.weight * sq * inv_n;
    if (base_grads || adapter_grads) {
      mlp_backward(predictor.spec, predictor.params, adapters, cache, out_grad, base_grads,
                   adapter_grads);
    }
  }
  if (!std::isfinite(loss)) throw std::runtime_error("diffusion_loss: non-finite loss");
  return loss;
}

using NoiseFn =
    std::function<std::vector<double>(const std::vector<double>& a_t, std::size_t t)>;

// Reverse sampler with an arbitrary noise source; z = 0 at the final step.
// gauss_override replaces every Gaussian draw (test rigging).
inline std::vector<double> sample_action_with(const DiffusionSchedule& sched,
                                              std::size_t action_dim, const NoiseFn& noise_fn,
                                              SeededRng& rng, bool clamp,
                                              const std::function<double()>* gauss_override =
                                                  nullptr) {
  auto draw = [&]() { return gauss_override ? (*gauss_override)() : rng.normal(); };
  std::vector<double> a(action_dim);
  for (double& v : a) v = draw();
  for (std::size_t t = sched.T; t >= 1; --t) {
    std::vector<double> eps = noise_fn(a, t);
    const double c = sched.beta[t] / std::sqrt(1.0 - sched.rho_bar[t]);
    const double inv_sqrt_rho = 1.0 / std::sqrt(sched.rho[t]);
    for (std::size_t i = 0; i < action_dim; ++i) {
      double mu = (a[i] - c * eps[i]) * inv_sqrt_rho;
      a[i] = t > 1 ? mu + std::sqrt(sched.beta[t]) * draw() : mu;
    }
  }
  if (clamp) {
    for (double& v : a) v = std::clamp(v, -1.0, 1.0);
  }
  return a;
}

inline std::vector<double> sample_action(const NoisePredictor& predictor,
                                         const std::vector<double>& s,
                                         const DiffusionSchedule& sched, SeededRng& rng,
                                         bool clamp,
                                         const std::vector<AdapterRef>& adapters = {}) {
  return sample_action_with(
      sched, predictor.action_dim,
      [&](const std::vector<double>& a_t, std::size_t t) {
        return predictor.eval(s, a_t, t, sched.T, adapters);
      },
      rng, clamp);
}

}  // namespace psec
