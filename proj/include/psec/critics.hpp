#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "psec/adam.hpp"
#include "psec/mlp.hpp"
#include "psec/rng.hpp"

namespace psec {

struct ExpectileConfig {
  double tau = 0.9;
  double gamma = 0.99;
  double target_rate = 1e-3;
  double clip = 100.0;  // ceiling for exp advantage weights

  void validate() const {
    if (!(tau > 0.5 && tau < 1.0)) throw std::invalid_argument("tau must be in (0.5, 1)");
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must be in (0, 1)");
    if (!(target_rate > 0.0 && target_rate <= 1.0))
      throw std::invalid_argument("target_rate must be in (0, 1]");
  }
};

// L^tau(u) = |tau - I(u<0)| u^2
inline double expectile_loss(double u, double tau) {
  const double w = std::abs(tau - (u < 0.0 ? 1.0 : 0.0));
  return w * u * u;
}

// L^tau_rev(u) = |tau - I(u>0)| u^2
inline double reversed_expectile_loss(double u, double tau) {
  const double w = std::abs(tau - (u > 0.0 ? 1.0 : 0.0));
  return w * u * u;
}

// target <- (1 - rate) * target + rate * online
inline void soft_update(ParamStore& target, const ParamStore& online, double rate) {
  for (const auto& name : target.names) {
    Matrix& t = target.at(name);
    const Matrix& o = online.at(name);
    check_shape(t.same_shape(o), "soft_update " + name);
    for (std::size_t i = 0; i < t.data.size(); ++i)
      t.data[i] = (1.0 - rate) * t.data[i] + rate * o.data[i];
  }
}

// Scalar-output net with its own optimizer state.
struct ScalarNet {
  MlpSpec spec;
  ParamStore params;
  AdamState adam;

  double eval(const std::vector<double>& in) const {
    return mlp_forward(spec, params, in)[0];
  }
};

inline ScalarNet make_scalar_net(std::size_t in_dim, std::size_t hidden,
                                 std::size_t hidden_layers, SeededRng& rng) {
  ScalarNet n;
  n.spec.layer_dims.push_back(in_dim);
  for (std::size_t i = 0; i < hidden_layers; ++i) n.spec.layer_dims.push_back(hidden);
  n.spec.layer_dims.push_back(1);
  n.params = init_mlp_params(n.spec, rng);
  n.adam = AdamState::init(n.params);
  return n;
}

struct CriticSet {
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  // reward objective
  ScalarNet qr1, qr2, vr;
  ParamStore tqr1, tqr2;
  // feasibility objective
  ScalarNet qh1, qh2, vh;
  ParamStore tqh1, tqh2;
};

inline CriticSet make_critic_set(std::size_t state_dim, std::size_t action_dim,
                                 std::size_t hidden, std::size_t hidden_layers,
                                 SeededRng& rng) {
  CriticSet c;
  c.state_dim = state_dim;
  c.action_dim = action_dim;
  const std::size_t qa = state_dim + action_dim;
  c.qr1 = make_scalar_net(qa, hidden, hidden_layers, rng);
  c.qr2 = make_scalar_net(qa, hidden, hidden_layers, rng);
  c.vr = make_scalar_net(state_dim, hidden, hidden_layers, rng);
  c.qh1 = make_scalar_net(qa, hidden, hidden_layers, rng);
  c.qh2 = make_scalar_net(qa, hidden, hidden_layers, rng);
  c.vh = make_scalar_net(state_dim, hidden, hidden_layers, rng);
  c.tqr1 = c.qr1.params;
  c.tqr2 = c.qr2.params;
  c.tqh1 = c.qh1.params;
  c.tqh2 = c.qh2.params;
  return c;
}

inline std::vector<double> concat_sa(const std::vector<double>& s,
                                     const std::vector<double>& a) {
  std::vector<double> sa;
  sa.reserve(s.size() + a.size());
  sa.insert(sa.end(), s.begin(), s.end());
  sa.insert(sa.end(), a.begin(), a.end());
  return sa;
}

struct CriticBatchItem {
  std::vector<double> s;
  std::vector<double> a;
  double signal = 0.0;  // reward r, or feasibility label h in {0,1}
  std::vector<double> s_next;
};

struct CriticLosses {
  double v_loss = 0.0;
  double q_loss = 0.0;
};

namespace detail {

// One gradient step of a scalar net toward per-sample output gradients.
struct ScalarNetPass {
  ParamStore grads;
  ForwardCache cache;

  explicit ScalarNetPass(const ScalarNet& net) : grads(net.params.zeros_like()) {}

  double forward(const ScalarNet& net, const std::vector<double>& in) {
    return mlp_forward(net.spec, net.params, {}, in, &cache)[0];
  }

  void backward(const ScalarNet& net, double out_grad) {
    mlp_backward(net.spec, net.params, cache, {out_grad}, &grads);
  }
};

}  // namespace detail

// Expectile update of V_r toward min target Q, MSE update of both Q_r
// toward r + gamma * V_r(s'), then soft target update.
inline CriticLosses update_reward_critics(CriticSet& c,
                                          const std::vector<CriticBatchItem>& batch,
                                          const ExpectileConfig& cfg, double lr) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("update_reward_critics: empty batch");
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  CriticLosses losses;

  detail::ScalarNetPass vp(c.vr), q1p(c.qr1), q2p(c.qr2);
  for (const CriticBatchItem& it : batch) {
    std::vector<double> sa = concat_sa(it.s, it.a);
    const double tq = std::min(mlp_forward(c.qr1.spec, c.tqr1, sa)[0],
                               mlp_forward(c.qr2.spec, c.tqr2, sa)[0]);
    const double v = vp.forward(c.vr, it.s);
    const double u = tq - v;
    if (!std::isfinite(u)) throw std::runtime_error("update_reward_critics: non-finite target");
    losses.v_loss += expectile_loss(u, cfg.tau) * inv_n;
    const double w = std::abs(cfg.tau - (u < 0.0 ? 1.0 : 0.0));
    vp.backward(c.vr, -2.0 * w * u * inv_n);

    const double y = it.signal + cfg.gamma * c.vr.eval(it.s_next);
    const double q1 = q1p.forward(c.qr1, sa);
    q1p.backward(c.qr1, 2.0 * (q1 - y) * inv_n);
    const double q2 = q2p.forward(c.qr2, sa);
    q2p.backward(c.qr2, 2.0 * (q2 - y) * inv_n);
    losses.q_loss += ((q1 - y) * (q1 - y) + (q2 - y) * (q2 - y)) * 0.5 * inv_n;
  }
  adam_step(c.vr.params, vp.grads, c.vr.adam, lr);
  adam_step(c.qr1.params, q1p.grads, c.qr1.adam, lr);
  adam_step(c.qr2.params, q2p.grads, c.qr2.adam, lr);
  soft_update(c.tqr1, c.qr1.params, cfg.target_rate);
  soft_update(c.tqr2, c.qr2.params, cfg.target_rate);
  return losses;
}

// Feasibility backup: Q_h regresses to (1-gamma) h + gamma max{h, V_h(s')},
// V_h minimizes the reversed expectile loss against min target Q_h.
inline CriticLosses update_feasibility_critics(CriticSet& c,
                                               const std::vector<CriticBatchItem>& batch,
                                               const ExpectileConfig& cfg, double lr) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("update_feasibility_critics: empty batch");
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  CriticLosses losses;

  detail::ScalarNetPass vp(c.vh), q1p(c.qh1), q2p(c.qh2);
  for (const CriticBatchItem& it : batch) {
    const double h = it.signal;
    if (h != 0.0 && h != 1.0)
      throw std::invalid_argument("update_feasibility_critics: h must be 0 or 1");
    std::vector<double> sa = concat_sa(it.s, it.a);
    // V_h clamped to [0,1] inside the backup
    const double vnext = std::clamp(c.vh.eval(it.s_next), 0.0, 1.0);
    const double y = (1.0 - cfg.gamma) * h + cfg.gamma * std::max(h, vnext);
    const double q1 = q1p.forward(c.qh1, sa);
    q1p.backward(c.qh1, 2.0 * (q1 - y) * inv_n);
    const double q2 = q2p.forward(c.qh2, sa);
    q2p.backward(c.qh2, 2.0 * (q2 - y) * inv_n);
    losses.q_loss += ((q1 - y) * (q1 - y) + (q2 - y) * (q2 - y)) * 0.5 * inv_n;

    const double tq = std::min(mlp_forward(c.qh1.spec, c.tqh1, sa)[0],
                               mlp_forward(c.qh2.spec, c.tqh2, sa)[0]);
    const double v = vp.forward(c.vh, it.s);
    const double u = tq - v;
    losses.v_loss += reversed_expectile_loss(u, cfg.tau) * inv_n;
    const double w = std::abs(cfg.tau - (u > 0.0 ? 1.0 : 0.0));
    vp.backward(c.vh, -2.0 * w * u * inv_n);
  }
  adam_step(c.vh.params, vp.grads, c.vh.adam, lr);
  adam_step(c.qh1.params, q1p.grads, c.qh1.adam, lr);
  adam_step(c.qh2.params, q2p.grads, c.qh2.adam, lr);
  soft_update(c.tqh1, c.qh1.params, cfg.target_rate);
  soft_update(c.tqh2, c.qh2.params, cfg.target_rate);
  return losses;
}

inline double clip_weight(double w, double clip) {
  return std::clamp(w, std::exp(-10.0), clip);
}

// exp(A_r) with A_r = min Q_r(s,a) - V_r(s)
inline double reward_weight(const CriticSet& c, const std::vector<double>& s,
                            const std::vector<double>& a, double clip) {
  std::vector<double> sa = concat_sa(s, a);
  const double q = std::min(c.qr1.eval(sa), c.qr2.eval(sa));
  const double adv = q - c.vr.eval(s);
  return clip_weight(std::exp(std::min(adv, std::log(clip) + 1.0)), clip);
}

// exp(-A_h) with A_h = min Q_h(s,a) - V_h(s)
inline double safety_weight(const CriticSet& c, const std::vector<double>& s,
                            const std::vector<double>& a, double clip) {
  std::vector<double> sa = concat_sa(s, a);
  const double q = std::min(c.qh1.eval(sa), c.qh2.eval(sa));
  const double adv = q - c.vh.eval(s);
  return clip_weight(std::exp(std::min(-adv, std::log(clip) + 1.0)), clip);
}

}  // namespace psec
