#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "psec/adam.hpp"
#include "psec/diffusion.hpp"
#include "psec/mlp.hpp"

namespace psec {

// Low-rank factors beside every linear layer of the base predictor.
// Effective delta at blend c is c * B_l A_l per layer.
struct LoraAdapter {
  std::vector<Matrix> b_mats;  // d_out x n, zero at init
  std::vector<Matrix> a_mats;  // n x d_in
  std::size_t rank = 0;
  double scale = 16.0;

  AdapterRef ref(double coeff) const { return AdapterRef{&b_mats, &a_mats, coeff}; }

  ParamStore as_params() const {
    ParamStore p;
    for (std::size_t l = 0; l < b_mats.size(); ++l) {
      p.add("layer" + std::to_string(l) + ".B", b_mats[l]);
      p.add("layer" + std::to_string(l) + ".A", a_mats[l]);
    }
    return p;
  }

  void load_params(const ParamStore& p) {
    for (std::size_t l = 0; l < b_mats.size(); ++l) {
      b_mats[l] = p.at("layer" + std::to_string(l) + ".B");
      a_mats[l] = p.at("layer" + std::to_string(l) + ".A");
    }
  }

  LoraAdapter zeros_like() const {
    LoraAdapter z = *this;
    for (Matrix& m : z.b_mats) m.fill(0.0);
    for (Matrix& m : z.a_mats) m.fill(0.0);
    return z;
  }
};

// A ~ N(0, 1/sqrt(n)), B = 0, so the adapter starts as an exact no-op.
// The per-layer rank is capped at min(d_in, d_out); requesting a rank that
// no layer can hold is an error.
inline LoraAdapter init_adapter(const MlpSpec& base_spec, std::size_t rank, SeededRng& rng,
                                double scale = 16.0) {
  if (rank < 1) throw std::invalid_argument("init_adapter: rank must be >= 1");
  std::size_t widest = 0;
  for (std::size_t l = 0; l < base_spec.num_layers(); ++l)
    widest = std::max(widest,
                      std::min(base_spec.layer_dims[l], base_spec.layer_dims[l + 1]));
  if (rank > widest)
    throw std::invalid_argument("init_adapter: rank " + std::to_string(rank) +
                                " exceeds every layer's min dimension " +
                                std::to_string(widest));
  LoraAdapter ad;
  ad.rank = rank;
  ad.scale = scale;
  for (std::size_t l = 0; l < base_spec.num_layers(); ++l) {
    const std::size_t d_in = base_spec.layer_dims[l];
    const std::size_t d_out = base_spec.layer_dims[l + 1];
    const std::size_t n = std::min({rank, d_in, d_out});
    const double std_a = 1.0 / std::sqrt(static_cast<double>(n));
    ad.b_mats.emplace_back(d_out, n);
    Matrix a(n, d_in);
    for (double& v : a.data) v = std_a * rng.normal();
    ad.a_mats.push_back(std::move(a));
  }
  return ad;
}

// h_out = W0 h_in + alpha * B (A h_in), low-rank-first.
inline std::vector<double> lora_forward(const Matrix& w0, const Matrix& b, const Matrix& a,
                                        double alpha, const std::vector<double>& h_in) {
  std::vector<double> out = matvec(w0, h_in);
  std::vector<double> mid = matvec(a, h_in);
  std::vector<double> delta = matvec(b, mid);
  axpy(out, alpha, delta);
  return out;
}

// Materialize W = W0 + sum_i alphas[i] * scale_i * B_i A_i into a standalone
// predictor checkpoint.
inline NoisePredictor merge_static(const NoisePredictor& base,
                                   const std::vector<const LoraAdapter*>& adapters,
                                   const std::vector<double>& alphas) {
  if (adapters.size() != alphas.size())
    throw std::invalid_argument("merge_static: adapters/alphas length mismatch");
  NoisePredictor merged = base;
  for (std::size_t l = 0; l < base.spec.num_layers(); ++l) {
    Matrix& w = merged.params.at(weight_name(l));
    for (std::size_t i = 0; i < adapters.size(); ++i) {
      const LoraAdapter& ad = *adapters[i];
      if (ad.b_mats.size() != base.spec.num_layers())
        throw std::invalid_argument("merge_static: adapter layer count mismatch");
      Matrix delta = matmul(ad.b_mats[l], ad.a_mats[l]);
      check_shape(delta.same_shape(w), "merge_static layer " + std::to_string(l));
      const double c = alphas[i] * ad.scale;
      for (std::size_t j = 0; j < w.data.size(); ++j) w.data[j] += c * delta.data[j];
    }
  }
  return merged;
}

struct TrainCurve {
  std::vector<double> losses;  // one entry per step
};

// Adapter-only Adam state plus grad plumbing for train_skill.
struct AdapterTrainer {
  LoraAdapter grads;
  AdamState adam;

  explicit AdapterTrainer(const LoraAdapter& ad) : grads(ad.zeros_like()) {
    ParamStore p = ad.as_params();
    adam = AdamState::init(p);
  }

  void zero() {
    for (Matrix& m : grads.b_mats) m.fill(0.0);
    for (Matrix& m : grads.a_mats) m.fill(0.0);
  }

  void step(LoraAdapter& ad, double lr) {
    ParamStore p = ad.as_params();
    ParamStore g = grads.as_params();
    adam_step(p, g, adam, lr);
    ad.load_params(p);
  }
};

// Minimize the weighted denoising loss through the adapted predictor at
// blend = scale. Only B and A receive gradients; the base stays frozen.
inline TrainCurve train_skill(const NoisePredictor& base, const DiffusionSchedule& sched,
                              LoraAdapter& adapter,
                              const std::vector<std::vector<double>>& states,
                              const std::vector<std::vector<double>>& actions,
                              const std::vector<double>& weights, std::size_t steps,
                              double lr, std::size_t batch_size, SeededRng& rng) {
  if (states.empty() || states.size() != actions.size() || states.size() != weights.size())
    throw std::invalid_argument("train_skill: bad dataset");
  TrainCurve curve;
  AdapterTrainer trainer(adapter);
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<DenoiseBatchItem> batch(batch_size);
    for (auto& item : batch) {
      const std::size_t i = static_cast<std::size_t>(rng.next_below(states.size()));
      item = DenoiseBatchItem{&states[i], &actions[i], weights[i]};
    }
    trainer.zero();
    std::vector<AdapterRef> refs{adapter.ref(adapter.scale)};
    std::vector<AdapterGrad> sinks{
        AdapterGrad{&trainer.grads.b_mats, &trainer.grads.a_mats, nullptr}};
    double loss = diffusion_loss(base, sched, batch, rng, refs, nullptr, &sinks);
    if (!std::isfinite(loss))
      throw std::runtime_error("train_skill: non-finite loss at step " + std::to_string(step));
    trainer.step(adapter, lr);
    curve.losses.push_back(loss);
  }
  return curve;
}

}  // namespace psec
