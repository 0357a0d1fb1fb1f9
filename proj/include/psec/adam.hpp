#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>

#include "psec/mlp.hpp"

namespace psec {

struct AdamState {
  ParamStore m;  // first moments
  ParamStore v;  // second moments
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState init(const ParamStore& params) {
    AdamState s;
    s.m = params.zeros_like();
    s.v = params.zeros_like();
    return s;
  }
};

// Bias-corrected Adam update, in place.
inline void adam_step(ParamStore& params, const ParamStore& grads, AdamState& state,
                      double lr) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& name : params.names) {
    Matrix& p = params.at(name);
    const Matrix& g = grads.at(name);
    check_shape(p.same_shape(g), "adam_step " + name);
    if (!g.all_finite()) {
      throw std::runtime_error("adam_step: non-finite gradient in tensor " + name);
    }
    Matrix& m = state.m.at(name);
    Matrix& v = state.v.at(name);
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * g.data[i];
      v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      p.data[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// Central-difference gradient estimate, one coordinate at a time.
inline ParamStore finite_diff_grad(const std::function<double(const ParamStore&)>& f,
                                   const ParamStore& params, double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_grad: step must be > 0");
  ParamStore grads = params.zeros_like();
  ParamStore work = params;
  for (const auto& name : params.names) {
    Matrix& w = work.at(name);
    Matrix& g = grads.at(name);
    for (std::size_t i = 0; i < w.data.size(); ++i) {
      const double orig = w.data[i];
      w.data[i] = orig + step;
      const double fp = f(work);
      w.data[i] = orig - step;
      const double fm = f(work);
      w.data[i] = orig;
      g.data[i] = (fp - fm) / (2.0 * step);
    }
  }
  return grads;
}

}  // namespace psec
