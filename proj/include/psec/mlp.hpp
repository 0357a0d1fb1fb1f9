#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "psec/matrix.hpp"
#include "psec/rng.hpp"

namespace psec {

// Feed-forward net description: rectifier on hidden layers, identity output.
struct MlpSpec {
  std::vector<std::size_t> layer_dims;  // input, hidden..., output

  std::size_t num_layers() const { return layer_dims.size() - 1; }
  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t output_dim() const { return layer_dims.back(); }

  void validate() const {
    if (layer_dims.size() < 2) throw std::invalid_argument("MlpSpec needs >= 2 dims");
    for (std::size_t d : layer_dims) {
      if (d < 1) throw std::invalid_argument("MlpSpec dims must be >= 1");
    }
  }
};

// Named tensors with deterministic (insertion) iteration order.
struct ParamStore {
  std::vector<std::string> names;
  std::unordered_map<std::string, Matrix> tensors;

  void add(const std::string& name, Matrix m) {
    if (tensors.count(name)) throw std::invalid_argument("duplicate tensor: " + name);
    names.push_back(name);
    tensors.emplace(name, std::move(m));
  }

  Matrix& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::invalid_argument("no tensor: " + name);
    return it->second;
  }
  const Matrix& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::invalid_argument("no tensor: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  // Same names and shapes, all entries zero.
  ParamStore zeros_like() const {
    ParamStore out;
    for (const auto& n : names) {
      const Matrix& m = at(n);
      out.add(n, Matrix(m.rows, m.cols));
    }
    return out;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& name : names) n += at(name).size();
    return n;
  }
};

inline std::string weight_name(std::size_t layer) { return "W" + std::to_string(layer); }
inline std::string bias_name(std::size_t layer) { return "b" + std::to_string(layer); }

// Glorot-uniform weights, zero biases.
inline ParamStore init_mlp_params(const MlpSpec& spec, SeededRng& rng) {
  spec.validate();
  ParamStore params;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    std::size_t d_in = spec.layer_dims[l];
    std::size_t d_out = spec.layer_dims[l + 1];
    Matrix w(d_out, d_in);
    double bound = std::sqrt(6.0 / static_cast<double>(d_in + d_out));
    for (double& v : w.data) v = rng.uniform(-bound, bound);
    params.add(weight_name(l), std::move(w));
    params.add(bias_name(l), Matrix(d_out, 1));
  }
  return params;
}

// Low-rank delta applied beside the base weights during a forward pass:
// effective W_l = W0_l + coeff * B_l A_l.
struct AdapterRef {
  const std::vector<Matrix>* b_mats = nullptr;  // per layer, d_out x n
  const std::vector<Matrix>* a_mats = nullptr;  // per layer, n x d_in
  double coeff = 0.0;
};

struct ForwardCache {
  std::vector<std::vector<double>> inputs;    // h fed to each layer
  std::vector<std::vector<double>> preacts;   // z per layer
  // lora_mid[l][i] = A_i h at layer l, for adapter i
  std::vector<std::vector<std::vector<double>>> lora_mid;
};

// Cheap global counter used by tests to compare composition costs.
struct MlpEvalCounter {
  inline static std::uint64_t forward_calls = 0;
};

// Forward pass through the net with optional low-rank layer deltas,
// computed low-rank-first (BA is never materialized here).
inline std::vector<double> mlp_forward(const MlpSpec& spec, const ParamStore& params,
                                       const std::vector<AdapterRef>& adapters,
                                       const std::vector<double>& input,
                                       ForwardCache* cache = nullptr) {
  if (input.size() != spec.input_dim()) {
    throw std::invalid_argument("mlp_forward: input dim " + std::to_string(input.size()) +
                                " != spec input dim " + std::to_string(spec.input_dim()));
  }
  ++MlpEvalCounter::forward_calls;
  if (cache) {
    cache->inputs.clear();
    cache->preacts.clear();
    cache->lora_mid.clear();
  }
  std::vector<double> h = input;
  const std::size_t layers = spec.num_layers();
  for (std::size_t l = 0; l < layers; ++l) {
    const Matrix& w = params.at(weight_name(l));
    const Matrix& b = params.at(bias_name(l));
    std::vector<double> z = matvec(w, h);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += b.data[i];
    std::vector<std::vector<double>> mids;
    for (const AdapterRef& ad : adapters) {
      const Matrix& bm = (*ad.b_mats)[l];
      const Matrix& am = (*ad.a_mats)[l];
      std::vector<double> mid = matvec(am, h);
      std::vector<double> delta = matvec(bm, mid);
      axpy(z, ad.coeff, delta);
      if (cache) mids.push_back(std::move(mid));
    }
    if (cache) {
      cache->inputs.push_back(h);
      cache->preacts.push_back(z);
      cache->lora_mid.push_back(std::move(mids));
    }
    if (l + 1 < layers) {
      for (double& v : z) v = v > 0.0 ? v : 0.0;  // rectifier; subgradient 0 at 0
    }
    h = std::move(z);
  }
  return h;
}

inline std::vector<double> mlp_forward(const MlpSpec& spec, const ParamStore& params,
                                       const std::vector<double>& input,
                                       ForwardCache* cache = nullptr) {
  return mlp_forward(spec, params, {}, input, cache);
}

// Per-adapter gradient sink for the backward pass.
struct AdapterGrad {
  std::vector<Matrix>* b_grads = nullptr;
  std::vector<Matrix>* a_grads = nullptr;
  double* coeff_grad = nullptr;  // accumulated across layers
};

// Reverse pass matching a forward call. Any gradient sink may be null;
// base_grads accumulates in place when given.
inline std::vector<double> mlp_backward(const MlpSpec& spec, const ParamStore& params,
                                        const std::vector<AdapterRef>& adapters,
                                        const ForwardCache& cache,
                                        const std::vector<double>& output_grad,
                                        ParamStore* base_grads,
                                        std::vector<AdapterGrad>* adapter_grads = nullptr) {
  const std::size_t layers = spec.num_layers();
  if (cache.inputs.size() != layers || output_grad.size() != spec.output_dim()) {
    throw std::invalid_argument("mlp_backward: cache/grad does not match spec");
  }
  if (adapter_grads && adapter_grads->size() != adapters.size()) {
    throw std::invalid_argument("mlp_backward: adapter grad sink count mismatch");
  }
  std::vector<double> dz = output_grad;
  for (std::size_t li = layers; li-- > 0;) {
    if (li + 1 < layers) {
      // through the rectifier of layer li
      const std::vector<double>& z = cache.preacts[li];
      for (std::size_t i = 0; i < dz.size(); ++i) {
        if (z[i] <= 0.0) dz[i] = 0.0;
      }
    }
    const std::vector<double>& h = cache.inputs[li];
    const Matrix& w = params.at(weight_name(li));
    if (base_grads) {
      add_outer(base_grads->at(weight_name(li)), dz, h);
      Matrix& bg = base_grads->at(bias_name(li));
      for (std::size_t i = 0; i < dz.size(); ++i) bg.data[i] += dz[i];
    }
    std::vector<double> dh = matvec_t(w, dz);
    for (std::size_t ai = 0; ai < adapters.size(); ++ai) {
      const AdapterRef& ad = adapters[ai];
      const Matrix& bm = (*ad.b_mats)[li];
      const Matrix& am = (*ad.a_mats)[li];
      const std::vector<double>& mid = cache.lora_mid[li][ai];
      std::vector<double> bt_dz = matvec_t(bm, dz);  // n-vector
      // input grad through the delta path
      std::vector<double> dh_lora = matvec_t(am, bt_dz);
      axpy(dh, ad.coeff, dh_lora);
      if (adapter_grads) {
        AdapterGrad& sink = (*adapter_grads)[ai];
        if (sink.b_grads) add_outer((*sink.b_grads)[li], dz, mid, ad.coeff);
        if (sink.a_grads) add_outer((*sink.a_grads)[li], bt_dz, h, ad.coeff);
        if (sink.coeff_grad) *sink.coeff_grad += dot(bt_dz, mid);
      }
    }
    dz = std::move(dh);
  }
  return dz;  // input gradient
}

inline std::vector<double> mlp_backward(const MlpSpec& spec, const ParamStore& params,
                                        const ForwardCache& cache,
                                        const std::vector<double>& output_grad,
                                        ParamStore* base_grads) {
  return mlp_backward(spec, params, {}, cache, output_grad, base_grads, nullptr);
}

}  // namespace psec
