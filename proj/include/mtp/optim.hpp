#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mtp/error.hpp"
#include "mtp/tensor.hpp"

namespace mtp {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  // Biases and layer-norm parameters are excluded from weight decay.
  bool decay = true;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  void init(const std::vector<Parameter<T>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.tensor.size(), T{0});
      v.emplace_back(p.tensor.size(), T{0});
    }
    step = 0;
  }
};

// One Adam update with decoupled weight decay, as in BERT's optimizer:
// w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w). The decay term stays
// out of m and v; folded into the gradient it swamps the small early
// attention gradients after normalization. Parameters whose gradient was
// never populated are treated as having zero gradient.
template <typename T>
void adam_step(std::vector<Parameter<T>>& params, AdamState<T>& state, double lr) {
  if (state.m.size() != params.size()) state.init(params);
  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, double(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& tensor = params[p].tensor;
    auto w = tensor.mutable_values();
    auto g = tensor.grad();
    auto& m = state.m[p];
    auto& v = state.v[p];
    if (m.size() != w.size()) fail("adam_step: state shape mismatch for ", params[p].name);
    const double wd = params[p].decay ? c.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      double gi = g.empty() ? 0.0 : double(g[i]);
      double mi = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      double vi = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      double mhat = mi / bc1;
      double vhat = vi / bc2;
      w[i] = static_cast<T>(double(w[i]) - lr * (mhat / (std::sqrt(vhat) + c.eps) + wd * double(w[i])));
    }
  }
}

template <typename T>
void zero_grads(std::vector<Parameter<T>>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

// Linear warmup from 0 to base_lr over the first warmup_frac of tokens, then
// linear decay to 0 at total_tokens.
inline double lr_at(double tokens_seen, double total_tokens, double base_lr = 1e-4,
                    double warmup_frac = 0.01) {
  if (total_tokens <= 0) fail("lr_at: total_tokens must be positive");
  if (tokens_seen < 0 || tokens_seen > total_tokens) {
    fail("lr_at: tokens_seen ", tokens_seen, " outside [0, ", total_tokens, "]");
  }
  const double warm = warmup_frac * total_tokens;
  if (warm > 0 && tokens_seen <= warm) return base_lr * tokens_seen / warm;
  if (total_tokens == warm) return base_lr;
  return base_lr * (total_tokens - tokens_seen) / (total_tokens - warm);
}

}  // namespace mtp
