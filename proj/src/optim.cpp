#include "capdet/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace capdet {

void adam_step(std::vector<std::pair<std::string, Tensor>>& params,
               const std::vector<const std::vector<float>*>& grads,
               AdamState& state, const AdamConfig& cfg) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam_step: " + std::to_string(params.size()) +
                                " params vs " + std::to_string(grads.size()) +
                                " grads");
  state.timestep += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, (double)state.timestep);
  double bc2 = 1.0 - std::pow(cfg.beta2, (double)state.timestep);
  for (size_t i = 0; i < params.size(); ++i) {
    if (!grads[i]) continue;
    auto& [name, p] = params[i];
    const auto& g = *grads[i];
    if (g.size() != p.values().size())
      throw std::invalid_argument("adam_step: grad size " +
                                  std::to_string(g.size()) + " vs param " +
                                  name + " size " +
                                  std::to_string(p.values().size()));
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != g.size()) m.assign(g.size(), 0.0f);
    if (v.size() != g.size()) v.assign(g.size(), 0.0f);
    auto& data = p.mutable_values();
    for (size_t j = 0; j < g.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0f - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0f - cfg.beta2) * g[j] * g[j];
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      data[j] = static_cast<float>(data[j] -
                                   cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

}  // namespace capdet
