#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "capdet/tensor.hpp"

namespace capdet {

struct AdamConfig {
  float lr = 5e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  int64_t timestep = 0;
  std::map<std::string, std::vector<float>> m, v;
};

// One bias-corrected Adam update over named parameters. grads[i] pairs with
// params[i]; a null grad leaves that parameter untouched.
void adam_step(std::vector<std::pair<std::string, Tensor>>& params,
               const std::vector<const std::vector<float>*>& grads,
               AdamState& state, const AdamConfig& cfg);

}  // namespace capdet
