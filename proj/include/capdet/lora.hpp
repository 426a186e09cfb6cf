#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "capdet/model.hpp"
#include "capdet/tensor.hpp"

namespace capdet {

struct LoraSpec {
  int rank = 16;
  float alpha = 32.0f;
  float dropout = 0.05f;
  std::set<std::string> target_kinds = {"W_q", "W_k"};

  void validate(const ModelConfig& config) const;
  float scaling() const { return alpha / static_cast<float>(rank); }
};

// One adapted weight. W aliases the base parameter tensor (never copied, never
// trained). A is r×d, B is d×r, both trainable; B starts at zero so injection
// leaves the model function untouched.
struct LoraLayer {
  std::string name;  // base weight name, e.g. "enc.block0.attn.Wq"
  Tensor W;
  Tensor A;
  Tensor B;
  int rank = 16;
  float alpha = 32.0f;
  float dropout = 0.05f;
};

struct AdapterSet {
  std::map<std::string, LoraLayer> layers;  // keyed by base weight name
};

struct AdaptedModel {
  CaptionerModel base;
  AdapterSet adapters;
  LoraSpec spec;
};

// Injects one adapter per (frozen-stack self-attention layer × target kind).
// Base attention matrices end up frozen; architecture-trainable parameters
// (bridge, decoder cross-attention) keep their mask.
AdaptedModel inject(CaptionerModel model, const LoraSpec& spec, uint64_t seed);

// Column-convention forward of one adapted layer: h = W·x + (α/r)·B·(A·drop(x))
// with x of shape [d×n]. Dropout applies in train mode only.
Tensor lora_forward(const LoraLayer& layer, const Tensor& x, bool train,
                    Rng* rng);

// W' = W + (α/r)·B·A. Produces a new matrix, never mutates the layer.
Tensor merge(const LoraLayer& layer);

// Exactly the adapter A/B matrices plus whatever the base marks trainable.
std::vector<std::pair<std::string, Tensor>> trainable_parameters(
    const AdaptedModel& adapted);
int64_t adapter_param_count(const AdaptedModel& adapted);

// Adapter file: one JSON header line {spec, base_config_hash, seed} followed
// by a CAPDET-TENSORS v1 payload holding only the A/B tensors.
void save_adapter(const AdaptedModel& adapted, const std::string& path);
AdaptedModel load_adapter(CaptionerModel base, const std::string& path);

}  // namespace capdet
