#pragma once

#include <map>
#include <string>
#include <vector>

#include "capdet/caption.hpp"
#include "capdet/dataset.hpp"
#include "capdet/model.hpp"

namespace capdet {

enum class BaselineKind { Conv, PatchTransformer };
std::string baseline_kind_name(BaselineKind k);
BaselineKind parse_baseline_kind(const std::string& s);

struct BaselineConfig {
  BaselineKind kind = BaselineKind::Conv;
  int image_size = 32;
  int channels = 3;
  std::vector<int> conv_channels = {16, 32, 64};  // Conv variant, stride-2 3x3
  ModelConfig encoder;  // PatchTransformer variant (decoder fields unused)

  void validate() const;
  std::string canonical_string() const;
  uint64_t hash() const;
  static BaselineConfig from_canonical(const std::string& s);
};

// Single-neuron binary classifier: configurable backbone, affine head to one
// logit. The whole network trains (random init carries no pretrained signal).
struct BaselineClassifier {
  BaselineConfig config;
  std::map<std::string, Tensor> params;
  std::map<std::string, bool> trainable;
  uint64_t seed = 0;

  void apply_trainability();
  std::vector<std::pair<std::string, Tensor>> trainable_params() const;
};

BaselineClassifier build_baseline(BaselineKind kind, BaselineConfig config,
                                  uint64_t seed);

// Forward to the single logit, shape [1]. Participates in the tape.
Tensor baseline_logit(const BaselineClassifier& clf, const Tensor& image);

struct BinaryResult {
  Label label = Label::Fake;
  double p_fake = 0.5;
  double logit = 0.0;
};

// p_fake = sigmoid(logit); Fake iff p_fake >= 0.5 (threshold inclusive).
BinaryResult classify_binary(const BaselineClassifier& clf, const Tensor& image);

FitResult fit_baseline(BaselineClassifier& clf, const Manifest& train_manifest,
                       const TrainConfig& cfg, const std::string& data_root);

void save_baseline(const BaselineClassifier& clf, const std::string& prefix);
BaselineClassifier load_baseline(const std::string& prefix);

}  // namespace capdet
