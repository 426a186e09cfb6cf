#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "capdet/dataset.hpp"
#include "capdet/lora.hpp"
#include "capdet/model.hpp"
#include "capdet/optim.hpp"

namespace capdet {

struct Caption {
  std::vector<int> tokens;
  std::string text;
};

// Canonical captions: [BOS] real|fake [EOS], padded to max_len.
Caption caption_of(Label label, int max_len = 4);
Label label_of(const Caption& caption);

struct TrainConfig {
  float learning_rate = 5e-5f;
  int epochs = 20;
  int batch_size = 32;
  uint64_t seed = 0;
  AdamConfig adam;  // lr field is overridden by learning_rate

  void validate() const;
};

// Thrown when training hits a non-finite loss; carries the offending step.
struct NumericError : std::runtime_error {
  int64_t step;
  NumericError(const std::string& msg, int64_t step_)
      : std::runtime_error(msg), step(step_) {}
};

// Token-level cross-entropy against the caption, PAD ignored. logits rows
// must equal len(tokens)-1 (teacher forcing over the trimmed prefix).
Tensor caption_loss(const Tensor& logits, const Caption& target);

struct CaptionScores {
  Label label = Label::Fake;
  double ll_real = 0.0;
  double ll_fake = 0.0;
};

// Constrained two-candidate scoring: total log-likelihood of both canonical
// captions; argmax, ties to Fake. Total over every valid image.
CaptionScores classify(const CaptionerModel& model, const Tensor& image,
                       const AdapterSet* adapters = nullptr);

// Free-running greedy generation, kept as a diagnostic alongside scoring.
Caption greedy_decode(const CaptionerModel& model, const Tensor& image,
                      const AdapterSet* adapters = nullptr);

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double train_acc = 0.0;
  double seconds = 0.0;
};

struct FitResult {
  std::vector<EpochStats> history;
};

// Adam over the trainable set (adapter A/B plus whatever the mask marks).
// Deterministic under cfg.seed: per-epoch shuffles and dropout streams derive
// from it. Images load relative to data_root.
FitResult fit(CaptionerModel& model, AdapterSet* adapters,
              const Manifest& train_manifest, const TrainConfig& cfg,
              const std::string& data_root);

}  // namespace capdet
