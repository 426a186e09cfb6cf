#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "capdet/rng.hpp"
#include "capdet/tensor.hpp"

namespace capdet {

struct AdapterSet;  // lora.hpp

enum class Architecture { CrossAttnFusion, QueryBridge };
std::string architecture_name(Architecture a);
Architecture parse_architecture(const std::string& name);

// Fixed word-level vocabulary. Ids beyond kTokFake are unused filler so a
// decoder emitting arbitrary tokens stays representable.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kTokReal = 3;
inline constexpr int kTokFake = 4;
std::string token_text(int id);

struct ModelConfig {
  int image_size = 32;
  int channels = 3;
  int patch_size = 4;
  int d_model = 64;
  int n_heads = 4;
  int encoder_layers = 4;
  int decoder_layers = 2;
  int vocab_size = 40;
  int max_caption_len = 4;
  int n_query_tokens = 8;   // QueryBridge only
  int bridge_layers = 2;    // QueryBridge only
  int mlp_hidden = 128;
  Architecture architecture = Architecture::QueryBridge;

  void validate() const;  // throws listing the violated constraint
  int n_patches() const {
    int g = image_size / patch_size;
    return g * g;
  }
  int patch_dim() const { return channels * patch_size * patch_size; }

  std::string canonical_string() const;
  uint64_t hash() const;
  static ModelConfig from_canonical(const std::string& s);
};

struct ForwardOptions {
  bool train = false;
  Rng* rng = nullptr;                    // required when train && dropout used
  const AdapterSet* adapters = nullptr;  // low-rank adapters, keyed by weight name
};

struct CaptionerModel {
  ModelConfig config;
  std::map<std::string, Tensor> params;     // name-sorted, deterministic
  std::map<std::string, bool> trainable;    // same key set as params
  uint64_t seed = 0;

  const Tensor& param(const std::string& name) const;
  void apply_trainability();  // sync requires_grad flags with the mask
  std::vector<std::pair<std::string, Tensor>> trainable_params() const;
  int64_t total_param_count() const;
  int64_t trainable_param_count() const;
};

enum class AttnKind { SelfAttn, CrossAttn };

struct AttentionSite {
  std::string prefix;  // e.g. "enc.block0.attn"
  AttnKind kind;
  bool frozen_stack;   // true for encoder/decoder, false for the bridge
};
std::vector<AttentionSite> attention_sites(const ModelConfig& config);

CaptionerModel init_model(const ModelConfig& config, uint64_t seed);

Tensor encode_image(const CaptionerModel& model, const Tensor& image,
                    const ForwardOptions& opts = {});
Tensor bridge(const CaptionerModel& model, const Tensor& enc_tokens,
              const ForwardOptions& opts = {});
Tensor decode_logits(const CaptionerModel& model, const Tensor& ctx_tokens,
                     const std::vector<int>& prefix,
                     const ForwardOptions& opts = {});

// Encoder stack shared with the patch-transformer baseline; parameter names
// carry the "enc." prefix.
void init_encoder_params(const ModelConfig& config, Rng rng,
                         std::map<std::string, Tensor>& out);
Tensor encoder_forward(const std::map<std::string, Tensor>& params,
                       const ModelConfig& config, const Tensor& image,
                       const ForwardOptions& opts);

// [3×d×d] image -> [n_patches × patch_dim] rows, patches row-major,
// features ordered (channel, y, x) within the patch.
Tensor patchify(const Tensor& image, const ModelConfig& config);

// Checkpoint: <prefix>.tensors (CAPDET-TENSORS v1) + <prefix>.json sidecar
// carrying config, trainability mask, vocabulary, and master seed.
void save_checkpoint(const CaptionerModel& model, const std::string& prefix);
CaptionerModel load_checkpoint(const std::string& prefix);

// Digest over a parameter subset, for frozen-weight verification.
uint64_t params_digest(const std::map<std::string, Tensor>& params,
                       const std::map<std::string, bool>& trainable,
                       bool frozen_only);

}  // namespace capdet
