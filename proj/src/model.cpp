#include "capdet/model.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <stdexcept>

#include "capdet/lora.hpp"
#include "capdet/serialize.hpp"

namespace capdet {

using nlohmann::json;

std::string architecture_name(Architecture a) {
  return a == Architecture::CrossAttnFusion ? "cross_attn_fusion" : "query_bridge";
}

Architecture parse_architecture(const std::string& name) {
  if (name == "cross_attn_fusion") return Architecture::CrossAttnFusion;
  if (name == "query_bridge") return Architecture::QueryBridge;
  throw std::invalid_argument("unknown architecture '" + name + "'");
}

std::string token_text(int id) {
  switch (id) {
    case kPad: return "[PAD]";
    case kBos: return "[BOS]";
    case kEos: return "[EOS]";
    case kTokReal: return "real";
    case kTokFake: return "fake";
    default: return "tok" + std::to_string(id);
  }
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("invalid model config: " + what);
  };
  if (image_size <= 0 || channels <= 0 || patch_size <= 0 || d_model <= 0 ||
      n_heads <= 0 || encoder_layers <= 0 || decoder_layers <= 0 ||
      vocab_size <= 0 || n_query_tokens <= 0 || bridge_layers <= 0 ||
      mlp_hidden <= 0)
    fail("all dimensions must be positive");
  if (image_size % patch_size != 0)
    fail("image_size " + std::to_string(image_size) +
         " not divisible by patch_size " + std::to_string(patch_size));
  if (d_model % n_heads != 0)
    fail("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
         std::to_string(n_heads));
  if (max_caption_len < 3)
    fail("max_caption_len " + std::to_string(max_caption_len) +
         " < 3 (BOS + label + EOS)");
  if (vocab_size < 5) fail("vocab_size must cover the 5 reserved tokens");
}

std::string ModelConfig::canonical_string() const {
  json j;
  j["image_size"] = image_size;
  j["channels"] = channels;
  j["patch_size"] = patch_size;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["encoder_layers"] = encoder_layers;
  j["decoder_layers"] = decoder_layers;
  j["vocab_size"] = vocab_size;
  j["max_caption_len"] = max_caption_len;
  j["n_query_tokens"] = n_query_tokens;
  j["bridge_layers"] = bridge_layers;
  j["mlp_hidden"] = mlp_hidden;
  j["architecture"] = architecture_name(architecture);
  return j.dump();  // keys emitted sorted
}

ModelConfig ModelConfig::from_canonical(const std::string& s) {
  json j = json::parse(s);
  ModelConfig c;
  c.image_size = j.at("image_size");
  c.channels = j.at("channels");
  c.patch_size = j.at("patch_size");
  c.d_model = j.at("d_model");
  c.n_heads = j.at("n_heads");
  c.encoder_layers = j.at("encoder_layers");
  c.decoder_layers = j.at("decoder_layers");
  c.vocab_size = j.at("vocab_size");
  c.max_caption_len = j.at("max_caption_len");
  c.n_query_tokens = j.at("n_query_tokens");
  c.bridge_layers = j.at("bridge_layers");
  c.mlp_hidden = j.at("mlp_hidden");
  c.architecture = parse_architecture(j.at("architecture"));
  return c;
}

uint64_t ModelConfig::hash() const { return fnv1a64(canonical_string()); }

const Tensor& CaptionerModel::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end())
    throw std::out_of_range("no such parameter: " + name);
  return it->second;
}

void CaptionerModel::apply_trainability() {
  for (auto& [name, t] : params) t.set_requires_grad(trainable.at(name));
}

std::vector<std::pair<std::string, Tensor>> CaptionerModel::trainable_params()
    const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, t] : params)
    if (trainable.at(name)) out.emplace_back(name, t);
  return out;
}

int64_t CaptionerModel::total_param_count() const {
  int64_t n = 0;
  for (const auto& [_, t] : params) n += t.numel();
  return n;
}

int64_t CaptionerModel::trainable_param_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : params)
    if (trainable.at(name)) n += t.numel();
  return n;
}

std::vector<AttentionSite> attention_sites(const ModelConfig& config) {
  std::vector<AttentionSite> sites;
  for (int i = 0; i < config.encoder_layers; ++i)
    sites.push_back({"enc.block" + std::to_string(i) + ".attn",
                     AttnKind::SelfAttn, true});
  if (config.architecture == Architecture::QueryBridge) {
    for (int i = 0; i < config.bridge_layers; ++i) {
      sites.push_back({"bridge.block" + std::to_string(i) + ".self",
                       AttnKind::SelfAttn, false});
      sites.push_back({"bridge.block" + std::to_string(i) + ".cross",
                       AttnKind::CrossAttn, false});
    }
  }
  for (int i = 0; i < config.decoder_layers; ++i) {
    sites.push_back({"dec.block" + std::to_string(i) + ".self",
                     AttnKind::SelfAttn, true});
    sites.push_back({"dec.block" + std::to_string(i) + ".cross",
                     AttnKind::CrossAttn, true});
  }
  return sites;
}

namespace {

const Tensor& at(const std::map<std::string, Tensor>& params,
                 const std::string& name) {
  auto it = params.find(name);
  if (it == params.end())
    throw std::out_of_range("no such parameter: " + name);
  return it->second;
}

// Adapter-aware linear map: rows of x times the stored matrix, plus the
// scaled low-rank path when an adapter targets this weight.
Tensor project(const std::map<std::string, Tensor>& params,
               const std::string& wname, const Tensor& x,
               const ForwardOptions& opts) {
  Tensor out = matmul(x, at(params, wname));
  if (opts.adapters) {
    auto it = opts.adapters->layers.find(wname);
    if (it != opts.adapters->layers.end()) {
      const LoraLayer& layer = it->second;
      Tensor xin = x;
      if (opts.train && layer.dropout > 0.0f) {
        if (!opts.rng)
          throw std::runtime_error("train-mode forward needs an rng for dropout");
        xin = dropout(x, layer.dropout, *opts.rng);
      }
      Tensor low = matmul(xin, transpose(layer.A));
      Tensor up = matmul(low, transpose(layer.B));
      out = add(out, scale(up, layer.alpha / static_cast<float>(layer.rank)));
    }
  }
  return out;
}

Tensor ln(const std::map<std::string, Tensor>& params, const std::string& prefix,
          const Tensor& x) {
  return layer_norm(x, at(params, prefix + ".g"), at(params, prefix + ".b"));
}

Tensor mlp(const std::map<std::string, Tensor>& params, const std::string& prefix,
           const Tensor& x) {
  Tensor h = add_rowvec(matmul(x, at(params, prefix + ".W1")),
                        at(params, prefix + ".b1"));
  return add_rowvec(matmul(gelu(h), at(params, prefix + ".W2")),
                    at(params, prefix + ".b2"));
}

Tensor causal_mask(int64_t t) {
  std::vector<float> m(t * t, 0.0f);
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = i + 1; j < t; ++j) m[i * t + j] = -1e9f;
  return Tensor::from({t, t}, std::move(m));
}

Tensor attention(const std::map<std::string, Tensor>& params,
                 const ModelConfig& config, const std::string& prefix,
                 const Tensor& xq, const Tensor& xkv, bool causal,
                 const ForwardOptions& opts) {
  Tensor q = project(params, prefix + ".Wq", xq, opts);
  Tensor k = project(params, prefix + ".Wk", xkv, opts);
  Tensor v = project(params, prefix + ".Wv", xkv, opts);
  int64_t dh = config.d_model / config.n_heads;
  float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
  Tensor mask;
  if (causal) mask = causal_mask(xq.size(0));
  std::vector<Tensor> heads;
  heads.reserve(config.n_heads);
  for (int h = 0; h < config.n_heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
    if (causal) scores = add(scores, mask);
    heads.push_back(matmul(softmax_stable(scores, 1), vh));
  }
  return project(params, prefix + ".Wo", concat_cols(heads), opts);
}

Tensor transformer_block(const std::map<std::string, Tensor>& params,
                         const ModelConfig& config, const std::string& prefix,
                         Tensor x, const Tensor* cross_kv, bool causal,
                         const std::string& self_name,
                         const ForwardOptions& opts) {
  Tensor normed = ln(params, prefix + ".ln1", x);
  x = add(x, attention(params, config, prefix + "." + self_name, normed, normed,
                       causal, opts));
  if (cross_kv) {
    x = add(x, attention(params, config, prefix + ".cross",
                         ln(params, prefix + ".cross.ln", x), *cross_kv, false,
                         opts));
  }
  return add(x, mlp(params, prefix + ".mlp", ln(params, prefix + ".ln2", x)));
}

}  // namespace

Tensor patchify(const Tensor& image, const ModelConfig& config) {
  if (image.rank() != 3 || image.size(0) != config.channels ||
      image.size(1) != config.image_size || image.size(2) != config.image_size)
    throw std::invalid_argument(
        "image shape " + shape_str(image.shape()) + " does not match config [" +
        std::to_string(config.channels) + "x" + std::to_string(config.image_size) +
        "x" + std::to_string(config.image_size) + "]");
  int grid = config.image_size / config.patch_size;
  int ps = config.patch_size;
  std::vector<float> out(static_cast<size_t>(config.n_patches()) *
                         config.patch_dim());
  size_t o = 0;
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx)
      for (int c = 0; c < config.channels; ++c)
        for (int py = 0; py < ps; ++py)
          for (int px = 0; px < ps; ++px) {
            int y = gy * ps + py, x = gx * ps + px;
            out[o++] = image.values()[(static_cast<size_t>(c) *
                                           config.image_size +
                                       y) *
                                          config.image_size +
                                      x];
          }
  return Tensor::from({config.n_patches(), config.patch_dim()}, std::move(out));
}

Tensor encoder_forward(const std::map<std::string, Tensor>& params,
                       const ModelConfig& config, const Tensor& image,
                       const ForwardOptions& opts) {
  Tensor x = add_rowvec(matmul(patchify(image, config), at(params, "enc.patch.W")),
                        at(params, "enc.patch.b"));
  x = add(x, at(params, "enc.pos"));
  for (int i = 0; i < config.encoder_layers; ++i)
    x = transformer_block(params, config, "enc.block" + std::to_string(i), x,
                          nullptr, false, "attn", opts);
  return ln(params, "enc.ln_f", x);
}

Tensor encode_image(const CaptionerModel& model, const Tensor& image,
                    const ForwardOptions& opts) {
  return encoder_forward(model.params, model.config, image, opts);
}

Tensor bridge(const CaptionerModel& model, const Tensor& enc_tokens,
              const ForwardOptions& opts) {
  if (enc_tokens.rank() != 2 || enc_tokens.size(1) != model.config.d_model)
    throw std::invalid_argument("bridge: encoder tokens " +
                                shape_str(enc_tokens.shape()) +
                                " do not match d_model " +
                                std::to_string(model.config.d_model));
  if (model.config.architecture == Architecture::CrossAttnFusion)
    return enc_tokens;  // fusion happens inside the decoder
  Tensor x = model.param("bridge.queries");
  for (int i = 0; i < model.config.bridge_layers; ++i)
    x = transformer_block(model.params, model.config,
                          "bridge.block" + std::to_string(i), x, &enc_tokens,
                          false, "self", opts);
  return ln(model.params, "bridge.ln_f", x);
}

Tensor decode_logits(const CaptionerModel& model, const Tensor& ctx_tokens,
                     const std::vector<int>& prefix,
                     const ForwardOptions& opts) {
  const ModelConfig& cfg = model.config;
  if (ctx_tokens.rank() != 2 || ctx_tokens.size(0) == 0 ||
      ctx_tokens.size(1) != cfg.d_model)
    throw std::invalid_argument("decode: empty or mismatched context tokens " +
                                shape_str(ctx_tokens.shape()));
  if (prefix.empty())
    throw std::invalid_argument("decode: empty caption prefix");
  if (static_cast<int>(prefix.size()) > cfg.max_caption_len)
    throw std::invalid_argument(
        "decode: prefix length " + std::to_string(prefix.size()) +
        " exceeds max_caption_len " + std::to_string(cfg.max_caption_len));
  for (int id : prefix)
    if (id < 0 || id >= cfg.vocab_size)
      throw std::invalid_argument("decode: token id " + std::to_string(id) +
                                  " outside vocab " +
                                  std::to_string(cfg.vocab_size));
  std::vector<int> positions(prefix.size());
  for (size_t i = 0; i < prefix.size(); ++i) positions[i] = static_cast<int>(i);
  Tensor x = add(gather_rows(model.param("dec.tok"), prefix),
                 gather_rows(model.param("dec.pos"), positions));
  for (int i = 0; i < cfg.decoder_layers; ++i)
    x = transformer_block(model.params, cfg, "dec.block" + std::to_string(i), x,
                          &ctx_tokens, true, "self", opts);
  x = ln(model.params, "dec.ln_f", x);
  return add_rowvec(matmul(x, model.param("dec.head.W")),
                    model.param("dec.head.b"));
}

namespace {

struct ParamBuilder {
  Rng rng;
  std::map<std::string, Tensor>& out;

  void gauss(const std::string& name, const Shape& shape) {
    Rng s = rng.stream(name);
    out[name] = Tensor::randn(shape, s, 0.02f);
  }
  void zeros(const std::string& name, const Shape& shape) {
    out[name] = Tensor::zeros(shape);
  }
  void ones(const std::string& name, const Shape& shape) {
    out[name] = Tensor::full(shape, 1.0f);
  }
  void norm_pair(const std::string& prefix, int d) {
    ones(prefix + ".g", {d});
    zeros(prefix + ".b", {d});
  }
  void attn(const std::string& prefix, int d) {
    gauss(prefix + ".Wq", {d, d});
    gauss(prefix + ".Wk", {d, d});
    gauss(prefix + ".Wv", {d, d});
    gauss(prefix + ".Wo", {d, d});
  }
  void mlp(const std::string& prefix, int d, int h) {
    gauss(prefix + ".W1", {d, h});
    zeros(prefix + ".b1", {h});
    gauss(prefix + ".W2", {h, d});
    zeros(prefix + ".b2", {d});
  }
};

}  // namespace

void init_encoder_params(const ModelConfig& config, Rng rng,
                         std::map<std::string, Tensor>& out) {
  ParamBuilder b{rng, out};
  int d = config.d_model;
  b.gauss("enc.patch.W", {config.patch_dim(), d});
  b.zeros("enc.patch.b", {d});
  b.gauss("enc.pos", {config.n_patches(), d});
  for (int i = 0; i < config.encoder_layers; ++i) {
    std::string p = "enc.block" + std::to_string(i);
    b.norm_pair(p + ".ln1", d);
    b.attn(p + ".attn", d);
    b.norm_pair(p + ".ln2", d);
    b.mlp(p + ".mlp", d, config.mlp_hidden);
  }
  b.norm_pair("enc.ln_f", d);
}

CaptionerModel init_model(const ModelConfig& config, uint64_t seed) {
  config.validate();
  CaptionerModel model;
  model.config = config;
  model.seed = seed;
  Rng rng(seed, "init");
  init_encoder_params(config, rng, model.params);
  int d = config.d_model;
  ParamBuilder b{rng, model.params};
  if (config.architecture == Architecture::QueryBridge) {
    b.gauss("bridge.queries", {config.n_query_tokens, d});
    for (int i = 0; i < config.bridge_layers; ++i) {
      std::string p = "bridge.block" + std::to_string(i);
      b.norm_pair(p + ".ln1", d);
      b.attn(p + ".self", d);
      b.norm_pair(p + ".cross.ln", d);
      b.attn(p + ".cross", d);
      b.norm_pair(p + ".ln2", d);
      b.mlp(p + ".mlp", d, config.mlp_hidden);
    }
    b.norm_pair("bridge.ln_f", d);
  }
  b.gauss("dec.tok", {config.vocab_size, d});
  b.gauss("dec.pos", {config.max_caption_len, d});
  for (int i = 0; i < config.decoder_layers; ++i) {
    std::string p = "dec.block" + std::to_string(i);
    b.norm_pair(p + ".ln1", d);
    b.attn(p + ".self", d);
    b.norm_pair(p + ".cross.ln", d);
    b.attn(p + ".cross", d);
    b.norm_pair(p + ".ln2", d);
    b.mlp(p + ".mlp", d, config.mlp_hidden);
  }
  b.norm_pair("dec.ln_f", d);
  b.gauss("dec.head.W", {d, config.vocab_size});
  b.zeros("dec.head.b", {config.vocab_size});

  for (const auto& [name, _] : model.params) {
    bool t = false;
    if (config.architecture == Architecture::CrossAttnFusion)
      t = name.find(".cross.") != std::string::npos && name.rfind("dec.", 0) == 0;
    else
      t = name.rfind("bridge.", 0) == 0;
    model.trainable[name] = t;
  }
  model.apply_trainability();
  return model;
}

void save_checkpoint(const CaptionerModel& model, const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor>> tensors(model.params.begin(),
                                                      model.params.end());
  save_tensors(prefix + ".tensors", tensors);
  json j;
  j["config"] = json::parse(model.config.canonical_string());
  j["trainable"] = model.trainable;
  j["seed"] = model.seed;
  json vocab = json::array();
  for (int i = 0; i < model.config.vocab_size; ++i) vocab.push_back(token_text(i));
  j["vocab"] = vocab;
  std::ofstream os(prefix + ".json");
  if (!os) throw std::runtime_error("cannot write " + prefix + ".json");
  os << j.dump(2) << '\n';
}

CaptionerModel load_checkpoint(const std::string& prefix) {
  std::ifstream is(prefix + ".json");
  if (!is) throw std::runtime_error("cannot open " + prefix + ".json");
  json j = json::parse(is);
  CaptionerModel model;
  model.config = ModelConfig::from_canonical(j.at("config").dump());
  model.seed = j.at("seed");
  for (auto& [name, t] : load_tensors(prefix + ".tensors"))
    model.params[name] = t;
  for (auto& [name, flag] : j.at("trainable").items())
    model.trainable[name] = flag.get<bool>();
  if (model.trainable.size() != model.params.size())
    throw std::runtime_error("checkpoint " + prefix +
                             ": trainability mask does not cover parameters");
  model.apply_trainability();
  return model;
}

uint64_t params_digest(const std::map<std::string, Tensor>& params,
                       const std::map<std::string, bool>& trainable,
                       bool frozen_only) {
  uint64_t h = 1469598103934665603ull;
  auto mix_bytes = [&h](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, t] : params) {
    if (frozen_only && trainable.at(name)) continue;
    mix_bytes(name.data(), name.size());
    mix_bytes(t.values().data(), t.values().size() * sizeof(float));
  }
  return h;
}

}  // namespace capdet
