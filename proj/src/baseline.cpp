#include "capdet/baseline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <stdexcept>

#include "capdet/parallel.hpp"
#include "capdet/serialize.hpp"

namespace capdet {

using nlohmann::json;

std::string baseline_kind_name(BaselineKind k) {
  return k == BaselineKind::Conv ? "conv" : "patch_transformer";
}

BaselineKind parse_baseline_kind(const std::string& s) {
  if (s == "conv") return BaselineKind::Conv;
  if (s == "patch_transformer") return BaselineKind::PatchTransformer;
  throw std::invalid_argument("unknown baseline kind '" + s + "'");
}

void BaselineConfig::validate() const {
  if (image_size <= 0 || channels <= 0)
    throw std::invalid_argument("baseline config: dimensions must be positive");
  if (kind == BaselineKind::Conv) {
    if (conv_channels.empty())
      throw std::invalid_argument("baseline config: conv_channels empty");
    for (int c : conv_channels)
      if (c <= 0)
        throw std::invalid_argument("baseline config: conv channel <= 0");
  } else {
    encoder.validate();
    if (encoder.image_size != image_size || encoder.channels != channels)
      throw std::invalid_argument(
          "baseline config: encoder image dims disagree with classifier dims");
  }
}

std::string BaselineConfig::canonical_string() const {
  json j;
  j["kind"] = baseline_kind_name(kind);
  j["image_size"] = image_size;
  j["channels"] = channels;
  j["conv_channels"] = conv_channels;
  j["encoder"] = json::parse(encoder.canonical_string());
  return j.dump();
}

uint64_t BaselineConfig::hash() const { return fnv1a64(canonical_string()); }

BaselineConfig BaselineConfig::from_canonical(const std::string& s) {
  json j = json::parse(s);
  BaselineConfig c;
  c.kind = parse_baseline_kind(j.at("kind"));
  c.image_size = j.at("image_size");
  c.channels = j.at("channels");
  c.conv_channels = j.at("conv_channels").get<std::vector<int>>();
  c.encoder = ModelConfig::from_canonical(j.at("encoder").dump());
  return c;
}

void BaselineClassifier::apply_trainability() {
  for (auto& [name, t] : params) t.set_requires_grad(trainable.at(name));
}

std::vector<std::pair<std::string, Tensor>> BaselineClassifier::trainable_params()
    const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, t] : params)
    if (trainable.at(name)) out.emplace_back(name, t);
  return out;
}

BaselineClassifier build_baseline(BaselineKind kind, BaselineConfig config,
                                  uint64_t seed) {
  config.kind = kind;
  config.validate();
  BaselineClassifier clf;
  clf.config = config;
  clf.seed = seed;
  Rng rng(seed, "baseline-init");
  int head_in;
  if (kind == BaselineKind::Conv) {
    int cin = config.channels;
    for (size_t i = 0; i < config.conv_channels.size(); ++i) {
      int cout = config.conv_channels[i];
      int fan_in = cin * 9;
      std::string p = "conv" + std::to_string(i);
      Rng s = rng.stream(p + ".W");
      clf.params[p + ".W"] = Tensor::randn(
          {fan_in, cout}, s, std::sqrt(2.0f / static_cast<float>(fan_in)));
      clf.params[p + ".b"] = Tensor::zeros({cout});
      cin = cout;
    }
    head_in = config.conv_channels.back();
  } else {
    init_encoder_params(config.encoder, rng.stream("encoder"), clf.params);
    head_in = config.encoder.d_model;
  }
  Rng hs = rng.stream("head.W");
  clf.params["head.W"] = Tensor::randn({head_in, 1}, hs, 0.02f);
  clf.params["head.b"] = Tensor::zeros({1});
  for (const auto& [name, _] : clf.params) clf.trainable[name] = true;
  clf.apply_trainability();
  return clf;
}

Tensor baseline_logit(const BaselineClassifier& clf, const Tensor& image) {
  const BaselineConfig& cfg = clf.config;
  if (image.rank() != 3 || image.size(0) != cfg.channels ||
      image.size(1) != cfg.image_size || image.size(2) != cfg.image_size)
    throw std::invalid_argument("baseline: image shape " +
                                shape_str(image.shape()) + " does not match " +
                                std::to_string(cfg.image_size) + "px config");
  Tensor features;  // [1 × head_in]
  if (cfg.kind == BaselineKind::Conv) {
    Tensor x = image;
    int cin = cfg.channels, hw = cfg.image_size;
    for (size_t i = 0; i < cfg.conv_channels.size(); ++i) {
      auto plan = Im2ColPlan::make(cin, hw, hw, 3, 2, 1);
      std::string p = "conv" + std::to_string(i);
      Tensor tokens = gelu(add_rowvec(
          matmul(im2col(x, plan), clf.params.at(p + ".W")),
          clf.params.at(p + ".b")));
      cin = cfg.conv_channels[i];
      hw = plan.out_h;
      if (i + 1 < cfg.conv_channels.size())
        x = reshape(transpose(tokens), {cin, hw, hw});
      else
        features = reshape(mean_rows(tokens), {1, cin});
    }
  } else {
    ForwardOptions opts;
    Tensor tokens = encoder_forward(clf.params, cfg.encoder, image, opts);
    features = reshape(mean_rows(tokens), {1, cfg.encoder.d_model});
  }
  Tensor logit = add(matmul(features, clf.params.at("head.W")),
                     reshape(clf.params.at("head.b"), {1, 1}));
  return reshape(logit, {1});
}

BinaryResult classify_binary(const BaselineClassifier& clf, const Tensor& image) {
  NoGradScope ng;
  BinaryResult out;
  out.logit = baseline_logit(clf, image).item();
  out.p_fake = 1.0 / (1.0 + std::exp(-out.logit));
  out.label = out.p_fake >= 0.5 ? Label::Fake : Label::Real;
  return out;
}

FitResult fit_baseline(BaselineClassifier& clf, const Manifest& train_manifest,
                       const TrainConfig& cfg, const std::string& data_root) {
  cfg.validate();
  Manifest train = filter(train_manifest, "train");
  if (train.records.empty())
    throw std::invalid_argument("fit_baseline: empty train manifest");
  clf.apply_trainability();
  auto trainables = clf.trainable_params();

  int64_t n = static_cast<int64_t>(train.records.size());
  std::vector<Tensor> images(n);
  for (int64_t i = 0; i < n; ++i)
    images[i] = read_image_ppm(data_root + "/" + train.records[i].path,
                               clf.config.image_size);

  AdamConfig adam = cfg.adam;
  adam.lr = cfg.learning_rate;
  AdamState state;
  FitResult result;

  Rng shuffle_rng(cfg.seed, "shuffle");
  std::vector<int64_t> order(n);
  for (int64_t i = 0; i < n; ++i) order[i] = i;

  int64_t global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    Rng er = shuffle_rng.stream(static_cast<uint64_t>(epoch));
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[i], order[er.next_below(static_cast<uint64_t>(i + 1))]);

    double loss_sum = 0.0;
    int64_t correct = 0;
    for (int64_t base = 0; base < n; base += cfg.batch_size) {
      int64_t bn = std::min<int64_t>(cfg.batch_size, n - base);
      std::vector<GradMap> sinks(bn);
      std::vector<double> losses(bn);
      std::vector<int> preds(bn);
      parallel_for(bn, [&](int64_t bi) {
        int64_t idx = order[base + bi];
        float target = train.records[idx].label == Label::Fake ? 1.0f : 0.0f;
        Tensor logit = baseline_logit(clf, images[idx]);
        Tensor loss = bce_with_logits(logit, {target});
        {
          GradSinkScope scope(&sinks[bi]);
          backward(loss);
        }
        losses[bi] = scalar_value(loss);
        preds[bi] = logit.item() >= 0.0f ? 1 : 0;
      });
      GradMap merged;
      for (int64_t bi = 0; bi < bn; ++bi) {
        if (!std::isfinite(losses[bi]))
          throw NumericError("non-finite training loss at step " +
                                 std::to_string(global_step),
                             global_step);
        loss_sum += losses[bi];
        Label gold = train.records[order[base + bi]].label;
        if ((preds[bi] == 1) == (gold == Label::Fake)) ++correct;
        for (auto& [impl, g] : sinks[bi]) {
          auto& acc = merged[impl];
          if (acc.size() != g.size()) acc.assign(g.size(), 0.0f);
          for (size_t j = 0; j < g.size(); ++j) acc[j] += g[j];
        }
      }
      float inv_bn = 1.0f / static_cast<float>(bn);
      std::vector<const std::vector<float>*> grads(trainables.size(), nullptr);
      for (size_t k = 0; k < trainables.size(); ++k) {
        auto it = merged.find(trainables[k].second.impl());
        if (it != merged.end()) {
          for (auto& g : it->second) g *= inv_bn;
          grads[k] = &it->second;
        }
      }
      adam_step(trainables, grads, state, adam);
      ++global_step;
    }
    auto t1 = std::chrono::steady_clock::now();
    EpochStats stats;
    stats.epoch = epoch;
    stats.mean_loss = loss_sum / static_cast<double>(n);
    stats.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    stats.seconds = std::chrono::duration<double>(t1 - t0).count();
    result.history.push_back(stats);
  }
  return result;
}

void save_baseline(const BaselineClassifier& clf, const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor>> tensors(clf.params.begin(),
                                                      clf.params.end());
  save_tensors(prefix + ".tensors", tensors);
  json j;
  j["baseline_config"] = json::parse(clf.config.canonical_string());
  j["trainable"] = clf.trainable;
  j["seed"] = clf.seed;
  std::ofstream os(prefix + ".json");
  if (!os) throw std::runtime_error("cannot write " + prefix + ".json");
  os << j.dump(2) << '\n';
}

BaselineClassifier load_baseline(const std::string& prefix) {
  std::ifstream is(prefix + ".json");
  if (!is) throw std::runtime_error("cannot open " + prefix + ".json");
  json j = json::parse(is);
  BaselineClassifier clf;
  clf.config = BaselineConfig::from_canonical(j.at("baseline_config").dump());
  clf.seed = j.at("seed");
  for (auto& [name, t] : load_tensors(prefix + ".tensors"))
    clf.params[name] = t;
  for (auto& [name, flag] : j.at("trainable").items())
    clf.trainable[name] = flag.get<bool>();
  clf.apply_trainability();
  return clf;
}

}  // namespace capdet
