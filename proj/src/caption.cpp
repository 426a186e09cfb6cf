#include "capdet/caption.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "capdet/parallel.hpp"

namespace capdet {

Caption caption_of(Label label, int max_len) {
  if (max_len < 3)
    throw std::invalid_argument("caption_of: max_len must be >= 3");
  Caption c;
  int word = label == Label::Real ? kTokReal : kTokFake;
  c.tokens = {kBos, word, kEos};
  c.tokens.resize(max_len, kPad);
  c.text = "[BOS] " + token_text(word) + " [EOS]";
  return c;
}

Label label_of(const Caption& caption) {
  for (Label l : {Label::Real, Label::Fake})
    if (caption_of(l, static_cast<int>(caption.tokens.size())).tokens ==
        caption.tokens)
      return l;
  throw std::invalid_argument("label_of: not a canonical caption");
}

void TrainConfig::validate() const {
  if (learning_rate <= 0 || epochs < 0 || batch_size <= 0)
    throw std::invalid_argument(
        "train config: learning_rate and batch_size must be positive, epochs "
        "non-negative");
}

Tensor caption_loss(const Tensor& logits, const Caption& target) {
  int64_t prefix_len = static_cast<int64_t>(target.tokens.size()) - 1;
  if (logits.rank() != 2 || logits.size(0) != prefix_len)
    throw std::invalid_argument("caption_loss: expected " +
                                std::to_string(prefix_len) + " logit rows, got " +
                                shape_str(logits.shape()));
  std::vector<int> next(target.tokens.begin() + 1, target.tokens.end());
  return cross_entropy_logits(logits, next, kPad);
}

namespace {

// Sum of next-token log-likelihoods of a canonical caption given ctx tokens.
double caption_loglik(const CaptionerModel& model, const Tensor& ctx,
                      const Caption& caption, const ForwardOptions& opts) {
  std::vector<int> prefix(caption.tokens.begin(), caption.tokens.end() - 1);
  Tensor logits = decode_logits(model, ctx, prefix, opts);
  double ll = 0.0;
  int64_t vocab = logits.size(1);
  for (size_t t = 0; t + 1 < caption.tokens.size(); ++t) {
    int target = caption.tokens[t + 1];
    if (target == kPad) continue;
    const float* row = logits.values().data() + t * vocab;
    double mx = row[0];
    for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, (double)row[c]);
    double denom = 0.0;
    for (int64_t c = 0; c < vocab; ++c) denom += std::exp(row[c] - mx);
    ll += row[target] - mx - std::log(denom);
  }
  return ll;
}

}  // namespace

CaptionScores classify(const CaptionerModel& model, const Tensor& image,
                       const AdapterSet* adapters) {
  NoGradScope ng;
  ForwardOptions opts;
  opts.adapters = adapters;
  Tensor ctx = bridge(model, encode_image(model, image, opts), opts);
  CaptionScores out;
  int max_len = model.config.max_caption_len;
  out.ll_real = caption_loglik(model, ctx, caption_of(Label::Real, max_len), opts);
  out.ll_fake = caption_loglik(model, ctx, caption_of(Label::Fake, max_len), opts);
  // Ties go to Fake: the conservative call for a detector.
  out.label = out.ll_real - out.ll_fake > 1e-9 ? Label::Real : Label::Fake;
  return out;
}

Caption greedy_decode(const CaptionerModel& model, const Tensor& image,
                      const AdapterSet* adapters) {
  NoGradScope ng;
  ForwardOptions opts;
  opts.adapters = adapters;
  Tensor ctx = bridge(model, encode_image(model, image, opts), opts);
  Caption out;
  out.tokens = {kBos};
  while (static_cast<int>(out.tokens.size()) < model.config.max_caption_len) {
    Tensor logits = decode_logits(model, ctx, out.tokens, opts);
    int64_t vocab = logits.size(1);
    const float* row =
        logits.values().data() + (out.tokens.size() - 1) * vocab;
    int best = 0;
    for (int64_t c = 1; c < vocab; ++c)
      if (row[c] > row[best]) best = static_cast<int>(c);
    out.tokens.push_back(best);
    if (best == kEos) break;
  }
  for (size_t i = 0; i < out.tokens.size(); ++i) {
    if (i) out.text += ' ';
    out.text += token_text(out.tokens[i]);
  }
  return out;
}

FitResult fit(CaptionerModel& model, AdapterSet* adapters,
              const Manifest& train_manifest, const TrainConfig& cfg,
              const std::string& data_root) {
  cfg.validate();
  Manifest train = filter(train_manifest, "train");
  if (train.records.empty())
    throw std::invalid_argument("fit: empty train manifest");
  model.apply_trainability();

  // Trainable set: adapter matrices plus the architecture-trainable params.
  std::vector<std::pair<std::string, Tensor>> trainables;
  if (adapters)
    for (auto& [name, layer] : adapters->layers) {
      trainables.emplace_back(name + ".lora.A", layer.A);
      trainables.emplace_back(name + ".lora.B", layer.B);
    }
  for (auto& p : model.trainable_params()) trainables.push_back(p);
  if (trainables.empty())
    throw std::invalid_argument("fit: model has no trainable parameters");

  int64_t n = static_cast<int64_t>(train.records.size());
  std::vector<Tensor> images(n);
  for (int64_t i = 0; i < n; ++i)
    images[i] = read_image_ppm(data_root + "/" + train.records[i].path,
                               model.config.image_size);

  // The encoder runs untaped and cacheable when nothing inside it trains.
  bool encoder_static = true;
  for (const auto& [name, t] : trainables)
    if (name.rfind("enc.", 0) == 0) encoder_static = false;
  if (adapters)
    for (const auto& [name, _] : adapters->layers)
      if (name.rfind("enc.", 0) == 0) encoder_static = false;
  std::vector<Tensor> enc_cache;
  if (encoder_static) {
    enc_cache.resize(n);
    parallel_for(n, [&](int64_t i) {
      NoGradScope ng;
      enc_cache[i] = encode_image(model, images[i]);
    });
  }

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
      int64_t step = global_step;
      parallel_for(bn, [&](int64_t bi) {
        int64_t idx = order[base + bi];
        const LabeledImage& rec = train.records[idx];
        Rng drop_rng = Rng(cfg.seed, "dropout")
                           .stream(static_cast<uint64_t>(step))
                           .stream(static_cast<uint64_t>(bi));
        ForwardOptions opts;
        opts.train = true;
        opts.rng = &drop_rng;
        opts.adapters = adapters;
        Tensor enc = encoder_static ? enc_cache[idx]
                                    : encode_image(model, images[idx], opts);
        Tensor ctx = bridge(model, enc, opts);
        Caption gold = caption_of(rec.label, model.config.max_caption_len);
        std::vector<int> prefix(gold.tokens.begin(), gold.tokens.end() - 1);
        Tensor logits = decode_logits(model, ctx, prefix, opts);
        Tensor loss = caption_loss(logits, gold);
        {
          GradSinkScope scope(&sinks[bi]);
          backward(loss);
        }
        losses[bi] = scalar_value(loss);
        const float* row0 = logits.values().data();
        preds[bi] = row0[kTokFake] >= row0[kTokReal] ? 1 : 0;
      });

      // Merge per-example grads in example order, then mean.
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

}  // namespace capdet
