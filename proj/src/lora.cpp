#include "capdet/lora.hpp"

#include <fstream>
#include <json.hpp>
#include <stdexcept>

#include "capdet/serialize.hpp"

namespace capdet {

using nlohmann::json;

namespace {

const std::set<std::string> kKnownKinds = {"W_q", "W_k", "W_v", "W_o"};

// "W_q" -> "Wq", the suffix used in parameter names.
std::string kind_suffix(const std::string& kind) {
  std::string s;
  for (char c : kind)
    if (c != '_') s += c;
  return s;
}

}  // namespace

void LoraSpec::validate(const ModelConfig& config) const {
  if (rank <= 0)
    throw std::invalid_argument("lora: rank must be positive");
  if (rank > config.d_model)
    throw std::invalid_argument("lora: rank " + std::to_string(rank) +
                                " exceeds d_model " +
                                std::to_string(config.d_model));
  if (alpha <= 0.0f) throw std::invalid_argument("lora: alpha must be positive");
  if (dropout < 0.0f || dropout >= 1.0f)
    throw std::invalid_argument("lora: dropout must be in [0,1)");
  if (target_kinds.empty())
    throw std::invalid_argument("lora: no target kinds");
  for (const auto& k : target_kinds)
    if (!kKnownKinds.count(k))
      throw std::invalid_argument("lora: unknown target kind '" + k + "'");
}

AdaptedModel inject(CaptionerModel model, const LoraSpec& spec, uint64_t seed) {
  spec.validate(model.config);
  AdaptedModel adapted;
  adapted.spec = spec;
  Rng rng(seed, "lora");
  int d = model.config.d_model;
  for (const auto& site : attention_sites(model.config)) {
    if (site.kind != AttnKind::SelfAttn || !site.frozen_stack) continue;
    for (const auto& kind : spec.target_kinds) {
      std::string wname = site.prefix + "." + kind_suffix(kind);
      LoraLayer layer;
      layer.name = wname;
      layer.W = model.param(wname);  // aliases the base tensor
      Rng s = rng.stream(wname);
      layer.A = Tensor::randn({spec.rank, d}, s, 0.02f, /*requires_grad=*/true);
      layer.B = Tensor::zeros({d, spec.rank}, /*requires_grad=*/true);
      layer.rank = spec.rank;
      layer.alpha = spec.alpha;
      layer.dropout = spec.dropout;
      adapted.adapters.layers.emplace(wname, std::move(layer));
    }
  }
  adapted.base = std::move(model);
  return adapted;
}

Tensor lora_forward(const LoraLayer& layer, const Tensor& x, bool train,
                    Rng* rng) {
  if (x.rank() != 2 || x.size(0) != layer.W.size(1))
    throw std::invalid_argument("lora_forward: input " + shape_str(x.shape()) +
                                " does not match weight " +
                                shape_str(layer.W.shape()));
  Tensor xin = x;
  if (train && layer.dropout > 0.0f) {
    if (!rng) throw std::invalid_argument("lora_forward: train mode needs rng");
    xin = dropout(x, layer.dropout, *rng);
  }
  Tensor low = matmul(layer.A, xin);  // [r×n]
  Tensor up = matmul(layer.B, low);   // [d×n]
  return add(matmul(layer.W, x),
             scale(up, layer.alpha / static_cast<float>(layer.rank)));
}

Tensor merge(const LoraLayer& layer) {
  NoGradScope ng;
  Tensor delta = matmul(layer.B, layer.A);
  // B = 0 keeps W' bit-identical to W: adding exact zeros is exact.
  return add(layer.W, scale(delta, layer.alpha / static_cast<float>(layer.rank)));
}

std::vector<std::pair<std::string, Tensor>> trainable_parameters(
    const AdaptedModel& adapted) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, layer] : adapted.adapters.layers) {
    out.emplace_back(name + ".lora.A", layer.A);
    out.emplace_back(name + ".lora.B", layer.B);
  }
  for (auto& p : adapted.base.trainable_params()) out.push_back(p);
  return out;
}

int64_t adapter_param_count(const AdaptedModel& adapted) {
  int64_t n = 0;
  for (const auto& [_, layer] : adapted.adapters.layers)
    n += layer.A.numel() + layer.B.numel();
  return n;
}

void save_adapter(const AdaptedModel& adapted, const std::string& path) {
  json header;
  header["spec"] = {{"rank", adapted.spec.rank},
                    {"alpha", adapted.spec.alpha},
                    {"dropout", adapted.spec.dropout},
                    {"target_kinds", adapted.spec.target_kinds}};
  header["base_config_hash"] = adapted.base.config.hash();
  header["seed"] = adapted.base.seed;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write adapter file: " + path);
  os << header.dump() << '\n';
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (const auto& [name, layer] : adapted.adapters.layers) {
    tensors.emplace_back(name + ".lora.A", layer.A);
    tensors.emplace_back(name + ".lora.B", layer.B);
  }
  write_tensors(os, tensors);
  if (!os) throw std::runtime_error("adapter write failed: " + path);
}

AdaptedModel load_adapter(CaptionerModel base, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open adapter file: " + path);
  std::string header_line;
  std::getline(is, header_line);
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception&) {
    throw std::runtime_error("corrupt adapter file (bad header): " + path);
  }
  uint64_t want_hash = header.at("base_config_hash");
  if (want_hash != base.config.hash())
    throw std::runtime_error(
        "adapter file " + path + " was saved against a different base config " +
        "(hash mismatch)");
  AdaptedModel adapted;
  adapted.spec.rank = header.at("spec").at("rank");
  adapted.spec.alpha = header.at("spec").at("alpha");
  adapted.spec.dropout = header.at("spec").at("dropout");
  adapted.spec.target_kinds.clear();
  for (const auto& k : header.at("spec").at("target_kinds"))
    adapted.spec.target_kinds.insert(k.get<std::string>());
  adapted.base = std::move(base);

  auto tensors = read_tensors(is);
  std::map<std::string, Tensor> by_name(tensors.begin(), tensors.end());
  for (auto& [name, t] : by_name) {
    constexpr std::string_view suffix_a = ".lora.A";
    if (name.size() <= suffix_a.size() ||
        name.compare(name.size() - suffix_a.size(), suffix_a.size(),
                     suffix_a) != 0)
      continue;
    std::string wname = name.substr(0, name.size() - suffix_a.size());
    auto bit = by_name.find(wname + ".lora.B");
    if (bit == by_name.end())
      throw std::runtime_error("corrupt adapter file (missing B for " + wname +
                               "): " + path);
    LoraLayer layer;
    layer.name = wname;
    layer.W = adapted.base.param(wname);
    layer.A = t;
    layer.B = bit->second;
    layer.A.set_requires_grad(true);
    layer.B.set_requires_grad(true);
    layer.rank = adapted.spec.rank;
    layer.alpha = adapted.spec.alpha;
    layer.dropout = adapted.spec.dropout;
    adapted.adapters.layers.emplace(wname, std::move(layer));
  }
  if (adapted.adapters.layers.empty())
    throw std::runtime_error("corrupt adapter file (no adapters): " + path);
  return adapted;
}

}  // namespace capdet
