// capdet: corpus generation, training, evaluation and reporting in one tool.
//
//   capdet gen-data [--config FILE] [key=value ...]
//   capdet train    [--config FILE] [key=value ...]
//   capdet eval     [--config FILE] [key=value ...] RUN_DIR...
//   capdet report   EVAL_DIR...
//
// Configuration is a flat key=value file; later command-line pairs override
// file values. CAPDET_SEED overrides the seed key. Exit codes: 0 success,
// 1 usage or config error, 2 data error, 3 numeric failure during training.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "capdet/baseline.hpp"
#include "capdet/caption.hpp"
#include "capdet/dataset.hpp"
#include "capdet/lora.hpp"
#include "capdet/metrics.hpp"
#include "capdet/model.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace capdet;

namespace {

struct Config {
  std::map<std::string, std::string> kv;

  bool has(const std::string& k) const { return kv.count(k) != 0; }
  std::string get(const std::string& k, const std::string& dflt) const {
    auto it = kv.find(k);
    return it == kv.end() ? dflt : it->second;
  }
  std::string require(const std::string& k) const {
    auto it = kv.find(k);
    if (it == kv.end())
      throw std::invalid_argument("missing required config key '" + k + "'");
    return it->second;
  }
  int64_t get_int(const std::string& k, int64_t dflt) const {
    auto it = kv.find(k);
    if (it == kv.end()) return dflt;
    try {
      size_t used = 0;
      int64_t v = std::stoll(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(k);
      return v;
    } catch (const std::exception&) {
      throw std::invalid_argument("config key '" + k + "' is not an integer: " +
                                  it->second);
    }
  }
  double get_num(const std::string& k, double dflt) const {
    auto it = kv.find(k);
    if (it == kv.end()) return dflt;
    try {
      size_t used = 0;
      double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(k);
      return v;
    } catch (const std::exception&) {
      throw std::invalid_argument("config key '" + k + "' is not a number: " +
                                  it->second);
    }
  }
  uint64_t seed() const {
    if (const char* env = std::getenv("CAPDET_SEED"))
      return std::stoull(env);
    return static_cast<uint64_t>(get_int("seed", 42));
  }
};

void load_config_file(Config& cfg, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos || line[start] == '#') continue;
    size_t eq = line.find('=', start);
    if (eq == std::string::npos)
      throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                  ": expected key=value");
    std::string key = line.substr(start, eq - start);
    std::string val = line.substr(eq + 1);
    while (!key.empty() && (key.back() == ' ' || key.back() == '\t'))
      key.pop_back();
    size_t vs = val.find_first_not_of(" \t");
    val = vs == std::string::npos ? "" : val.substr(vs);
    while (!val.empty() && (val.back() == ' ' || val.back() == '\t' ||
                            val.back() == '\r'))
      val.pop_back();
    cfg.kv[key] = val;
  }
}

// Parses --config plus key=value overrides; anything else lands in rest.
Config parse_args(const std::vector<std::string>& args,
                  std::vector<std::string>* rest) {
  Config cfg;
  std::vector<std::pair<std::string, std::string>> overrides;
  for (size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 == args.size())
        throw std::invalid_argument("--config needs a file argument");
      load_config_file(cfg, args[++i]);
    } else if (size_t eq = args[i].find('='); eq != std::string::npos) {
      overrides.emplace_back(args[i].substr(0, eq), args[i].substr(eq + 1));
    } else if (rest) {
      rest->push_back(args[i]);
    } else {
      throw std::invalid_argument("unexpected argument '" + args[i] + "'");
    }
  }
  for (auto& [k, v] : overrides) cfg.kv[k] = v;
  return cfg;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << content;
  if (!os) throw std::runtime_error("write failed for " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Effective settings echoed into the run directory for reproducibility.
void echo_config(const Config& cfg, const std::string& path) {
  std::ostringstream os;
  for (const auto& [k, v] : cfg.kv) os << k << "=" << v << "\n";
  os << "seed=" << cfg.seed() << "\n";
  write_file(path, os.str());
}

ModelConfig model_config_from(const Config& cfg, Architecture arch) {
  ModelConfig mc;
  mc.architecture = arch;
  mc.image_size = static_cast<int>(cfg.get_int("image_size", mc.image_size));
  mc.patch_size = static_cast<int>(cfg.get_int("patch_size", mc.patch_size));
  mc.d_model = static_cast<int>(cfg.get_int("d_model", mc.d_model));
  mc.n_heads = static_cast<int>(cfg.get_int("n_heads", mc.n_heads));
  mc.encoder_layers =
      static_cast<int>(cfg.get_int("encoder_layers", mc.encoder_layers));
  mc.decoder_layers =
      static_cast<int>(cfg.get_int("decoder_layers", mc.decoder_layers));
  mc.n_query_tokens =
      static_cast<int>(cfg.get_int("n_query_tokens", mc.n_query_tokens));
  mc.bridge_layers =
      static_cast<int>(cfg.get_int("bridge_layers", mc.bridge_layers));
  mc.mlp_hidden = static_cast<int>(cfg.get_int("mlp_hidden", mc.mlp_hidden));
  mc.validate();
  return mc;
}

LoraSpec lora_spec_from(const Config& cfg) {
  LoraSpec spec;
  spec.rank = static_cast<int>(cfg.get_int("lora_rank", spec.rank));
  spec.alpha = static_cast<float>(cfg.get_num("lora_alpha", spec.alpha));
  spec.dropout = static_cast<float>(cfg.get_num("lora_dropout", spec.dropout));
  if (cfg.has("lora_targets")) {
    spec.target_kinds.clear();
    std::stringstream ss(cfg.require("lora_targets"));
    std::string kind;
    while (std::getline(ss, kind, ',')) spec.target_kinds.insert(kind);
  }
  return spec;
}

TrainConfig train_config_from(const Config& cfg) {
  TrainConfig tc;
  tc.learning_rate = static_cast<float>(cfg.get_num("lr", tc.learning_rate));
  tc.epochs = static_cast<int>(cfg.get_int("epochs", tc.epochs));
  tc.batch_size = static_cast<int>(cfg.get_int("batch_size", tc.batch_size));
  tc.seed = cfg.seed();
  tc.validate();
  return tc;
}

int cmd_gen_data(const Config& cfg) {
  std::string out = cfg.get("out", "data");
  int n_train = static_cast<int>(cfg.get_int("n_train", 1000));
  int n_test = static_cast<int>(cfg.get_int("n_test", 250));
  int image_size = static_cast<int>(cfg.get_int("image_size", 32));
  uint64_t seed = cfg.seed();

  Manifest m = generate_corpus(out, n_train, n_test, seed, image_size);
  std::cout << "corpus written to " << out << " (seed " << seed << ")\n";
  std::cout << "split  generator  count\n";
  for (const auto& [key, count] : m.counts())
    std::cout << key.first << "  " << generator_name(key.second) << "  "
              << count << "\n";
  return 0;
}

void write_history(const FitResult& result, const std::string& path) {
  std::ostringstream os;
  for (const EpochStats& e : result.history) {
    json j;
    j["epoch"] = e.epoch;
    j["mean_loss"] = e.mean_loss;
    j["train_acc"] = e.train_acc;
    j["seconds"] = e.seconds;
    os << j.dump() << "\n";
  }
  write_file(path, os.str());
}

int cmd_train(const Config& cfg) {
  std::string data = cfg.require("data");
  std::string run = cfg.require("run");
  std::string model_kind = cfg.get("model", "query_bridge");
  bool use_lora = cfg.get_int("lora", model_kind == "query_bridge_lora") != 0;
  if (model_kind == "query_bridge_lora") model_kind = "query_bridge";

  Manifest manifest = load_manifest(data);
  TrainConfig tc = train_config_from(cfg);
  uint64_t seed = cfg.seed();

  fs::create_directories(run);
  echo_config(cfg, run + "/config.txt");

  FitResult result;
  json digest;

  if (model_kind == "conv" || model_kind == "patch_transformer") {
    BaselineConfig bc;
    bc.kind = parse_baseline_kind(model_kind);
    bc.image_size = static_cast<int>(cfg.get_int("image_size", 32));
    if (bc.kind == BaselineKind::PatchTransformer) {
      bc.encoder = model_config_from(cfg, Architecture::QueryBridge);
      bc.encoder.decoder_layers = 1;  // unused by the baseline
    }
    BaselineClassifier clf = build_baseline(bc.kind, bc, seed);
    int64_t total = 0, trainable = 0;
    for (const auto& [name, t] : clf.params) {
      total += t.numel();
      if (clf.trainable.at(name)) trainable += t.numel();
    }
    std::cout << "trainable params: " << trainable << " / " << total << " ("
              << 100.0 * trainable / total << "%)\n";
    result = fit_baseline(clf, manifest, tc, data);
    save_baseline(clf, run + "/model");
    digest["frozen_before"] = "0";
    digest["frozen_after"] = "0";
    digest["match"] = true;
  } else {
    Architecture arch = parse_architecture(model_kind);
    ModelConfig mc = model_config_from(cfg, arch);
    CaptionerModel model = init_model(mc, seed);

    std::optional<AdaptedModel> adapted;
    if (use_lora) {
      LoraSpec spec = lora_spec_from(cfg);
      spec.validate(mc);
      adapted = inject(std::move(model), spec, seed);
      int64_t adapter_n = adapter_param_count(*adapted);
      int64_t total = adapted->base.total_param_count() + adapter_n;
      int64_t base_trainable = adapted->base.trainable_param_count();
      std::cout << "adapter params: " << adapter_n << " / " << total << " ("
                << 100.0 * adapter_n / total << "%)\n";
      std::cout << "trainable base params: " << base_trainable << "\n";
      std::cout << "trainable params: " << (adapter_n + base_trainable)
                << " / " << total << " ("
                << 100.0 * (adapter_n + base_trainable) / total << "%)\n";
    } else {
      std::cout << "trainable params: " << model.trainable_param_count()
                << " / " << model.total_param_count() << " ("
                << 100.0 * model.trainable_param_count() /
                       model.total_param_count()
                << "%)\n";
    }

    CaptionerModel& live = use_lora ? adapted->base : model;
    uint64_t before = params_digest(live.params, live.trainable, true);
    result = fit(live, use_lora ? &adapted->adapters : nullptr, manifest, tc,
                 data);
    uint64_t after = params_digest(live.params, live.trainable, true);
    digest["frozen_before"] = std::to_string(before);
    digest["frozen_after"] = std::to_string(after);
    digest["match"] = before == after;
    std::cout << "frozen digest: " << (before == after ? "pass" : "FAIL")
              << "\n";
    if (before != after)
      throw std::runtime_error("frozen parameters changed during training");

    save_checkpoint(live, run + "/model");
    if (use_lora) save_adapter(*adapted, run + "/adapter.capdet");
  }

  write_history(result, run + "/history.jsonl");
  write_file(run + "/digest.json", digest.dump(2) + "\n");
  if (!result.history.empty()) {
    const EpochStats& last = result.history.back();
    std::cout << "final epoch " << last.epoch << ": loss " << last.mean_loss
              << ", train acc " << last.train_acc << "\n";
  }
  std::cout << "run written to " << run << "\n";
  return 0;
}

// Rebuilds the classifier a run directory trained, as an EvalModel.
EvalModel load_run(const std::string& run) {
  Config rc;
  load_config_file(rc, run + "/config.txt");
  std::string model_kind = rc.get("model", "query_bridge");
  bool use_lora = rc.get_int("lora", model_kind == "query_bridge_lora") != 0;
  if (model_kind == "query_bridge_lora") model_kind = "query_bridge";

  EvalModel em;
  em.name = rc.get("name", model_kind + (use_lora ? "_lora" : ""));
  if (model_kind == "conv" || model_kind == "patch_transformer") {
    auto clf = std::make_shared<BaselineClassifier>(load_baseline(run + "/model"));
    em.predict = [clf](const Tensor& img) {
      return classify_binary(*clf, img).label;
    };
  } else if (use_lora) {
    auto adapted = std::make_shared<AdaptedModel>(
        load_adapter(load_checkpoint(run + "/model"), run + "/adapter.capdet"));
    em.predict = [adapted](const Tensor& img) {
      return classify(adapted->base, img, &adapted->adapters).label;
    };
  } else {
    auto model = std::make_shared<CaptionerModel>(load_checkpoint(run + "/model"));
    em.predict = [model](const Tensor& img) {
      return classify(*model, img).label;
    };
  }
  return em;
}

int cmd_eval(const Config& cfg, const std::vector<std::string>& runs) {
  if (runs.empty())
    throw std::invalid_argument("eval: no run directories given");
  std::string data = cfg.require("data");
  std::string out = cfg.require("out");
  Manifest manifest = load_manifest(data);

  std::vector<EvalModel> models;
  for (const std::string& run : runs) models.push_back(load_run(run));

  Predictions preds = predict_all(models, manifest, data);
  EvalMatrix matrix = assemble_matrix(preds);
  std::vector<AgreementCode> codes = assemble_codes(preds);

  fs::create_directories(out);
  write_file(out + "/matrix.json", matrix_to_json(matrix));
  write_file(out + "/matrix.txt", matrix_to_table(matrix));
  write_file(out + "/codes.csv", codes_to_csv(codes));
  json meta;
  meta["corpus_seed"] = manifest.corpus_seed;
  meta["models"] = matrix.model_names;
  write_file(out + "/eval.json", meta.dump(2) + "\n");

  std::cout << matrix_to_table(matrix);
  std::cout << "eval artifacts written to " << out << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& dirs) {
  if (dirs.empty())
    throw std::invalid_argument("report: no eval directories given");
  EvalMatrix merged;
  std::optional<uint64_t> corpus_seed;
  for (const std::string& dir : dirs) {
    json meta = json::parse(read_file(dir + "/eval.json"));
    uint64_t seed = meta.at("corpus_seed");
    if (corpus_seed && *corpus_seed != seed)
      throw std::runtime_error(
          "report: eval directories cover different corpora (seed " +
          std::to_string(*corpus_seed) + " vs " + std::to_string(seed) +
          " in " + dir + "); refusing to merge");
    corpus_seed = seed;
    EvalMatrix m = matrix_from_json(read_file(dir + "/matrix.json"));
    if (merged.columns.empty()) merged.columns = m.columns;
    for (size_t i = 0; i < m.model_names.size(); ++i) {
      merged.model_names.push_back(m.model_names[i]);
      merged.cells.push_back(m.cells[i]);
      merged.avg.push_back(m.avg[i]);
    }
  }
  std::vector<size_t> order(merged.model_names.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return merged.avg[a].acc > merged.avg[b].acc;
  });
  EvalMatrix sorted;
  sorted.columns = merged.columns;
  for (size_t i : order) {
    sorted.model_names.push_back(merged.model_names[i]);
    sorted.cells.push_back(merged.cells[i]);
    sorted.avg.push_back(merged.avg[i]);
  }
  std::cout << matrix_to_table(sorted);
  // Flag the best accuracy per column.
  for (size_t c = 0; c <= sorted.columns.size(); ++c) {
    double best = -1.0;
    size_t who = 0;
    for (size_t r = 0; r < sorted.model_names.size(); ++r) {
      double acc = c < sorted.columns.size() ? sorted.cells[r][c].acc
                                             : sorted.avg[r].acc;
      if (acc > best) {
        best = acc;
        who = r;
      }
    }
    std::string col = c < sorted.columns.size()
                          ? generator_name(sorted.columns[c])
                          : "Avg";
    std::cout << "best " << col << ": " << sorted.model_names[who] << " ("
              << 100.0 * best << "%)\n";
  }
  return 0;
}

int usage() {
  std::cerr << "usage: capdet <gen-data|train|eval|report> [--config FILE] "
               "[key=value ...] [dirs...]\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) return usage();
  std::string cmd = argv[1];
  std::vector<std::string> args(argv + 2, argv + argc);
  try {
    if (cmd == "gen-data") {
      return cmd_gen_data(parse_args(args, nullptr));
    } else if (cmd == "train") {
      return cmd_train(parse_args(args, nullptr));
    } else if (cmd == "eval") {
      std::vector<std::string> runs;
      Config cfg = parse_args(args, &runs);
      return cmd_eval(cfg, runs);
    } else if (cmd == "report") {
      std::vector<std::string> dirs;
      parse_args(args, &dirs);
      return cmd_report(dirs);
    }
    std::cerr << "unknown command '" << cmd << "'\n";
    return usage();
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << " (step " << e.step
              << ")\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
