#include "capdet/metrics.hpp"

#include <cstdio>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

#include "capdet/parallel.hpp"

namespace capdet {

using nlohmann::json;

Confusion confusion(const std::vector<Label>& preds,
                    const std::vector<Label>& golds) {
  if (preds.empty()) throw std::invalid_argument("confusion: empty input");
  if (preds.size() != golds.size())
    throw std::invalid_argument("confusion: length mismatch (" +
                                std::to_string(preds.size()) + " vs " +
                                std::to_string(golds.size()) + ")");
  Confusion c;
  for (size_t i = 0; i < preds.size(); ++i) {
    bool p = preds[i] == Label::Fake, g = golds[i] == Label::Fake;
    if (p && g) ++c.tp;
    else if (p && !g) ++c.fp;
    else if (!p && g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double accuracy(const Confusion& c) {
  if (c.total() == 0) throw std::invalid_argument("accuracy: empty confusion");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

double f1(const Confusion& c) {
  if (c.total() == 0) throw std::invalid_argument("f1: empty confusion");
  double p = c.tp + c.fp == 0
                 ? 0.0
                 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  double r = c.tp + c.fn == 0
                 ? 0.0
                 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (p + r == 0.0) return 0.0;
  return 2.0 * p * r / (p + r);
}

Predictions predict_all(const std::vector<EvalModel>& models,
                        const Manifest& manifest,
                        const std::string& data_root) {
  if (models.empty()) throw std::invalid_argument("predict_all: no models");
  Predictions out;
  for (const auto& m : models) out.model_names.push_back(m.name);
  Manifest test = filter(manifest, "test");
  if (test.records.empty())
    throw std::invalid_argument("predict_all: empty test split");
  out.images = test.records;

  int64_t n = static_cast<int64_t>(out.images.size());
  std::vector<Tensor> loaded(n);
  parallel_for(n, [&](int64_t i) {
    loaded[i] = read_image_ppm(data_root + "/" + out.images[i].path);
  });

  out.verdicts.assign(models.size(), std::vector<Label>(n, Label::Real));
  for (size_t mi = 0; mi < models.size(); ++mi) {
    auto& row = out.verdicts[mi];
    parallel_for(n, [&](int64_t i) { row[i] = models[mi].predict(loaded[i]); });
  }
  return out;
}

EvalMatrix assemble_matrix(const Predictions& p) {
  EvalMatrix m;
  m.model_names = p.model_names;
  m.columns = fake_generators();
  int64_t n = static_cast<int64_t>(p.images.size());
  for (size_t mi = 0; mi < p.model_names.size(); ++mi) {
    std::vector<EvalCell> row;
    double acc_sum = 0.0, f1_sum = 0.0;
    for (GeneratorTag gen : m.columns) {
      std::vector<Label> preds, golds;
      for (int64_t i = 0; i < n; ++i) {
        GeneratorTag g = p.images[i].generator;
        if (g != gen && g != GeneratorTag::REAL) continue;
        preds.push_back(p.verdicts[mi][i]);
        golds.push_back(p.images[i].label);
      }
      if (preds.empty())
        throw std::invalid_argument("assemble_matrix: empty subset " +
                                    generator_name(gen));
      Confusion c = confusion(preds, golds);
      EvalCell cell{accuracy(c), f1(c)};
      acc_sum += cell.acc;
      f1_sum += cell.f1;
      row.push_back(cell);
    }
    m.cells.push_back(row);
    double k = static_cast<double>(m.columns.size());
    m.avg.push_back({acc_sum / k, f1_sum / k});
  }
  return m;
}

std::vector<AgreementCode> assemble_codes(const Predictions& p) {
  std::vector<AgreementCode> codes;
  for (size_t i = 0; i < p.images.size(); ++i) {
    AgreementCode c;
    c.path = p.images[i].path;
    c.gold = p.images[i].label;
    c.generator = p.images[i].generator;
    for (size_t mi = 0; mi < p.model_names.size(); ++mi)
      c.code.push_back(p.verdicts[mi][i] == Label::Fake ? '1' : '0');
    codes.push_back(std::move(c));
  }
  return codes;
}

EvalMatrix evaluate_matrix(const std::vector<EvalModel>& models,
                           const Manifest& manifest,
                           const std::string& data_root) {
  return assemble_matrix(predict_all(models, manifest, data_root));
}

std::vector<AgreementCode> agreement_codes(const std::vector<EvalModel>& models,
                                           const Manifest& manifest,
                                           const std::string& data_root) {
  return assemble_codes(predict_all(models, manifest, data_root));
}

std::string matrix_to_json(const EvalMatrix& m) {
  json j;
  j["columns"] = json::array();
  for (GeneratorTag g : m.columns) j["columns"].push_back(generator_name(g));
  j["models"] = json::array();
  for (size_t mi = 0; mi < m.model_names.size(); ++mi) {
    json row;
    row["name"] = m.model_names[mi];
    row["cells"] = json::array();
    for (const EvalCell& c : m.cells[mi])
      row["cells"].push_back({{"acc", c.acc}, {"f1", c.f1}});
    row["avg"] = {{"acc", m.avg[mi].acc}, {"f1", m.avg[mi].f1}};
    j["models"].push_back(row);
  }
  return j.dump(2) + "\n";
}

EvalMatrix matrix_from_json(const std::string& s) {
  json j = json::parse(s);
  EvalMatrix m;
  for (const auto& c : j.at("columns"))
    m.columns.push_back(parse_generator(c.get<std::string>()));
  for (const auto& row : j.at("models")) {
    m.model_names.push_back(row.at("name"));
    std::vector<EvalCell> cells;
    for (const auto& c : row.at("cells"))
      cells.push_back({c.at("acc").get<double>(), c.at("f1").get<double>()});
    m.cells.push_back(cells);
    m.avg.push_back({row.at("avg").at("acc").get<double>(),
                     row.at("avg").at("f1").get<double>()});
  }
  return m;
}

static std::string cell_text(const EvalCell& c) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%5.1f / %5.1f", 100.0 * c.acc, 100.0 * c.f1);
  return buf;
}

std::string matrix_to_table(const EvalMatrix& m) {
  size_t name_w = 5;
  for (const auto& n : m.model_names) name_w = std::max(name_w, n.size());
  const size_t cell_w = 13;  // "100.0 / 100.0"

  std::ostringstream os;
  os << "ACC (%) / F1 (%)\n";
  os << std::string(name_w, ' ');
  for (GeneratorTag g : m.columns) {
    std::string h = generator_name(g);
    os << "  " << std::string(cell_w - std::min(cell_w, h.size()), ' ') << h;
  }
  os << "  " << std::string(cell_w - 3, ' ') << "Avg\n";
  for (size_t mi = 0; mi < m.model_names.size(); ++mi) {
    os << m.model_names[mi]
       << std::string(name_w - m.model_names[mi].size(), ' ');
    for (const EvalCell& c : m.cells[mi]) os << "  " << cell_text(c);
    os << "  " << cell_text(m.avg[mi]) << "\n";
  }
  return os.str();
}

std::string codes_to_csv(const std::vector<AgreementCode>& codes) {
  std::ostringstream os;
  os << "path,generator,code\n";
  for (const auto& c : codes)
    os << c.path << ',' << generator_name(c.generator) << ',' << c.code << '\n';
  return os.str();
}

}  // namespace capdet
