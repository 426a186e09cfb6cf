#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "capdet/dataset.hpp"

namespace capdet {

// Positive class is Fake throughout; F1 is asymmetric so this matters.
struct Confusion {
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  int64_t total() const { return tp + fp + tn + fn; }
};

Confusion confusion(const std::vector<Label>& preds,
                    const std::vector<Label>& golds);

double accuracy(const Confusion& c);
// 2PR/(P+R). Conventions: P:=0 when tp+fp=0, R:=0 when tp+fn=0,
// f1:=0 when P+R=0.
double f1(const Confusion& c);

// A named classifier for matrix evaluation. predict maps an image tensor to
// a verdict; it must be safe to call from parallel workers.
struct EvalModel {
  std::string name;
  std::function<Label(const Tensor&)> predict;
};

struct EvalCell {
  double acc = 0.0;
  double f1 = 0.0;
};

// One row per model, one column per fake generator (G-TRAIN first, then the
// six held-out families), plus the per-row average over the 7 subsets.
struct EvalMatrix {
  std::vector<std::string> model_names;
  std::vector<GeneratorTag> columns;
  std::vector<std::vector<EvalCell>> cells;  // [model][column]
  std::vector<EvalCell> avg;                 // [model]
};

struct AgreementCode {
  std::string path;
  Label gold = Label::Real;
  GeneratorTag generator = GeneratorTag::REAL;
  std::string code;  // one char per model, '1' = predicted fake
};

// Predictions for every test image of every model, computed once. The REAL
// pool is shared across all 7 subsets, so each image is classified exactly
// once per model and reused.
struct Predictions {
  std::vector<std::string> model_names;
  std::vector<LabeledImage> images;            // test split, stable order
  std::vector<std::vector<Label>> verdicts;    // [model][image]
};

Predictions predict_all(const std::vector<EvalModel>& models,
                        const Manifest& manifest, const std::string& data_root);

EvalMatrix assemble_matrix(const Predictions& p);
std::vector<AgreementCode> assemble_codes(const Predictions& p);

// Convenience wrappers running predict_all internally.
EvalMatrix evaluate_matrix(const std::vector<EvalModel>& models,
                           const Manifest& manifest,
                           const std::string& data_root);
std::vector<AgreementCode> agreement_codes(const std::vector<EvalModel>& models,
                                           const Manifest& manifest,
                                           const std::string& data_root);

// Serialization: ordered JSON, an aligned text table with "ACC (%) / F1 (%)"
// cells, and codes as CSV lines "path,generator,code".
std::string matrix_to_json(const EvalMatrix& m);
EvalMatrix matrix_from_json(const std::string& s);
std::string matrix_to_table(const EvalMatrix& m);
std::string codes_to_csv(const std::vector<AgreementCode>& codes);

}  // namespace capdet
