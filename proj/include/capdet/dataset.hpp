#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "capdet/tensor.hpp"

namespace capdet {

enum class Label { Real = 0, Fake = 1 };
std::string label_name(Label l);
Label parse_label(const std::string& s);

enum class GeneratorTag { REAL, G_TRAIN, G_A, G_B, G_C, G_D, G_E, G_F };
std::string generator_name(GeneratorTag g);
GeneratorTag parse_generator(const std::string& s);
// The held-out fake generators, in column order.
std::vector<GeneratorTag> fake_generators();

struct LabeledImage {
  std::string path;
  Label label = Label::Real;
  GeneratorTag generator = GeneratorTag::REAL;
  std::string split;  // "train" | "test"
};

struct Manifest {
  std::vector<LabeledImage> records;
  uint64_t corpus_seed = 0;

  std::map<std::pair<std::string, GeneratorTag>, int64_t> counts() const;
  void validate() const;  // label/generator consistency, split placement
};

// Procedural corpus: smooth band-limited textures for REAL, plus one
// characteristic artifact family per fake generator. Fully deterministic in
// (seed, counts, image_size). Writes <out_dir>/images/*.ppm, manifest.jsonl
// and corpus.json.
Manifest generate_corpus(const std::string& out_dir, int n_train, int n_test,
                         uint64_t seed, int image_size = 32);

// Single image synthesis, exposed for tests. `index` is the corpus-wide
// image index feeding the per-image RNG stream.
Tensor synthesize_image(GeneratorTag generator, uint64_t seed, uint64_t index,
                        int image_size);

// Binary PPM (P6, maxval 255). Values clamp to [0,1] on write; read returns
// channel-first float32 in [0,1].
void write_image_ppm(const std::string& path, const Tensor& image);
Tensor read_image_ppm(const std::string& path);
// Same, but rejects images whose dimensions differ from expected_size.
Tensor read_image_ppm(const std::string& path, int expected_size);

void save_manifest(const Manifest& m, const std::string& dir);
Manifest load_manifest(const std::string& dir);

Manifest filter(const Manifest& m, const std::string& split,
                std::optional<GeneratorTag> generator = std::nullopt);

}  // namespace capdet
