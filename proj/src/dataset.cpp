#include "capdet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

#include "capdet/rng.hpp"

namespace capdet {

namespace fs = std::filesystem;
using nlohmann::json;

std::string label_name(Label l) { return l == Label::Real ? "real" : "fake"; }

Label parse_label(const std::string& s) {
  if (s == "real") return Label::Real;
  if (s == "fake") return Label::Fake;
  throw std::invalid_argument("unknown label '" + s + "'");
}

namespace {

const std::vector<std::pair<GeneratorTag, std::string>> kGeneratorNames = {
    {GeneratorTag::REAL, "REAL"},     {GeneratorTag::G_TRAIN, "G-TRAIN"},
    {GeneratorTag::G_A, "G-A"},       {GeneratorTag::G_B, "G-B"},
    {GeneratorTag::G_C, "G-C"},       {GeneratorTag::G_D, "G-D"},
    {GeneratorTag::G_E, "G-E"},       {GeneratorTag::G_F, "G-F"},
};

std::string file_tag(GeneratorTag g) {
  std::string s = generator_name(g);
  std::string out;
  for (char c : s)
    if (c != '-') out += static_cast<char>(std::tolower(c));
  return out;
}

}  // namespace

std::string generator_name(GeneratorTag g) {
  for (const auto& [tag, name] : kGeneratorNames)
    if (tag == g) return name;
  throw std::logic_error("bad generator tag");
}

GeneratorTag parse_generator(const std::string& s) {
  for (const auto& [tag, name] : kGeneratorNames)
    if (name == s) return tag;
  throw std::invalid_argument("unknown generator '" + s + "'");
}

std::vector<GeneratorTag> fake_generators() {
  return {GeneratorTag::G_TRAIN, GeneratorTag::G_A, GeneratorTag::G_B,
          GeneratorTag::G_C,     GeneratorTag::G_D, GeneratorTag::G_E,
          GeneratorTag::G_F};
}

std::map<std::pair<std::string, GeneratorTag>, int64_t> Manifest::counts() const {
  std::map<std::pair<std::string, GeneratorTag>, int64_t> c;
  for (const auto& r : records) ++c[{r.split, r.generator}];
  return c;
}

void Manifest::validate() const {
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    auto fail = [&](const std::string& what) {
      throw std::runtime_error("manifest record " + std::to_string(i + 1) +
                               " (" + r.path + "): " + what);
    };
    bool is_real = r.generator == GeneratorTag::REAL;
    if (is_real != (r.label == Label::Real))
      fail("label '" + label_name(r.label) + "' inconsistent with generator " +
           generator_name(r.generator));
    if (r.split != "train" && r.split != "test")
      fail("bad split '" + r.split + "'");
    if (r.split == "train" && !is_real && r.generator != GeneratorTag::G_TRAIN)
      fail("train split may only contain REAL and G-TRAIN images");
  }
}

// --- procedural synthesis ---------------------------------------------------

namespace {

// Separable truncated-Gaussian blur with reflected borders.
void blur_field(std::vector<float>& f, int d, double sigma) {
  int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    norm += kernel[i + radius];
  }
  for (auto& k : kernel) k /= norm;
  // Repeated reflection keeps indices valid even when the kernel radius
  // exceeds the field size (half-resolution renders of small images).
  auto reflect = [d](int i) {
    while (i < 0 || i >= d) {
      if (i < 0) i = -i - 1;
      if (i >= d) i = 2 * d - 1 - i;
    }
    return i;
  };
  std::vector<float> tmp(f.size());
  for (int y = 0; y < d; ++y)
    for (int x = 0; x < d; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[i + radius] * f[y * d + reflect(x + i)];
      tmp[y * d + x] = static_cast<float>(acc);
    }
  for (int y = 0; y < d; ++y)
    for (int x = 0; x < d; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[i + radius] * tmp[reflect(y + i) * d + x];
      f[y * d + x] = static_cast<float>(acc);
    }
}

// Standardized band-limited Gaussian field (zero mean, unit variance).
std::vector<float> smooth_noise(Rng& rng, int d, double sigma) {
  std::vector<float> f(static_cast<size_t>(d) * d);
  for (auto& v : f) v = static_cast<float>(rng.next_gaussian());
  blur_field(f, d, sigma);
  double mean = 0.0;
  for (float v : f) mean += v;
  mean /= f.size();
  double var = 0.0;
  for (float v : f) var += (v - mean) * (v - mean);
  var /= f.size();
  double inv = 1.0 / std::sqrt(var + 1e-12);
  for (auto& v : f) v = static_cast<float>((v - mean) * inv);
  return f;
}

// REAL distribution: a shared smooth luminance field plus weaker per-channel
// smooth chroma deviations.
std::vector<float> real_image(Rng& rng, int d) {
  auto lum = smooth_noise(rng, d, 2.5);
  std::vector<float> img(static_cast<size_t>(3) * d * d);
  for (int c = 0; c < 3; ++c) {
    auto chroma = smooth_noise(rng, d, 3.5);
    for (int i = 0; i < d * d; ++i)
      img[static_cast<size_t>(c) * d * d + i] =
          0.5f + 0.20f * lum[i] + 0.07f * chroma[i];
  }
  return img;
}

void clamp01(std::vector<float>& img) {
  for (auto& v : img) v = std::min(1.0f, std::max(0.0f, v));
}

void apply_grid(std::vector<float>& img, int d, Rng& rng) {
  int period = 3 + static_cast<int>(rng.next_below(4));  // 3..6
  int phase = static_cast<int>(rng.next_below(period));
  float amp = static_cast<float>(0.10 + 0.12 * rng.next_uniform());
  float sign = rng.next_uniform() < 0.5 ? 1.0f : -1.0f;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < d; ++y)
      for (int x = 0; x < d; ++x)
        if (y % period == phase || x % period == phase)
          img[(static_cast<size_t>(c) * d + y) * d + x] += sign * amp;
}

void apply_quantize(std::vector<float>& img, Rng& rng) {
  int levels = 3 + static_cast<int>(rng.next_below(2));  // 3..4
  for (auto& v : img) v = std::round(v * levels) / levels;
}

void apply_spectral_notch(std::vector<float>& img, int d) {
  for (int c = 0; c < 3; ++c) {
    std::vector<float> ch(img.begin() + static_cast<size_t>(c) * d * d,
                          img.begin() + static_cast<size_t>(c + 1) * d * d);
    std::vector<float> narrow = ch, wide = ch;
    blur_field(narrow, d, 1.0);
    blur_field(wide, d, 2.5);
    for (int i = 0; i < d * d; ++i) {
      float band = narrow[i] - wide[i];
      img[static_cast<size_t>(c) * d * d + i] -= 0.95f * band;
    }
  }
}

void apply_checkerboard(std::vector<float>& img, int d, Rng& rng) {
  // Re-render at half resolution and nearest-upsample, the classic
  // transposed-convolution footprint, then add the alternating offset.
  int hd = d / 2;
  auto small = real_image(rng, hd);
  float amp = static_cast<float>(0.12 + 0.04 * rng.next_uniform());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < d; ++y)
      for (int x = 0; x < d; ++x) {
        float v = small[(static_cast<size_t>(c) * hd + y / 2) * hd + x / 2];
        v += amp * (((x + y) % 2 == 0) ? 1.0f : -1.0f);
        img[(static_cast<size_t>(c) * d + y) * d + x] = v;
      }
}

void dct_block_suppress(std::vector<float>& img, int d) {
  constexpr int kBlock = 8;
  constexpr int kKeep = 3;  // zero coefficients with u+v >= kKeep
  static const double pi = std::acos(-1.0);
  for (int c = 0; c < 3; ++c)
    for (int by = 0; by + kBlock <= d; by += kBlock)
      for (int bx = 0; bx + kBlock <= d; bx += kBlock) {
        double coef[kBlock][kBlock];
        for (int u = 0; u < kBlock; ++u)
          for (int v = 0; v < kBlock; ++v) {
            if (u + v >= kKeep) {
              coef[u][v] = 0.0;
              continue;
            }
            double acc = 0.0;
            for (int y = 0; y < kBlock; ++y)
              for (int x = 0; x < kBlock; ++x)
                acc += img[(static_cast<size_t>(c) * d + by + y) * d + bx + x] *
                       std::cos((2 * y + 1) * u * pi / (2 * kBlock)) *
                       std::cos((2 * x + 1) * v * pi / (2 * kBlock));
            double cu = u == 0 ? std::sqrt(1.0 / kBlock) : std::sqrt(2.0 / kBlock);
            double cv = v == 0 ? std::sqrt(1.0 / kBlock) : std::sqrt(2.0 / kBlock);
            coef[u][v] = cu * cv * acc;
          }
        for (int y = 0; y < kBlock; ++y)
          for (int x = 0; x < kBlock; ++x) {
            double acc = 0.0;
            for (int u = 0; u < kBlock; ++u)
              for (int v = 0; v < kBlock; ++v) {
                if (coef[u][v] == 0.0) continue;
                double cu =
                    u == 0 ? std::sqrt(1.0 / kBlock) : std::sqrt(2.0 / kBlock);
                double cv =
                    v == 0 ? std::sqrt(1.0 / kBlock) : std::sqrt(2.0 / kBlock);
                acc += cu * cv * coef[u][v] *
                       std::cos((2 * y + 1) * u * pi / (2 * kBlock)) *
                       std::cos((2 * x + 1) * v * pi / (2 * kBlock));
              }
            img[(static_cast<size_t>(c) * d + by + y) * d + bx + x] =
                static_cast<float>(acc);
          }
      }
}

void apply_fixed_pattern(std::vector<float>& img, int d, uint64_t corpus_seed) {
  // One pattern per corpus, shared by every G-E image.
  Rng pat(corpus_seed, "fixed-pattern");
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < d * d; ++i) {
      float p = pat.next_uniform() < 0.5 ? -1.0f : 1.0f;
      img[static_cast<size_t>(c) * d * d + i] += 0.11f * p;
    }
}

void apply_ringing(std::vector<float>& img, int d) {
  for (int c = 0; c < 3; ++c) {
    std::vector<float> ch(img.begin() + static_cast<size_t>(c) * d * d,
                          img.begin() + static_cast<size_t>(c + 1) * d * d);
    std::vector<float> blurred = ch;
    blur_field(blurred, d, 0.9);
    std::vector<float> twice = blurred;
    blur_field(twice, d, 0.9);
    for (int i = 0; i < d * d; ++i)
      img[static_cast<size_t>(c) * d * d + i] =
          blurred[i] + 3.5f * (blurred[i] - twice[i]);
  }
}

}  // namespace

Tensor synthesize_image(GeneratorTag generator, uint64_t seed, uint64_t index,
                        int image_size) {
  Rng rng = Rng(seed, "corpus").stream(generator_name(generator)).stream(index);
  int d = image_size;
  std::vector<float> img;
  if (generator == GeneratorTag::G_C) {
    img.assign(static_cast<size_t>(3) * d * d, 0.0f);
    apply_checkerboard(img, d, rng);
  } else {
    img = real_image(rng, d);
    switch (generator) {
      case GeneratorTag::REAL: break;
      case GeneratorTag::G_TRAIN: apply_grid(img, d, rng); break;
      case GeneratorTag::G_A: apply_quantize(img, rng); break;
      case GeneratorTag::G_B: apply_spectral_notch(img, d); break;
      case GeneratorTag::G_D: dct_block_suppress(img, d); break;
      case GeneratorTag::G_E: apply_fixed_pattern(img, d, seed); break;
      case GeneratorTag::G_F: apply_ringing(img, d); break;
      default: break;
    }
  }
  clamp01(img);
  return Tensor::from({3, d, d}, std::move(img));
}

// --- PPM --------------------------------------------------------------------

void write_image_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.size(0) != 3)
    throw std::invalid_argument("write_image_ppm: [3×h×w] tensor required, got " +
                                shape_str(image.shape()));
  int h = static_cast<int>(image.size(1)), w = static_cast<int>(image.size(2));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write image: " + path);
  os << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = image.values()[(static_cast<size_t>(c) * h + y) * w + x];
        v = std::min(1.0f, std::max(0.0f, v));
        row[static_cast<size_t>(x) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    os.write(reinterpret_cast<const char*>(row.data()),
             static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw std::runtime_error("image write failed: " + path);
}

Tensor read_image_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open image: " + path);
  std::string magic;
  is >> magic;
  if (magic == "P3")
    throw std::runtime_error(path + ": unsupported format (ASCII PPM P3); " +
                             "only binary P6 is accepted");
  if (magic != "P6")
    throw std::runtime_error(path + ": malformed PPM header (magic '" + magic +
                             "')");
  auto next_int = [&](const char* what) {
    // Skip whitespace and '#' comments between header fields.
    for (;;) {
      int c = is.peek();
      if (c == '#') {
        std::string line;
        std::getline(is, line);
      } else if (std::isspace(c)) {
        is.get();
      } else {
        break;
      }
    }
    long v = -1;
    if (!(is >> v) || v < 0)
      throw std::runtime_error(std::string(what) + " missing or invalid in PPM header");
    return v;
  };
  long w = next_int("width"), h = next_int("height"), maxval = next_int("maxval");
  if (maxval != 255)
    throw std::runtime_error(path + ": unsupported maxval " +
                             std::to_string(maxval) + " (must be 255)");
  is.get();  // single whitespace before payload
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
  is.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (is.gcount() != static_cast<std::streamsize>(raw.size()))
    throw std::runtime_error(path + ": truncated payload (" +
                             std::to_string(is.gcount()) + " of " +
                             std::to_string(raw.size()) + " bytes)");
  std::vector<float> img(raw.size());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img[(static_cast<size_t>(c) * h + y) * w + x] =
            raw[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0f;
  return Tensor::from({3, h, w}, std::move(img));
}

Tensor read_image_ppm(const std::string& path, int expected_size) {
  Tensor t = read_image_ppm(path);
  if (t.size(1) != expected_size || t.size(2) != expected_size)
    throw std::runtime_error(path + ": image dimensions " +
                             std::to_string(t.size(2)) + "x" +
                             std::to_string(t.size(1)) + " do not match expected " +
                             std::to_string(expected_size));
  return t;
}

// --- manifest ---------------------------------------------------------------

void save_manifest(const Manifest& m, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream os(dir + "/manifest.jsonl");
  if (!os) throw std::runtime_error("cannot write manifest in " + dir);
  for (const auto& r : m.records) {
    json j;
    j["path"] = r.path;
    j["label"] = label_name(r.label);
    j["generator"] = generator_name(r.generator);
    j["split"] = r.split;
    os << j.dump() << '\n';
  }
  json meta;
  meta["corpus_seed"] = m.corpus_seed;
  std::ofstream ms(dir + "/corpus.json");
  ms << meta.dump(2) << '\n';
}

Manifest load_manifest(const std::string& dir) {
  std::ifstream is(dir + "/manifest.jsonl");
  if (!is) throw std::runtime_error("cannot open manifest in " + dir);
  Manifest m;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      LabeledImage r;
      r.path = j.at("path").get<std::string>();
      r.label = parse_label(j.at("label").get<std::string>());
      r.generator = parse_generator(j.at("generator").get<std::string>());
      r.split = j.at("split").get<std::string>();
      m.records.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error("manifest line " + std::to_string(lineno) + ": " +
                               e.what());
    }
  }
  std::ifstream ms(dir + "/corpus.json");
  if (ms) {
    json meta = json::parse(ms);
    m.corpus_seed = meta.value("corpus_seed", 0ull);
  }
  m.validate();
  return m;
}

Manifest filter(const Manifest& m, const std::string& split,
                std::optional<GeneratorTag> generator) {
  Manifest out;
  out.corpus_seed = m.corpus_seed;
  for (const auto& r : m.records)
    if (r.split == split && (!generator || r.generator == *generator))
      out.records.push_back(r);
  return out;
}

Manifest generate_corpus(const std::string& out_dir, int n_train, int n_test,
                         uint64_t seed, int image_size) {
  if (n_train < 1 || n_test < 1)
    throw std::invalid_argument("generate_corpus: counts must be >= 1");
  fs::create_directories(fs::path(out_dir) / "images");
  Manifest m;
  m.corpus_seed = seed;

  auto emit = [&](GeneratorTag g, const std::string& split, int count,
                  uint64_t index_base) {
    for (int i = 0; i < count; ++i) {
      Tensor img = synthesize_image(g, seed, index_base + i, image_size);
      char name[64];
      std::snprintf(name, sizeof(name), "images/%s_%s_%05d.ppm", split.c_str(),
                    file_tag(g).c_str(), i);
      std::string rel = name;
      write_image_ppm((fs::path(out_dir) / rel).string(), img);
      m.records.push_back({rel,
                           g == GeneratorTag::REAL ? Label::Real : Label::Fake,
                           g, split});
    }
  };

  emit(GeneratorTag::REAL, "train", n_train, 0);
  emit(GeneratorTag::G_TRAIN, "train", n_train, 0);
  // Shared REAL test pool: index space disjoint from the train draws.
  emit(GeneratorTag::REAL, "test", n_test, 1u << 24);
  for (GeneratorTag g : fake_generators())
    emit(g, "test", n_test, 1u << 24);

  m.validate();
  save_manifest(m, out_dir);
  return m;
}

}  // namespace capdet
