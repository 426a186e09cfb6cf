#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "capdet/dataset.hpp"
#include "capdet/rng.hpp"

using namespace capdet;

namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("capdet_dataset_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

// Per-image summary statistics used to check that each generator leaves a
// measurable footprint.
struct ImageStats {
  double hdiff;     // mean |v(x+1) - v(x)|, local roughness
  double parity;    // mean (-1)^(x+y) * v, checkerboard contrast
  double eq_frac;   // fraction of horizontally adjacent equal pixels
  double blocky;    // 8-pixel block-boundary contrast minus interior contrast
};

ImageStats stats_of(const Tensor& img) {
  int d = static_cast<int>(img.size(1));
  const auto& v = img.values();
  ImageStats s{0, 0, 0, 0};
  int64_t diffs = 0, blk = 0, interior = 0;
  double blk_sum = 0, interior_sum = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < d; ++y)
      for (int x = 0; x < d; ++x) {
        size_t i = (static_cast<size_t>(c) * d + y) * d + x;
        s.parity += ((x + y) % 2 == 0 ? 1.0 : -1.0) * v[i];
        if (x + 1 < d) {
          double diff = std::abs(static_cast<double>(v[i + 1]) - v[i]);
          s.hdiff += diff;
          if (diff == 0.0) s.eq_frac += 1.0;
          ++diffs;
          if (x % 8 == 7) {
            blk_sum += diff;
            ++blk;
          } else {
            interior_sum += diff;
            ++interior;
          }
        }
      }
  s.hdiff /= diffs;
  s.eq_frac /= diffs;
  s.parity /= 3.0 * d * d;
  s.blocky = blk_sum / blk - interior_sum / interior;
  return s;
}

// Welch-style separation of a statistic between a generator and REAL, in
// units of the standard error of the mean difference.
double gap_sigma(const std::vector<double>& a, const std::vector<double>& b) {
  auto mean_var = [](const std::vector<double>& xs) {
    double m = 0;
    for (double x : xs) m += x;
    m /= xs.size();
    double var = 0;
    for (double x : xs) var += (x - m) * (x - m);
    var /= xs.size() - 1;
    return std::pair<double, double>(m, var);
  };
  auto [ma, va] = mean_var(a);
  auto [mb, vb] = mean_var(b);
  double se = std::sqrt(va / a.size() + vb / b.size());
  return std::abs(ma - mb) / (se + 1e-12);
}

}  // namespace

TEST_CASE("ppm round trip stays within quantization error") {
  fs::path dir = temp_dir("roundtrip");
  Rng rng(11, "img");
  Tensor img = Tensor::zeros({3, 32, 32});
  for (auto& v : img.mutable_values())
    v = static_cast<float>(rng.next_uniform());
  std::string path = (dir / "a.ppm").string();
  write_image_ppm(path, img);
  Tensor back = read_image_ppm(path);
  REQUIRE(back.shape() == img.shape());
  double max_err = 0;
  for (size_t i = 0; i < img.values().size(); ++i)
    max_err = std::max(max_err, std::abs(static_cast<double>(img.values()[i]) -
                                         back.values()[i]));
  CHECK(max_err <= 1.0 / 255.0 + 1e-7);

  // A second write/read pass is exact: the values are already quantized.
  std::string path2 = (dir / "b.ppm").string();
  write_image_ppm(path2, back);
  Tensor again = read_image_ppm(path2);
  CHECK(again.values() == back.values());
}

TEST_CASE("ppm reader rejects malformed files") {
  fs::path dir = temp_dir("badppm");

  SUBCASE("ascii P3") {
    std::ofstream(dir / "p3.ppm") << "P3\n2 2\n255\n0 0 0 1 1 1 2 2 2 3 3 3\n";
    CHECK_THROWS_WITH_AS(read_image_ppm((dir / "p3.ppm").string()),
                         doctest::Contains("unsupported format"),
                         std::runtime_error);
  }
  SUBCASE("unknown magic") {
    std::ofstream(dir / "x.ppm") << "P7\n2 2\n255\n";
    CHECK_THROWS_WITH_AS(read_image_ppm((dir / "x.ppm").string()),
                         doctest::Contains("malformed PPM header"),
                         std::runtime_error);
  }
  SUBCASE("truncated payload") {
    std::ofstream os(dir / "t.ppm", std::ios::binary);
    os << "P6\n4 4\n255\n";
    os << "only a few bytes";
    os.close();
    CHECK_THROWS_WITH_AS(read_image_ppm((dir / "t.ppm").string()),
                         doctest::Contains("truncated payload"),
                         std::runtime_error);
  }
  SUBCASE("wrong maxval") {
    std::ofstream os(dir / "m.ppm", std::ios::binary);
    os << "P6\n1 1\n65535\n";
    os.write("\0\0\0\0\0\0", 6);
    os.close();
    CHECK_THROWS_WITH_AS(read_image_ppm((dir / "m.ppm").string()),
                         doctest::Contains("unsupported maxval"),
                         std::runtime_error);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_WITH_AS(read_image_ppm((dir / "nope.ppm").string()),
                         doctest::Contains("cannot open"), std::runtime_error);
  }
  SUBCASE("dimension mismatch") {
    Tensor img = Tensor::zeros({3, 16, 16});
    write_image_ppm((dir / "s.ppm").string(), img);
    CHECK_NOTHROW(read_image_ppm((dir / "s.ppm").string(), 16));
    CHECK_THROWS_WITH_AS(read_image_ppm((dir / "s.ppm").string(), 32),
                         doctest::Contains("do not match expected"),
                         std::runtime_error);
  }
}

TEST_CASE("image synthesis is deterministic and index-sensitive") {
  Tensor a = synthesize_image(GeneratorTag::G_TRAIN, 7, 3, 32);
  Tensor b = synthesize_image(GeneratorTag::G_TRAIN, 7, 3, 32);
  CHECK(a.values() == b.values());

  Tensor c = synthesize_image(GeneratorTag::G_TRAIN, 7, 4, 32);
  CHECK(a.values() != c.values());
  Tensor d = synthesize_image(GeneratorTag::G_TRAIN, 8, 3, 32);
  CHECK(a.values() != d.values());
  // Generators draw from independent streams, so REAL and fakes differ
  // even at matching (seed, index).
  Tensor r = synthesize_image(GeneratorTag::REAL, 7, 3, 32);
  CHECK(a.values() != r.values());
}

TEST_CASE("every generator shifts a designed statistic away from REAL") {
  const int n = 48;
  const uint64_t seed = 123;
  std::vector<ImageStats> real(n);
  for (int i = 0; i < n; ++i)
    real[i] = stats_of(synthesize_image(GeneratorTag::REAL, seed, i, 32));
  auto column = [&](const std::vector<ImageStats>& xs, int which) {
    std::vector<double> out(xs.size());
    for (size_t i = 0; i < xs.size(); ++i)
      out[i] = which == 0 ? xs[i].hdiff
             : which == 1 ? xs[i].parity
             : which == 2 ? xs[i].eq_frac
                          : xs[i].blocky;
    return out;
  };
  for (GeneratorTag g : fake_generators()) {
    CAPTURE(generator_name(g));
    std::vector<ImageStats> fake(n);
    for (int i = 0; i < n; ++i)
      fake[i] = stats_of(synthesize_image(g, seed, i, 32));
    double best = 0;
    for (int which = 0; which < 4; ++which)
      best = std::max(best, gap_sigma(column(real, which), column(fake, which)));
    CHECK(best > 3.0);
  }
}

TEST_CASE("logistic regression on roughness separates REAL from G-TRAIN") {
  // Learnability floor: the grid overlay raises local roughness enough for a
  // 2-parameter model, so downstream failures are model failures.
  const int n = 100;
  std::vector<double> x;
  std::vector<int> y;
  for (int i = 0; i < n; ++i) {
    x.push_back(stats_of(synthesize_image(GeneratorTag::REAL, 5, i, 32)).hdiff);
    y.push_back(0);
    x.push_back(stats_of(synthesize_image(GeneratorTag::G_TRAIN, 5, i, 32)).hdiff);
    y.push_back(1);
  }
  double mean = 0;
  for (double v : x) mean += v;
  mean /= x.size();
  double sd = 0;
  for (double v : x) sd += (v - mean) * (v - mean);
  sd = std::sqrt(sd / x.size());
  for (double& v : x) v = (v - mean) / sd;

  double w = 0, b = 0;
  for (int step = 0; step < 500; ++step) {
    double gw = 0, gb = 0;
    for (size_t i = 0; i < x.size(); ++i) {
      double p = 1.0 / (1.0 + std::exp(-(w * x[i] + b)));
      gw += (p - y[i]) * x[i];
      gb += p - y[i];
    }
    w -= 1.0 * gw / x.size();
    b -= 1.0 * gb / x.size();
  }
  int correct = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    int pred = w * x[i] + b >= 0 ? 1 : 0;
    if (pred == y[i]) ++correct;
  }
  CHECK(static_cast<double>(correct) / x.size() >= 0.90);
}

TEST_CASE("generate_corpus produces the documented layout") {
  fs::path dir = temp_dir("corpus");
  Manifest m = generate_corpus(dir.string(), 5, 3, 99, 16);

  auto c = m.counts();
  CHECK(c[{"train", GeneratorTag::REAL}] == 5);
  CHECK(c[{"train", GeneratorTag::G_TRAIN}] == 5);
  CHECK(c[{"test", GeneratorTag::REAL}] == 3);
  for (GeneratorTag g : fake_generators()) CHECK(c[{"test", g}] == 3);
  CHECK(m.records.size() == 5 * 2 + 3 * 8);
  CHECK(m.corpus_seed == 99);

  // No path collisions; every listed image exists and parses.
  std::vector<std::string> paths;
  for (const auto& r : m.records) {
    paths.push_back(r.path);
    CHECK_NOTHROW(read_image_ppm((dir / r.path).string(), 16));
  }
  std::sort(paths.begin(), paths.end());
  CHECK(std::adjacent_find(paths.begin(), paths.end()) == paths.end());

  CHECK_THROWS_AS(generate_corpus(dir.string(), 0, 3, 99, 16),
                  std::invalid_argument);
  CHECK_THROWS_AS(generate_corpus(dir.string(), 5, 0, 99, 16),
                  std::invalid_argument);
}

TEST_CASE("same seed twice yields a byte-identical corpus") {
  fs::path a = temp_dir("corpus_a");
  fs::path b = temp_dir("corpus_b");
  Manifest ma = generate_corpus(a.string(), 3, 2, 17, 16);
  generate_corpus(b.string(), 3, 2, 17, 16);
  CHECK(slurp(a / "manifest.jsonl") == slurp(b / "manifest.jsonl"));
  for (const auto& r : ma.records) CHECK(slurp(a / r.path) == slurp(b / r.path));

  fs::path c = temp_dir("corpus_c");
  generate_corpus(c.string(), 3, 2, 18, 16);
  CHECK(slurp(a / "manifest.jsonl") == slurp(c / "manifest.jsonl"));
  bool any_differ = false;
  for (const auto& r : ma.records)
    if (slurp(a / r.path) != slurp(c / r.path)) any_differ = true;
  CHECK(any_differ);
}

TEST_CASE("manifest round trip and filtering") {
  fs::path dir = temp_dir("manifest");
  Manifest m = generate_corpus(dir.string(), 3, 2, 55, 16);
  Manifest back = load_manifest(dir.string());
  REQUIRE(back.records.size() == m.records.size());
  CHECK(back.corpus_seed == 55);
  for (size_t i = 0; i < m.records.size(); ++i) {
    CHECK(back.records[i].path == m.records[i].path);
    CHECK(back.records[i].label == m.records[i].label);
    CHECK(back.records[i].generator == m.records[i].generator);
    CHECK(back.records[i].split == m.records[i].split);
  }

  Manifest gb = filter(back, "test", GeneratorTag::G_B);
  CHECK(gb.records.size() == 2);
  for (const auto& r : gb.records) {
    CHECK(r.generator == GeneratorTag::G_B);
    CHECK(r.split == "test");
  }
  CHECK(filter(back, "train").records.size() == 6);
  CHECK(filter(back, "test", GeneratorTag::REAL).records.size() == 2);
  // Filtering preserves manifest order.
  Manifest tr = filter(back, "train");
  std::vector<std::string> order;
  for (const auto& r : back.records)
    if (r.split == "train") order.push_back(r.path);
  for (size_t i = 0; i < tr.records.size(); ++i)
    CHECK(tr.records[i].path == order[i]);
}

TEST_CASE("manifest loading reports bad records with line numbers") {
  fs::path dir = temp_dir("badmanifest");
  Manifest m = generate_corpus(dir.string(), 2, 1, 3, 16);

  SUBCASE("schema violation") {
    std::ofstream os(dir / "manifest.jsonl");
    os << R"({"path":"a.ppm","label":"real","generator":"REAL","split":"train"})"
       << '\n';
    os << R"({"path":"b.ppm","label":"real","generator":"REAL"})" << '\n';
    os.close();
    CHECK_THROWS_WITH_AS(load_manifest(dir.string()),
                         doctest::Contains("line 2"), std::runtime_error);
  }
  SUBCASE("REAL record labeled fake") {
    std::ofstream os(dir / "manifest.jsonl");
    os << R"({"path":"a.ppm","label":"fake","generator":"REAL","split":"train"})"
       << '\n';
    os.close();
    CHECK_THROWS_WITH_AS(load_manifest(dir.string()),
                         doctest::Contains("inconsistent"), std::runtime_error);
  }
  SUBCASE("held-out generator in train split") {
    std::ofstream os(dir / "manifest.jsonl");
    os << R"({"path":"a.ppm","label":"fake","generator":"G-B","split":"train"})"
       << '\n';
    os.close();
    CHECK_THROWS_AS(load_manifest(dir.string()), std::runtime_error);
  }
  SUBCASE("missing directory") {
    CHECK_THROWS_WITH_AS(load_manifest((dir / "nowhere").string()),
                         doctest::Contains("cannot open"), std::runtime_error);
  }
  (void)m;
}

TEST_CASE("label and generator names round trip") {
  CHECK(label_name(Label::Real) == "real");
  CHECK(parse_label("fake") == Label::Fake);
  CHECK_THROWS_AS(parse_label("maybe"), std::invalid_argument);
  for (GeneratorTag g :
       {GeneratorTag::REAL, GeneratorTag::G_TRAIN, GeneratorTag::G_C})
    CHECK(parse_generator(generator_name(g)) == g);
  CHECK_THROWS_AS(parse_generator("G-Z"), std::invalid_argument);
  CHECK(fake_generators().size() == 7);
  CHECK(fake_generators().front() == GeneratorTag::G_TRAIN);
}
