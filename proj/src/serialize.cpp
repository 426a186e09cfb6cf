#include "capdet/serialize.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace capdet {

namespace {

constexpr const char* kMagic = "CAPDET-TENSORS v1";

void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("tensor file: truncated integer field");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_f32(std::ostream& os, const float* data, size_t n) {
  // All supported targets are little-endian; raw float32 bytes are the
  // wire format.
  static_assert(sizeof(float) == 4);
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
}

}  // namespace

void write_tensors(std::ostream& os,
                   const std::vector<std::pair<std::string, Tensor>>& tensors) {
  os << kMagic << '\n';
  for (const auto& [name, t] : tensors) {
    put_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(os, static_cast<uint64_t>(t.rank()));
    for (auto d : t.shape()) put_u64(os, static_cast<uint64_t>(d));
    put_f32(os, t.values().data(), t.values().size());
  }
}

std::vector<std::pair<std::string, Tensor>> read_tensors(std::istream& is) {
  std::string magic;
  std::getline(is, magic);
  if (magic != kMagic)
    throw std::runtime_error("tensor file: bad magic '" + magic + "'");
  std::vector<std::pair<std::string, Tensor>> out;
  while (is.peek() != std::char_traits<char>::eof()) {
    uint64_t name_len = get_u64(is);
    if (name_len > (1u << 20))
      throw std::runtime_error("tensor file: implausible name length");
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    uint64_t rank = get_u64(is);
    if (rank > 8) throw std::runtime_error("tensor file: implausible rank");
    Shape shape(rank);
    int64_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<int64_t>(get_u64(is));
      numel *= d;
    }
    std::vector<float> data(numel);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(numel * 4));
    if (!is) throw std::runtime_error("tensor file: truncated payload for '" +
                                      name + "'");
    out.emplace_back(name, Tensor::from(shape, std::move(data)));
  }
  return out;
}

void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  write_tensors(os, tensors);
  if (!os) throw std::runtime_error("write failed: " + path);
}

std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return read_tensors(is);
}

}  // namespace capdet
