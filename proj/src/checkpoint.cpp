#include "sanas/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "sanas/errors.hpp"

namespace sanas {

namespace {

constexpr char kMagic[6] = {'S', 'A', 'N', 'A', 'S', '1'};

void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw IoError("truncated checkpoint");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_f64(std::ostream& os, double d) {
  uint64_t bits;
  std::memcpy(&bits, &d, 8);
  write_u64(os, bits);
}

double read_f64(std::istream& is) {
  uint64_t bits = read_u64(is);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  write_u64(os, tensors.size());
  for (const auto& [name, t] : tensors) {
    write_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(os, t.rank());
    for (size_t d : t.shape) write_u64(os, d);
    for (double v : t.data) write_f64(os, v);
  }
  if (!os) throw IoError("write failed: " + path);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[6];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("bad magic in " + path);
  uint64_t count = read_u64(is);
  std::map<std::string, Tensor> out;
  for (uint64_t i = 0; i < count; ++i) {
    uint64_t name_len = read_u64(is);
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    if (!is) throw IoError("truncated checkpoint name in " + path);
    uint64_t rank = read_u64(is);
    Shape shape(rank);
    for (uint64_t d = 0; d < rank; ++d) shape[d] = read_u64(is);
    Tensor t{shape};
    for (size_t k = 0; k < t.numel(); ++k) t.data[k] = read_f64(is);
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace sanas
