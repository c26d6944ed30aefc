#include "sanas/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

#include "sanas/errors.hpp"

namespace sanas {

namespace {

double class_pattern(size_t cls, size_t channel, size_t y, size_t x, size_t h, size_t w) {
  // Low-frequency waves; frequency pair and phase are distinct per class.
  const double fy = 1.0 + static_cast<double>(cls % 3);
  const double fx = 1.0 + static_cast<double>((cls / 3) % 3);
  const double phase = 2.0 * std::numbers::pi * static_cast<double>(channel) / 3.0 +
                       0.7 * static_cast<double>(cls);
  const double ty = static_cast<double>(y) / static_cast<double>(h);
  const double tx = static_cast<double>(x) / static_cast<double>(w);
  const double axis = cls % 2 == 0 ? fy * ty + fx * tx : fy * ty - fx * tx;
  return std::cos(2.0 * std::numbers::pi * axis + phase);
}

}  // namespace

Dataset make_synthetic(const SyntheticSpec& spec, uint64_t seed) {
  if (spec.classes < 2) throw ContractError("synthetic dataset needs at least 2 classes");
  if (spec.count == 0 || spec.channels == 0 || spec.height == 0 || spec.width == 0)
    throw ContractError("synthetic dataset sizes must be positive");

  Dataset ds;
  ds.num_classes = spec.classes;
  ds.images = Tensor({spec.count, spec.channels, spec.height, spec.width});
  ds.labels.resize(spec.count);

  Rng order_rng = Rng(seed).fork(fnv1a("dataset.order"));
  Rng noise_rng = Rng(seed).fork(fnv1a("dataset.noise"));

  // Round-robin labels keep classes balanced within one, then shuffle.
  std::vector<uint8_t> labels(spec.count);
  for (size_t i = 0; i < spec.count; ++i) labels[i] = static_cast<uint8_t>(i % spec.classes);
  for (size_t i = spec.count; i > 1; --i)
    std::swap(labels[i - 1], labels[order_rng.uniform_int(i)]);

  const size_t plane = spec.height * spec.width;
  for (size_t i = 0; i < spec.count; ++i) {
    ds.labels[i] = labels[i];
    for (size_t c = 0; c < spec.channels; ++c)
      for (size_t y = 0; y < spec.height; ++y)
        for (size_t x = 0; x < spec.width; ++x) {
          double v = class_pattern(labels[i], c, y, x, spec.height, spec.width) +
                     spec.noise_sigma * noise_rng.gaussian();
          // keep exactly what the file format can hold
          ds.images.data[(i * spec.channels + c) * plane + y * spec.width + x] =
              static_cast<double>(static_cast<float>(v));
        }
  }
  return ds;
}

namespace {

constexpr char kMagic[5] = {'S', 'A', 'D', 'S', '1'};

void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw IoError("truncated dataset header");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  write_u64(os, ds.size());
  write_u64(os, ds.channels());
  write_u64(os, ds.height());
  write_u64(os, ds.width());
  write_u64(os, ds.num_classes);
  for (double v : ds.images.data) {
    const float f = static_cast<float>(v);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 4);
  }
  os.write(reinterpret_cast<const char*>(ds.labels.data()),
           static_cast<std::streamsize>(ds.labels.size()));
  if (!os) throw IoError("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[5];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError("bad magic in " + path);
  const uint64_t count = read_u64(is);
  const uint64_t channels = read_u64(is);
  const uint64_t height = read_u64(is);
  const uint64_t width = read_u64(is);
  const uint64_t classes = read_u64(is);
  Dataset ds;
  ds.num_classes = classes;
  ds.images = Tensor({count, channels, height, width});
  for (double& v : ds.images.data) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("truncated image data in " + path);
    uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<uint32_t>(b[i]) << (8 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    v = static_cast<double>(f);
  }
  ds.labels.resize(count);
  is.read(reinterpret_cast<char*>(ds.labels.data()), static_cast<std::streamsize>(count));
  if (!is) throw IoError("truncated labels in " + path);
  return ds;
}

}  // namespace sanas
