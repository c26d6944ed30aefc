#include "sanas/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "sanas/errors.hpp"

namespace sanas {

size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)) {
  for (size_t d : shape)
    if (d == 0) throw DimensionError("zero-sized dimension in " + shape_str(shape));
  data.assign(shape_numel(shape), fill);
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_numel(shape))
    throw DimensionError("value count " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
}

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
  std::fill(grad.begin(), grad.end(), 0.0);
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

bool Tensor::same_values(const Tensor& other) const {
  return shape == other.shape && data == other.data;
}

static inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

uint64_t Rng::uniform_int(uint64_t n) {
  if (n <= 1) return 0;
  return next_u64() % n;  // bias ~ n / 2^64, irrelevant at engine scale
}

double Rng::gaussian() {
  double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
  double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;        // [0, 1)
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::fork(uint64_t stream) const {
  uint64_t s = state_ ^ (0xA0761D6478BD642Full * (stream + 1));
  splitmix64(s);
  splitmix64(s);
  return Rng(s);
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

SortResult sort_desc_with_permutation(const Tensor& x) {
  const size_t n = x.numel();
  SortResult r;
  r.perm.resize(n);
  std::iota(r.perm.begin(), r.perm.end(), size_t{0});
  std::stable_sort(r.perm.begin(), r.perm.end(),
                   [&](size_t a, size_t b) { return x.data[a] > x.data[b]; });
  r.sorted = Tensor({n});
  for (size_t i = 0; i < n; ++i) r.sorted.data[i] = x.data[r.perm[i]];
  return r;
}

}  // namespace sanas
