#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sanas {

using Shape = std::vector<size_t>;

size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor of 64-bit reals. `grad` stays empty until a
// backward pass touches the tensor as a leaf.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  size_t numel() const { return data.size(); }
  size_t rank() const { return shape.size(); }
  size_t dim(size_t i) const { return shape.at(i); }

  void ensure_grad();
  void zero_grad();
  bool all_finite() const;
  bool same_values(const Tensor& other) const;  // shape + bit-identical data
};

// Counter-based deterministic generator (splitmix64). Identical seeds give
// identical streams on any platform; substreams come from fork().
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);
  // [0, n). n == 0 or 1 returns 0 without consuming the stream.
  uint64_t uniform_int(uint64_t n);
  double gaussian();                     // standard normal via Box-Muller
  Rng fork(uint64_t stream) const;

 private:
  uint64_t state_;
};

uint64_t fnv1a(const std::string& s);

struct SortResult {
  Tensor sorted;              // descending, flat
  std::vector<size_t> perm;   // sorted.data[i] == input.data[perm[i]]
};

// Stable descending sort over the flattened input; ties keep ascending
// original index.
SortResult sort_desc_with_permutation(const Tensor& x);

}  // namespace sanas
