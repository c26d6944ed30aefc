#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sanas/tensor.hpp"

namespace sanas {

struct Dataset {
  Tensor images;                // [N, C, H, W]
  std::vector<uint8_t> labels;  // [N]
  size_t num_classes = 0;

  size_t size() const { return labels.size(); }
  size_t channels() const { return images.dim(1); }
  size_t height() const { return images.dim(2); }
  size_t width() const { return images.dim(3); }
};

struct SyntheticSpec {
  size_t count = 2048;
  size_t classes = 4;
  size_t channels = 3;
  size_t height = 16;
  size_t width = 16;
  double noise_sigma = 0.25;
};

// Each class is a distinct low-frequency spatial wave plus Gaussian pixel
// noise; labels are balanced within one. Pixel values are rounded through
// float32 so the in-memory tensors match the file format exactly.
Dataset make_synthetic(const SyntheticSpec& spec, uint64_t seed);

// Raw dataset container. Layout, integers little-endian:
//   magic "SADS1" (5 bytes)
//   u64 count, channels, height, width, classes
//   f32 images[count*channels*height*width] (IEEE-754)
//   u8 labels[count]
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

}  // namespace sanas
