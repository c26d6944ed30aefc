#pragma once

#include <optional>
#include <string>

#include "sanas/costmodel.hpp"
#include "sanas/dataset.hpp"
#include "sanas/search.hpp"
#include "sanas/supernet.hpp"

namespace sanas {

struct DatasetConfig {
  std::string type = "synthetic";  // synthetic | file
  SyntheticSpec synthetic;
  size_t train_count = 2048;
  size_t val_count = 512;
  std::string train_path, val_path;  // file mode
};

// Everything a pipeline run needs; unknown JSON keys are rejected.
struct RunConfig {
  SearchSpace space;
  OptimizerConfig optimizer;
  LossConfig loss;
  SharingMode sharing = SharingMode::Heterogeneous;
  DatasetConfig dataset;
  std::string cost_profile = "45nm-FIX32";
  EvoConfig evolution;
  uint64_t seed = 1;
  int supernet_steps = 2000;
  int retrain_steps = 1000;
  size_t eval_limit = 512;

  static RunConfig defaults();
  static RunConfig from_json_file(const std::string& path);
  static RunConfig from_json_text(const std::string& text);
  std::string to_json_text() const;

  Dataset load_train() const;
  Dataset load_val() const;
};

}  // namespace sanas
