#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sanas/dataset.hpp"
#include "sanas/operators.hpp"
#include "sanas/weightshare.hpp"

namespace sanas {

struct StageSpec {
  int min_blocks = 1;
  int max_blocks = 1;
  int channels = 8;
  int resolution = 8;  // square feature map edge within the stage
};

// Multi-resolution image search space. Slots are grouped by stage; the
// active slots of a stage form a prefix. The first slot of a stage carries
// the channel change from the previous stage and, when the stage resolution
// halves, stride 2. Consecutive stage resolutions must strictly halve.
struct SearchSpace {
  int in_channels = 3;
  int in_resolution = 16;
  int num_classes = 4;
  std::vector<StageSpec> stages;
  int attn_max_resolution = 8;  // Attn allowed where stage resolution <= this; 0 disables
  int attn_heads = 4;

  struct Slot {
    int stage = 0;
    int index_in_stage = 0;
    int in_channels = 0;
    int out_channels = 0;
    int in_resolution = 0;
    int out_resolution = 0;
    int stride = 1;
    std::vector<BlockType> choices;
    bool changes_shape() const {
      return stride != 1 || in_channels != out_channels || in_resolution != out_resolution;
    }
  };
  std::vector<Slot> slots;  // filled by finalize()

  void finalize();  // derives slots; throws ValidationError on a bad space
  bool stage_downsamples(size_t stage) const;
  size_t slot_base(size_t stage) const;
  uint64_t num_architectures() const;
};

struct ArchGene {
  struct SlotGene {
    bool active = false;
    BlockType type = BlockType::Conv;
    bool downsample = false;
    bool operator==(const SlotGene&) const = default;
  };
  std::vector<SlotGene> slots;
  bool operator==(const ArchGene&) const = default;

  // Comma-separated <letter><downsample digit> tokens for active slots,
  // e.g. "C0,S1,T0". Inactive slots are zeroed (canonical form).
  std::string to_text() const;
  static ArchGene from_text(const std::string& text, const SearchSpace& space);
};

void validate_gene(const ArchGene& gene, const SearchSpace& space);  // throws ValidationError
ArchGene sample_uniform(const SearchSpace& space, Rng& rng);
std::vector<ArchGene> enumerate_genes(const SearchSpace& space, uint64_t limit = 100000);

enum class SharingMode { None, Naive, Heterogeneous };

std::string sharing_mode_name(SharingMode m);
SharingMode sharing_mode_from_name(const std::string& s);

// Weight container executing every gene in the space by path selection.
// Conv/Shift/Add candidates of a slot read one shared pool (Naive,
// Heterogeneous) or private tensors (None); normalization state is always
// per choice. Attn parameters are never pooled.
struct Supernet {
  struct SlotParams {
    // pooled modes
    std::optional<SharedWeightPool> pool;
    // private-weight mode
    std::optional<Tensor> conv_w, shift_w, add_w;
    std::map<BlockType, BnState> bn;
    std::optional<AttnBlockParams> attn;
    std::optional<Tensor> res_proj;
  };

  SearchSpace space;
  SharingMode mode = SharingMode::Heterogeneous;
  std::vector<SlotParams> slots;
  Tensor head_w, head_b;

  static Supernet create(const SearchSpace& space, SharingMode mode, uint64_t seed);

  // Named learnable parameters (no running statistics).
  std::vector<std::pair<std::string, Tensor*>> parameters();
  // Everything persisted in a checkpoint, running statistics included.
  std::vector<std::pair<std::string, Tensor*>> state();
  std::vector<const SharedWeightPool*> pools() const;
  std::vector<SharedWeightPool*> pools();

  // Forward of one sampled path. In training mode parameters are bound as
  // leaves and batch-norm running statistics advance; counts, when given,
  // accumulate the path's operation tally.
  Var forward(Tape& tape, Var images, const ArchGene& gene, bool training,
              OpCounts* counts = nullptr);

  void save(const std::string& path) const;
  static Supernet load(const std::string& path, const SearchSpace& space);
};

struct OptimizerConfig {
  double lr = 0.05;
  double momentum = 0.9;
  int batch_size = 16;
  bool cosine_decay = true;
};

struct StepRecord {
  int step = 0;
  std::string gene;
  double ce = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

struct TrainResult {
  std::vector<StepRecord> steps;
};

// Uniform single-path training: per step one gene is sampled and only its
// path plus the regularized pools receive gradient. Streams derive from
// `seed` by purpose, so two nets with equal seeds see identical batches.
TrainResult train_supernet(Supernet& net, const Dataset& train, int steps,
                           const OptimizerConfig& opt, const LossConfig& loss, uint64_t seed,
                           const std::string& metrics_csv = "");

// Accuracy with inherited weights on the first `limit` examples (0 = all).
double inherit_and_eval(const Supernet& net, const ArchGene& gene, const Dataset& val,
                        size_t limit = 512);

// Per-example predictions, for external recounting.
std::vector<int> predict(const Supernet& net, const ArchGene& gene, const Dataset& data,
                         size_t limit = 0);

// Space restricted to exactly one architecture (the gene's choices).
SearchSpace restrict_space(const SearchSpace& space, const ArchGene& gene);

// Fresh standalone model for one gene: private weights, no pooling, no
// distribution terms; Shift keeps the quantized forward with straight-through
// weight gradients.
Supernet retrain_subnet(const ArchGene& gene, const SearchSpace& space, const Dataset& train,
                        int steps, const OptimizerConfig& opt, uint64_t seed,
                        TrainResult* trace = nullptr);

}  // namespace sanas
