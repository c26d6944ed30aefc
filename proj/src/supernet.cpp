#include "sanas/supernet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "sanas/checkpoint.hpp"
#include "sanas/errors.hpp"

namespace sanas {

bool SearchSpace::stage_downsamples(size_t stage) const {
  const int prev = stage == 0 ? in_resolution : stages[stage - 1].resolution;
  return stages[stage].resolution < prev;
}

size_t SearchSpace::slot_base(size_t stage) const {
  size_t base = 0;
  for (size_t s = 0; s < stage; ++s) base += static_cast<size_t>(stages[s].max_blocks);
  return base;
}

void SearchSpace::finalize() {
  if (stages.empty()) throw ValidationError("search space has no stages");
  if (in_channels <= 0 || in_resolution <= 0 || num_classes < 2)
    throw ValidationError("bad input geometry or class count");
  slots.clear();
  int prev_c = in_channels;
  int prev_r = in_resolution;
  for (size_t s = 0; s < stages.size(); ++s) {
    const StageSpec& st = stages[s];
    if (st.min_blocks < 1 || st.max_blocks < st.min_blocks)
      throw ValidationError("stage " + std::to_string(s) + ": block bounds [" +
                            std::to_string(st.min_blocks) + "," + std::to_string(st.max_blocks) +
                            "] invalid");
    if (st.channels <= 0) throw ValidationError("stage " + std::to_string(s) + ": bad channels");
    const bool same = st.resolution == prev_r;
    const bool half = 2 * st.resolution == prev_r;
    if (s == 0 ? (!same && !half) : !half)
      throw ValidationError("stage " + std::to_string(s) + ": resolution " +
                            std::to_string(st.resolution) + " must " +
                            (s == 0 ? "match or halve" : "halve") + " the previous " +
                            std::to_string(prev_r));
    std::vector<BlockType> choices{BlockType::Conv, BlockType::Shift, BlockType::Add};
    if (attn_max_resolution > 0 && st.resolution <= attn_max_resolution) {
      if (attn_heads <= 0 || st.channels % attn_heads != 0)
        throw ValidationError("stage " + std::to_string(s) + ": " + std::to_string(st.channels) +
                              " channels not divisible by " + std::to_string(attn_heads) +
                              " attention heads");
      choices.push_back(BlockType::Attn);
    }
    for (int j = 0; j < st.max_blocks; ++j) {
      Slot slot;
      slot.stage = static_cast<int>(s);
      slot.index_in_stage = j;
      slot.in_channels = j == 0 ? prev_c : st.channels;
      slot.out_channels = st.channels;
      slot.in_resolution = j == 0 ? prev_r : st.resolution;
      slot.out_resolution = st.resolution;
      slot.stride = (j == 0 && half) ? 2 : 1;
      slot.choices = choices;
      slots.push_back(slot);
    }
    prev_c = st.channels;
    prev_r = st.resolution;
  }
}

uint64_t SearchSpace::num_architectures() const {
  long double total = 1.0L;
  uint64_t exact = 1;
  bool overflow = false;
  for (size_t s = 0; s < stages.size(); ++s) {
    const size_t k = slots[slot_base(s)].choices.size();
    uint64_t stage_sum = 0;
    uint64_t pow = 1;
    for (int n = 0; n < stages[s].min_blocks; ++n) pow *= k;
    for (int n = stages[s].min_blocks; n <= stages[s].max_blocks; ++n) {
      stage_sum += pow;
      pow *= k;
    }
    total *= static_cast<long double>(stage_sum);
    if (total > 1e18L) overflow = true;
    if (!overflow) exact *= stage_sum;
  }
  if (overflow) throw ContractError("architecture count exceeds 1e18");
  return exact;
}

std::string ArchGene::to_text() const {
  std::string out;
  for (const SlotGene& s : slots) {
    if (!s.active) continue;
    if (!out.empty()) out += ',';
    out += block_type_letter(s.type);
    out += s.downsample ? '1' : '0';
  }
  return out;
}

namespace {

ArchGene canonical_gene(const SearchSpace& space, const std::vector<int>& counts,
                        const std::vector<BlockType>& types) {
  ArchGene g;
  g.slots.assign(space.slots.size(), {});
  size_t t = 0;
  for (size_t s = 0; s < space.stages.size(); ++s) {
    const size_t base = space.slot_base(s);
    for (int j = 0; j < counts[s]; ++j) {
      ArchGene::SlotGene& sg = g.slots[base + static_cast<size_t>(j)];
      sg.active = true;
      sg.type = types[t++];
      sg.downsample = j == 0 && space.stage_downsamples(s);
    }
  }
  return g;
}

}  // namespace

ArchGene ArchGene::from_text(const std::string& text, const SearchSpace& space) {
  struct Token {
    BlockType type;
    bool down;
  };
  std::vector<Token> tokens;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    // trim spaces
    size_t b = item.find_first_not_of(" \t");
    size_t e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw ValidationError("empty gene token in '" + text + "'");
    item = item.substr(b, e - b + 1);
    if (item.size() != 2 || (item[1] != '0' && item[1] != '1'))
      throw ValidationError("bad gene token '" + item + "'");
    tokens.push_back({block_type_from_letter(item[0]), item[1] == '1'});
  }
  if (tokens.empty()) throw ValidationError("empty gene text");

  std::vector<int> counts(space.stages.size(), 0);
  std::vector<BlockType> types;
  size_t s = 0;
  for (size_t i = 0; i < tokens.size(); ++i) {
    // a downsample flag opens the next stage once the current one is satisfied
    while (true) {
      const bool stage_full = counts[s] >= space.stages[s].max_blocks;
      const bool expects_down = counts[s] == 0 && space.stage_downsamples(s);
      if (counts[s] == 0) {
        if (tokens[i].down != expects_down)
          throw ValidationError("gene token " + std::to_string(i) + " downsample flag " +
                                (tokens[i].down ? "1" : "0") + " inconsistent with stage " +
                                std::to_string(s));
        break;
      }
      const bool opens_next = tokens[i].down || stage_full;
      if (!opens_next) break;
      if (counts[s] < space.stages[s].min_blocks)
        throw ValidationError("stage " + std::to_string(s) + " has fewer than " +
                              std::to_string(space.stages[s].min_blocks) + " blocks");
      if (++s >= space.stages.size()) throw ValidationError("more gene tokens than stages allow");
    }
    counts[s]++;
    types.push_back(tokens[i].type);
  }
  for (size_t st = 0; st < space.stages.size(); ++st)
    if (counts[st] < space.stages[st].min_blocks || counts[st] > space.stages[st].max_blocks)
      throw ValidationError("stage " + std::to_string(st) + " block count " +
                            std::to_string(counts[st]) + " outside bounds");

  ArchGene g = canonical_gene(space, counts, types);
  validate_gene(g, space);
  return g;
}

void validate_gene(const ArchGene& gene, const SearchSpace& space) {
  if (gene.slots.size() != space.slots.size())
    throw ValidationError("gene has " + std::to_string(gene.slots.size()) + " slots, space has " +
                          std::to_string(space.slots.size()));
  for (size_t s = 0; s < space.stages.size(); ++s) {
    const size_t base = space.slot_base(s);
    const int max = space.stages[s].max_blocks;
    int count = 0;
    bool ended = false;
    for (int j = 0; j < max; ++j) {
      const ArchGene::SlotGene& sg = gene.slots[base + static_cast<size_t>(j)];
      if (sg.active) {
        if (ended)
          throw ValidationError("stage " + std::to_string(s) + ": active slot after inactive");
        count++;
        const bool expect_down = j == 0 && space.stage_downsamples(s);
        if (sg.downsample != expect_down)
          throw ValidationError("stage " + std::to_string(s) + " slot " + std::to_string(j) +
                                ": downsample flag violates the monotone resolution rule");
        const auto& choices = space.slots[base + static_cast<size_t>(j)].choices;
        if (std::find(choices.begin(), choices.end(), sg.type) == choices.end())
          throw ValidationError("stage " + std::to_string(s) + " slot " + std::to_string(j) +
                                ": block type " + block_type_letter(sg.type) + " not available");
      } else {
        ended = true;
        if (sg != ArchGene::SlotGene{})
          throw ValidationError("inactive slot not zeroed (non-canonical gene)");
      }
    }
    if (count < space.stages[s].min_blocks || count > max)
      throw ValidationError("stage " + std::to_string(s) + " block count " +
                            std::to_string(count) + " outside [" +
                            std::to_string(space.stages[s].min_blocks) + "," +
                            std::to_string(max) + "]");
  }
}

ArchGene sample_uniform(const SearchSpace& space, Rng& rng) {
  std::vector<int> counts(space.stages.size());
  std::vector<BlockType> types;
  for (size_t s = 0; s < space.stages.size(); ++s) {
    const StageSpec& st = space.stages[s];
    counts[s] = st.min_blocks +
                static_cast<int>(rng.uniform_int(static_cast<uint64_t>(st.max_blocks - st.min_blocks + 1)));
    const auto& choices = space.slots[space.slot_base(s)].choices;
    for (int j = 0; j < counts[s]; ++j)
      types.push_back(choices[rng.uniform_int(choices.size())]);
  }
  return canonical_gene(space, counts, types);
}

namespace {

void enumerate_stage(const SearchSpace& space, size_t stage, std::vector<int>& counts,
                     std::vector<BlockType>& types, std::vector<ArchGene>& out, uint64_t limit) {
  if (stage == space.stages.size()) {
    if (out.size() >= limit) throw ContractError("enumeration exceeds limit");
    out.push_back(canonical_gene(space, counts, types));
    return;
  }
  const auto& choices = space.slots[space.slot_base(stage)].choices;
  for (int n = space.stages[stage].min_blocks; n <= space.stages[stage].max_blocks; ++n) {
    counts[stage] = n;
    std::vector<size_t> pick(static_cast<size_t>(n), 0);
    while (true) {
      const size_t mark = types.size();
      for (size_t j = 0; j < pick.size(); ++j) types.push_back(choices[pick[j]]);
      enumerate_stage(space, stage + 1, counts, types, out, limit);
      types.resize(mark);
      size_t j = 0;
      for (; j < pick.size(); ++j) {
        if (++pick[j] < choices.size()) break;
        pick[j] = 0;
      }
      if (j == pick.size()) break;
    }
  }
}

}  // namespace

std::vector<ArchGene> enumerate_genes(const SearchSpace& space, uint64_t limit) {
  std::vector<ArchGene> out;
  std::vector<int> counts(space.stages.size(), 0);
  std::vector<BlockType> types;
  enumerate_stage(space, 0, counts, types, out, limit);
  return out;
}

std::string sharing_mode_name(SharingMode m) {
  switch (m) {
    case SharingMode::None: return "none";
    case SharingMode::Naive: return "naive";
    case SharingMode::Heterogeneous: return "heterogeneous";
  }
  throw ConfigError("unknown sharing mode");
}

SharingMode sharing_mode_from_name(const std::string& s) {
  if (s == "none") return SharingMode::None;
  if (s == "naive") return SharingMode::Naive;
  if (s == "heterogeneous" || s == "hws") return SharingMode::Heterogeneous;
  throw ConfigError("unknown sharing mode '" + s + "'");
}

namespace {

void init_normal(Tensor& t, const std::string& name, uint64_t seed, double stddev) {
  Rng rng = Rng(seed).fork(fnv1a(name));
  for (double& v : t.data) v = stddev * rng.gaussian();
}

bool slot_allows(const SearchSpace::Slot& slot, BlockType t) {
  return std::find(slot.choices.begin(), slot.choices.end(), t) != slot.choices.end();
}

std::string slot_prefix(size_t i) { return "slot" + std::to_string(i) + "."; }

}  // namespace

Supernet Supernet::create(const SearchSpace& space, SharingMode mode, uint64_t seed) {
  if (space.slots.empty()) throw ValidationError("search space not finalized");
  Supernet net;
  net.space = space;
  net.mode = mode;
  net.slots.resize(space.slots.size());

  for (size_t i = 0; i < space.slots.size(); ++i) {
    const SearchSpace::Slot& sp = space.slots[i];
    SlotParams& p = net.slots[i];
    const std::string prefix = slot_prefix(i);
    const Shape wshape{static_cast<size_t>(sp.out_channels), static_cast<size_t>(sp.in_channels),
                       3, 3};
    const double he = std::sqrt(2.0 / (static_cast<double>(sp.in_channels) * 9.0));
    const bool conv_like = slot_allows(sp, BlockType::Conv) || slot_allows(sp, BlockType::Shift) ||
                           slot_allows(sp, BlockType::Add);

    if (conv_like) {
      if (mode == SharingMode::None) {
        if (slot_allows(sp, BlockType::Conv)) {
          p.conv_w = Tensor(wshape);
          init_normal(*p.conv_w, prefix + "conv.w", seed, he);
        }
        if (slot_allows(sp, BlockType::Shift)) {
          p.shift_w = Tensor(wshape);
          init_normal(*p.shift_w, prefix + "shift.w", seed, he);
        }
        if (slot_allows(sp, BlockType::Add)) {
          p.add_w = Tensor(wshape);
          init_normal(*p.add_w, prefix + "add.w", seed, he);
        }
      } else {
        SharedWeightPool pool;
        pool.name = "slot" + std::to_string(i);
        pool.weights = Tensor(wshape);
        init_normal(pool.weights, prefix + "pool.w", seed, he);
        pool.kernel = TransformKernel::identity(pool.weights.numel());
        p.pool = std::move(pool);
      }
      for (BlockType t : {BlockType::Conv, BlockType::Shift, BlockType::Add})
        if (slot_allows(sp, t)) p.bn.emplace(t, BnState(static_cast<size_t>(sp.out_channels)));
    }

    if (slot_allows(sp, BlockType::Attn)) {
      AttnBlockParams a;
      a.heads = space.attn_heads;
      const size_t d = static_cast<size_t>(sp.out_channels);
      if (sp.changes_shape()) {
        a.stem = Tensor({d, static_cast<size_t>(sp.in_channels), 1, 1});
        init_normal(*a.stem, prefix + "attn.stem", seed,
                    std::sqrt(2.0 / static_cast<double>(sp.in_channels)));
      }
      a.pos_dw = Tensor({d, 3, 3});
      init_normal(a.pos_dw, prefix + "attn.pos", seed, std::sqrt(2.0 / 9.0));
      const double xavier = std::sqrt(1.0 / static_cast<double>(d));
      for (auto [t, name] : {std::pair<Tensor*, const char*>{&a.wq, "attn.wq"},
                             {&a.wk, "attn.wk"},
                             {&a.wv, "attn.wv"},
                             {&a.wo, "attn.wo"}}) {
        *t = Tensor({d, d});
        init_normal(*t, prefix + name, seed, xavier);
      }
      a.mlp_w1 = Tensor({d, 2 * d});
      init_normal(a.mlp_w1, prefix + "attn.mlp.w1", seed, std::sqrt(2.0 / static_cast<double>(d)));
      a.mlp_b1 = Tensor({2 * d}, 0.0);
      a.mlp_w2 = Tensor({2 * d, d});
      init_normal(a.mlp_w2, prefix + "attn.mlp.w2", seed,
                  std::sqrt(1.0 / (2.0 * static_cast<double>(d))));
      a.mlp_b2 = Tensor({d}, 0.0);
      p.attn = std::move(a);
    }

    if (sp.changes_shape()) {
      p.res_proj = Tensor({static_cast<size_t>(sp.out_channels),
                           static_cast<size_t>(sp.in_channels), 1, 1});
      init_normal(*p.res_proj, prefix + "res.w", seed,
                  std::sqrt(2.0 / static_cast<double>(sp.in_channels)));
    }
  }

  const size_t last_c = static_cast<size_t>(space.stages.back().channels);
  net.head_w = Tensor({last_c, static_cast<size_t>(space.num_classes)});
  init_normal(net.head_w, "head.w", seed, std::sqrt(1.0 / static_cast<double>(last_c)));
  net.head_b = Tensor({static_cast<size_t>(space.num_classes)}, 0.0);
  return net;
}

std::vector<std::pair<std::string, Tensor*>> Supernet::parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (size_t i = 0; i < slots.size(); ++i) {
    SlotParams& p = slots[i];
    const std::string prefix = slot_prefix(i);
    if (p.pool.has_value()) {
      out.emplace_back(prefix + "pool.w", &p.pool->weights);
      if (mode == SharingMode::Heterogeneous)
        out.emplace_back(prefix + "pool.alphas", &p.pool->kernel.alphas);
    }
    if (p.conv_w.has_value()) out.emplace_back(prefix + "conv.w", &*p.conv_w);
    if (p.shift_w.has_value()) out.emplace_back(prefix + "shift.w", &*p.shift_w);
    if (p.add_w.has_value()) out.emplace_back(prefix + "add.w", &*p.add_w);
    for (auto& [t, bn] : p.bn) {
      const std::string bnp = prefix + "bn." + block_type_letter(t);
      out.emplace_back(bnp + ".gamma", &bn.gamma);
      out.emplace_back(bnp + ".beta", &bn.beta);
    }
    if (p.attn.has_value()) {
      AttnBlockParams& a = *p.attn;
      if (a.stem.has_value()) out.emplace_back(prefix + "attn.stem", &*a.stem);
      out.emplace_back(prefix + "attn.pos", &a.pos_dw);
      out.emplace_back(prefix + "attn.wq", &a.wq);
      out.emplace_back(prefix + "attn.wk", &a.wk);
      out.emplace_back(prefix + "attn.wv", &a.wv);
      out.emplace_back(prefix + "attn.wo", &a.wo);
      out.emplace_back(prefix + "attn.mlp.w1", &a.mlp_w1);
      out.emplace_back(prefix + "attn.mlp.b1", &a.mlp_b1);
      out.emplace_back(prefix + "attn.mlp.w2", &a.mlp_w2);
      out.emplace_back(prefix + "attn.mlp.b2", &a.mlp_b2);
    }
    if (p.res_proj.has_value()) out.emplace_back(prefix + "res.w", &*p.res_proj);
  }
  out.emplace_back("head.w", &head_w);
  out.emplace_back("head.b", &head_b);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Supernet::state() {
  auto out = parameters();
  for (size_t i = 0; i < slots.size(); ++i) {
    // alphas persist even in naive mode so checkpoints stay mode-portable
    if (slots[i].pool.has_value() && mode != SharingMode::Heterogeneous)
      out.emplace_back(slot_prefix(i) + "pool.alphas", &slots[i].pool->kernel.alphas);
    for (auto& [t, bn] : slots[i].bn) {
      const std::string bnp = slot_prefix(i) + "bn." + block_type_letter(t);
      out.emplace_back(bnp + ".rmean", &bn.running_mean);
      out.emplace_back(bnp + ".rvar", &bn.running_var);
    }
  }
  return out;
}

std::vector<const SharedWeightPool*> Supernet::pools() const {
  std::vector<const SharedWeightPool*> out;
  for (const SlotParams& p : slots)
    if (p.pool.has_value()) out.push_back(&*p.pool);
  return out;
}

std::vector<SharedWeightPool*> Supernet::pools() {
  std::vector<SharedWeightPool*> out;
  for (SlotParams& p : slots)
    if (p.pool.has_value()) out.push_back(&*p.pool);
  return out;
}

Var Supernet::forward(Tape& tape, Var images, const ArchGene& gene, bool training,
                      OpCounts* counts) {
  validate_gene(gene, space);
  Var cur = images;
  for (size_t i = 0; i < space.slots.size(); ++i) {
    if (!gene.slots[i].active) continue;
    const SearchSpace::Slot& sp = space.slots[i];
    SlotParams& p = slots[i];
    const BlockType type = gene.slots[i].type;
    ConvSpec spec{sp.in_channels, sp.out_channels, 3, sp.stride};

    std::optional<Var> res_proj;
    if (p.res_proj.has_value()) res_proj = tape.leaf(*p.res_proj);

    if (type == BlockType::Attn) {
      if (!p.attn.has_value()) throw ValidationError("slot " + std::to_string(i) + " has no attention parameters");
      AttnBlockParams& a = *p.attn;
      AttnBlockVars vars;
      vars.heads = a.heads;
      if (a.stem.has_value()) vars.stem = tape.leaf(*a.stem);
      vars.pos_dw = tape.leaf(a.pos_dw);
      vars.wq = tape.leaf(a.wq);
      vars.wk = tape.leaf(a.wk);
      vars.wv = tape.leaf(a.wv);
      vars.wo = tape.leaf(a.wo);
      vars.mlp_w1 = tape.leaf(a.mlp_w1);
      vars.mlp_b1 = tape.leaf(a.mlp_b1);
      vars.mlp_w2 = tape.leaf(a.mlp_w2);
      vars.mlp_b2 = tape.leaf(a.mlp_b2);
      vars.res_proj = res_proj;
      cur = attn_block(tape, cur, vars, spec, counts);
      continue;
    }

    ConvBlockVars vars;
    Tensor quantized;
    if (mode == SharingMode::None) {
      Tensor* w = type == BlockType::Conv ? (p.conv_w ? &*p.conv_w : nullptr)
                  : type == BlockType::Shift ? (p.shift_w ? &*p.shift_w : nullptr)
                                             : (p.add_w ? &*p.add_w : nullptr);
      if (!w) throw ValidationError("slot " + std::to_string(i) + " has no private weights for type");
      vars.weights = tape.leaf(*w);
      if (type == BlockType::Shift) {
        quantized = quantize_pow2(*w).dequantize();
        vars.forward_weights = &quantized;
      }
    } else {
      if (!p.pool.has_value()) throw ValidationError("slot " + std::to_string(i) + " has no pool");
      Var pool_w = tape.leaf(p.pool->weights);
      switch (type) {
        case BlockType::Conv:
          vars.weights = pool_w;
          break;
        case BlockType::Shift:
          vars.weights = pool_w;
          quantized = quantize_pow2(p.pool->weights).dequantize();
          vars.forward_weights = &quantized;
          break;
        case BlockType::Add:
          vars.weights = mode == SharingMode::Heterogeneous
                             ? tape.piecewise_scale_sorted(pool_w, tape.leaf(p.pool->kernel.alphas))
                             : pool_w;
          break;
        default:
          break;
      }
    }
    auto bn_it = p.bn.find(type);
    if (bn_it == p.bn.end()) throw ValidationError("slot " + std::to_string(i) + " has no normalization for type");
    vars.gamma = tape.leaf(bn_it->second.gamma);
    vars.beta = tape.leaf(bn_it->second.beta);
    vars.running_mean = &bn_it->second.running_mean;
    vars.running_var = &bn_it->second.running_var;
    vars.res_proj = res_proj;
    cur = conv_like_block(tape, cur, type, vars, spec, training, counts);
  }

  const Tensor& feat = cur.value();
  if (counts)
    *counts += head_overhead(feat.dim(0), feat.dim(1), feat.dim(2), feat.dim(3),
                             static_cast<size_t>(space.num_classes));
  Var pooled = tape.global_avg_pool(cur);
  return tape.add_bias(tape.matmul(pooled, tape.leaf(head_w)), tape.leaf(head_b));
}

void Supernet::save(const std::string& path) const {
  std::map<std::string, Tensor> tensors;
  for (auto& [name, t] : const_cast<Supernet*>(this)->state()) tensors.emplace(name, *t);
  tensors.emplace("meta.mode", Tensor({1}, {static_cast<double>(static_cast<int>(mode))}));
  save_checkpoint(path, tensors);
}

Supernet Supernet::load(const std::string& path, const SearchSpace& space) {
  auto tensors = load_checkpoint(path);
  auto mode_it = tensors.find("meta.mode");
  if (mode_it == tensors.end()) throw IoError("checkpoint missing meta.mode: " + path);
  const auto mode = static_cast<SharingMode>(static_cast<int>(mode_it->second.data.at(0)));
  Supernet net = Supernet::create(space, mode, 0);
  for (auto& [name, t] : net.state()) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError("checkpoint missing tensor " + name);
    if (it->second.shape != t->shape)
      throw ValidationError("checkpoint tensor " + name + " has shape " +
                            shape_str(it->second.shape) + ", expected " + shape_str(t->shape));
    *t = it->second;
  }
  return net;
}

namespace {

struct SgdState {
  std::unordered_map<Tensor*, std::vector<double>> momentum;
};

void sgd_step(SgdState& state, const std::vector<Tensor*>& touched, double lr, double mu,
              const std::unordered_set<Tensor*>& skip) {
  for (Tensor* t : touched) {
    if (skip.count(t)) {
      t->zero_grad();
      continue;
    }
    auto& v = state.momentum[t];
    if (v.size() != t->numel()) v.assign(t->numel(), 0.0);
    for (size_t i = 0; i < t->numel(); ++i) {
      v[i] = mu * v[i] + t->grad[i];
      t->data[i] -= lr * v[i];
    }
    t->zero_grad();
  }
}

std::string find_non_finite(Supernet& net) {
  for (auto& [name, t] : net.state())
    if (!t->all_finite()) return name;
  return "";
}

}  // namespace

TrainResult train_supernet(Supernet& net, const Dataset& train, int steps,
                           const OptimizerConfig& opt, const LossConfig& loss, uint64_t seed,
                           const std::string& metrics_csv) {
  if (train.size() == 0) throw ContractError("empty training set");
  if (train.num_classes != static_cast<size_t>(net.space.num_classes))
    throw ContractError("dataset has " + std::to_string(train.num_classes) + " classes, space has " +
                        std::to_string(net.space.num_classes));
  Rng sample_rng = Rng(seed).fork(fnv1a("train.sample"));
  Rng batch_rng = Rng(seed).fork(fnv1a("train.batch"));
  SgdState sgd;
  TrainResult result;

  std::ofstream csv;
  if (!metrics_csv.empty()) {
    csv.open(metrics_csv);
    if (!csv) throw IoError("cannot open metrics csv: " + metrics_csv);
    csv << "step,gene,ce,kl,total\n";
  }

  const size_t batch = static_cast<size_t>(std::max(1, opt.batch_size));
  const size_t c = train.channels(), h = train.height(), w = train.width();
  const size_t plane = c * h * w;

  for (int step = 0; step < steps; ++step) {
    ArchGene gene = sample_uniform(net.space, sample_rng);

    Tensor images({batch, c, h, w});
    std::vector<int> labels(batch);
    for (size_t b = 0; b < batch; ++b) {
      const size_t idx = batch_rng.uniform_int(train.size());
      std::copy_n(train.images.data.begin() + static_cast<long>(idx * plane), plane,
                  images.data.begin() + static_cast<long>(b * plane));
      labels[b] = train.labels[idx];
    }

    Tape tape;
    Var logits = net.forward(tape, tape.constant(std::move(images)), gene, true);
    Var ce = tape.cross_entropy_mean(logits, labels);
    Var total = ce;
    if (net.mode == SharingMode::Heterogeneous && loss.kl_weight > 0.0) {
      std::vector<PoolVars> pools;
      for (SharedWeightPool* pool : net.pools())
        pools.push_back({tape.leaf(pool->weights), tape.leaf(pool->kernel.alphas)});
      Var kl;
      for (const PoolVars& pv : pools) {
        Var term = tape.add(tape.nll_gaussian(pv.weights),
                            tape.nll_laplacian(tape.piecewise_scale_sorted(pv.weights, pv.alphas)));
        kl = kl.ok() ? tape.add(kl, term) : term;
      }
      total = tape.add(ce, tape.scale(kl, loss.kl_weight));
    }

    const double total_v = total.value().data[0];
    const double ce_v = ce.value().data[0];
    if (!std::isfinite(total_v)) {
      const std::string bad = find_non_finite(net);
      throw ContractError("non-finite loss at step " + std::to_string(step) +
                          (bad.empty() ? " (activations diverged)" : " (first non-finite tensor: " + bad + ")"));
    }

    tape.backward(total);

    const double lr = opt.cosine_decay && steps > 1
                          ? opt.lr * 0.5 *
                                (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                                static_cast<double>(steps)))
                          : opt.lr;
    // Kernel parameters learn by distribution fitting, not by the tape.
    std::unordered_set<Tensor*> skip;
    if (net.mode == SharingMode::Heterogeneous)
      for (SharedWeightPool* pool : net.pools()) skip.insert(&pool->kernel.alphas);
    sgd_step(sgd, tape.touched_leaves(), lr, opt.momentum, skip);
    if (net.mode == SharingMode::Heterogeneous && loss.kl_weight > 0.0)
      for (SharedWeightPool* pool : net.pools())
        fit_kernel_to_laplacian(pool->weights, pool->kernel.alphas, 1, 0.05, 0.0);

    StepRecord rec{step, gene.to_text(), ce_v, total_v - ce_v, total_v};
    if (csv.is_open())
      csv << rec.step << "," << rec.gene << "," << rec.ce << "," << rec.kl << "," << rec.total
          << "\n";
    result.steps.push_back(std::move(rec));
  }
  return result;
}

std::vector<int> predict(const Supernet& net, const ArchGene& gene, const Dataset& data,
                         size_t limit) {
  Supernet& mutable_net = const_cast<Supernet&>(net);  // eval path reads only
  const size_t n = limit == 0 ? data.size() : std::min(limit, data.size());
  const size_t c = data.channels(), h = data.height(), w = data.width();
  const size_t plane = c * h * w;
  const size_t batch = 64;
  std::vector<int> out(n);
  for (size_t start = 0; start < n; start += batch) {
    const size_t count = std::min(batch, n - start);
    Tensor images({count, c, h, w});
    std::copy_n(data.images.data.begin() + static_cast<long>(start * plane), count * plane,
                images.data.begin());
    Tape tape;
    Var logits = mutable_net.forward(tape, tape.constant(std::move(images)), gene, false);
    const Tensor& lv = logits.value();
    const size_t classes = lv.dim(1);
    for (size_t b = 0; b < count; ++b) {
      size_t best = 0;
      for (size_t k = 1; k < classes; ++k)
        if (lv.data[b * classes + k] > lv.data[b * classes + best]) best = k;
      out[start + b] = static_cast<int>(best);
    }
  }
  return out;
}

double inherit_and_eval(const Supernet& net, const ArchGene& gene, const Dataset& val,
                        size_t limit) {
  validate_gene(gene, net.space);
  std::vector<int> preds = predict(net, gene, val, limit);
  size_t correct = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == static_cast<int>(val.labels[i])) correct++;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

SearchSpace restrict_space(const SearchSpace& space, const ArchGene& gene) {
  validate_gene(gene, space);
  SearchSpace r = space;
  r.stages.clear();
  std::vector<std::vector<BlockType>> slot_types;
  for (size_t s = 0; s < space.stages.size(); ++s) {
    const size_t base = space.slot_base(s);
    int count = 0;
    std::vector<BlockType> types;
    for (int j = 0; j < space.stages[s].max_blocks; ++j)
      if (gene.slots[base + static_cast<size_t>(j)].active) {
        count++;
        types.push_back(gene.slots[base + static_cast<size_t>(j)].type);
      }
    StageSpec st = space.stages[s];
    st.min_blocks = st.max_blocks = count;
    r.stages.push_back(st);
    slot_types.push_back(std::move(types));
  }
  r.finalize();
  size_t slot = 0;
  for (size_t s = 0; s < r.stages.size(); ++s)
    for (int j = 0; j < r.stages[s].max_blocks; ++j, ++slot)
      r.slots[slot].choices = {slot_types[s][static_cast<size_t>(j)]};
  return r;
}

Supernet retrain_subnet(const ArchGene& gene, const SearchSpace& space, const Dataset& train,
                        int steps, const OptimizerConfig& opt, uint64_t seed, TrainResult* trace) {
  SearchSpace restricted = restrict_space(space, gene);
  Supernet net = Supernet::create(restricted, SharingMode::None, seed);
  TrainResult r = train_supernet(net, train, steps, opt, LossConfig{0.0}, seed);
  if (trace) *trace = std::move(r);
  return net;
}

}  // namespace sanas
