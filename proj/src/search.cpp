#include "sanas/search.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <map>
#include <thread>

#include "sanas/checkpoint.hpp"
#include "sanas/errors.hpp"

namespace sanas {

void EvoConfig::validate() const {
  if (steps < 1 || population < 1) throw ConfigError("evolution needs steps >= 1, population >= 1");
  if (crossover_count < 0 || mutation_count < 0 ||
      crossover_count + mutation_count > population)
    throw ConfigError("crossover + mutation counts must fit in the population");
  if (mutation_prob <= 0.0 || mutation_prob > 1.0)
    throw ConfigError("mutation_prob must lie in (0, 1]");
  if (constraint_metric != "flops" && constraint_metric != "energy" &&
      constraint_metric != "latency")
    throw ConfigError("unknown constraint metric '" + constraint_metric + "'");
  if (budget < 0.0) throw ConfigError("budget must be nonnegative");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
}

EvoConfig EvoConfig::cv_default() { return EvoConfig{}; }

EvoConfig EvoConfig::nlp_default() {
  EvoConfig c;
  c.steps = 30;
  c.population = 125;
  c.crossover_count = 50;
  c.mutation_count = 50;
  c.mutation_prob = 0.3;
  return c;
}

namespace {

struct GeneStructure {
  std::vector<int> counts;                    // active blocks per stage
  std::vector<std::vector<BlockType>> types;  // per stage, per active slot
};

GeneStructure decode(const ArchGene& gene, const SearchSpace& space) {
  GeneStructure g;
  g.counts.resize(space.stages.size(), 0);
  g.types.resize(space.stages.size());
  for (size_t s = 0; s < space.stages.size(); ++s) {
    const size_t base = space.slot_base(s);
    for (int j = 0; j < space.stages[s].max_blocks; ++j) {
      const auto& sg = gene.slots[base + static_cast<size_t>(j)];
      if (!sg.active) break;
      g.counts[s]++;
      g.types[s].push_back(sg.type);
    }
  }
  return g;
}

ArchGene encode(const GeneStructure& g, const SearchSpace& space) {
  ArchGene out;
  out.slots.assign(space.slots.size(), {});
  for (size_t s = 0; s < space.stages.size(); ++s) {
    const size_t base = space.slot_base(s);
    for (int j = 0; j < g.counts[s]; ++j) {
      auto& sg = out.slots[base + static_cast<size_t>(j)];
      sg.active = true;
      sg.type = g.types[s][static_cast<size_t>(j)];
      sg.downsample = j == 0 && space.stage_downsamples(s);
    }
  }
  return out;
}

}  // namespace

ArchGene mutate(const ArchGene& gene, double prob, Rng& rng, const SearchSpace& space) {
  if (prob < 0.0 || prob > 1.0) throw ContractError("mutation probability outside [0,1]");
  GeneStructure g = decode(gene, space);
  for (size_t s = 0; s < space.stages.size(); ++s) {
    const StageSpec& st = space.stages[s];
    int count = g.counts[s];
    if (prob > 0.0 && rng.uniform() < prob)
      count = st.min_blocks +
              static_cast<int>(rng.uniform_int(static_cast<uint64_t>(st.max_blocks - st.min_blocks + 1)));
    const auto& choices = space.slots[space.slot_base(s)].choices;
    std::vector<BlockType> types(static_cast<size_t>(count));
    for (int j = 0; j < count; ++j) {
      types[static_cast<size_t>(j)] = j < g.counts[s]
                                          ? g.types[s][static_cast<size_t>(j)]
                                          : choices[rng.uniform_int(choices.size())];
      if (prob > 0.0 && rng.uniform() < prob)
        types[static_cast<size_t>(j)] = choices[rng.uniform_int(choices.size())];
    }
    g.counts[s] = count;
    g.types[s] = std::move(types);
  }
  return encode(g, space);
}

ArchGene crossover(const ArchGene& a, const ArchGene& b, Rng& rng, const SearchSpace& space) {
  GeneStructure ga = decode(a, space);
  GeneStructure gb = decode(b, space);
  GeneStructure child;
  child.counts.resize(space.stages.size());
  child.types.resize(space.stages.size());
  for (size_t s = 0; s < space.stages.size(); ++s) {
    const int count = rng.uniform_int(2) == 0 ? ga.counts[s] : gb.counts[s];
    const auto& choices = space.slots[space.slot_base(s)].choices;
    child.counts[s] = count;
    child.types[s].resize(static_cast<size_t>(count));
    for (int j = 0; j < count; ++j) {
      const bool in_a = j < ga.counts[s];
      const bool in_b = j < gb.counts[s];
      BlockType t;
      if (in_a && in_b)
        t = rng.uniform_int(2) == 0 ? ga.types[s][static_cast<size_t>(j)]
                                    : gb.types[s][static_cast<size_t>(j)];
      else if (in_a)
        t = ga.types[s][static_cast<size_t>(j)];
      else if (in_b)
        t = gb.types[s][static_cast<size_t>(j)];
      else
        t = choices[rng.uniform_int(choices.size())];
      child.types[s][static_cast<size_t>(j)] = t;
    }
  }
  return encode(child, space);
}

namespace {

struct Evaluator {
  const FitnessFn& fitness;
  const CostFn& cost;
  double budget;  // 0 = unconstrained
  int jobs;
  std::map<std::string, double> fitness_cache;
  std::map<std::string, double> cost_cache;
  uint64_t evaluations = 0;

  double cost_of(const ArchGene& g) {
    const std::string key = g.to_text();
    auto it = cost_cache.find(key);
    if (it != cost_cache.end()) return it->second;
    const double c = cost(g);
    cost_cache.emplace(key, c);
    return c;
  }

  bool feasible(const ArchGene& g) { return budget <= 0.0 || cost_of(g) <= budget; }

  // Evaluates any uncached genes (in parallel when jobs > 1), then reads
  // every fitness from the cache.
  std::vector<double> fitness_of(const std::vector<ArchGene>& genes) {
    std::vector<size_t> missing;
    std::vector<std::string> keys(genes.size());
    for (size_t i = 0; i < genes.size(); ++i) {
      keys[i] = genes[i].to_text();
      if (!fitness_cache.count(keys[i]) &&
          std::find_if(missing.begin(), missing.end(),
                       [&](size_t j) { return keys[j] == keys[i]; }) == missing.end())
        missing.push_back(i);
    }
    evaluations += missing.size();
    std::vector<double> fresh(missing.size());
    if (jobs <= 1 || missing.size() <= 1) {
      for (size_t m = 0; m < missing.size(); ++m) fresh[m] = fitness(genes[missing[m]]);
    } else {
      const size_t workers = std::min<size_t>(static_cast<size_t>(jobs), missing.size());
      std::vector<std::thread> pool;
      std::atomic<size_t> next{0};
      for (size_t t = 0; t < workers; ++t)
        pool.emplace_back([&] {
          for (size_t m = next.fetch_add(1); m < missing.size(); m = next.fetch_add(1))
            fresh[m] = fitness(genes[missing[m]]);
        });
      for (auto& th : pool) th.join();
    }
    for (size_t m = 0; m < missing.size(); ++m) fitness_cache[keys[missing[m]]] = fresh[m];
    std::vector<double> out(genes.size());
    for (size_t i = 0; i < genes.size(); ++i) out[i] = fitness_cache.at(keys[i]);
    return out;
  }
};

struct Member {
  ArchGene gene;
  std::string key;
  double fitness;
  double cost;
};

void sort_members(std::vector<Member>& members) {
  std::sort(members.begin(), members.end(), [](const Member& a, const Member& b) {
    if (a.fitness != b.fitness) return a.fitness > b.fitness;
    return a.key < b.key;  // deterministic tie-break
  });
}

std::vector<ArchGene> initial_feasible(const SearchSpace& space, const EvoConfig& cfg, Rng& rng,
                                       Evaluator& ev) {
  std::vector<ArchGene> population;
  double min_cost = std::numeric_limits<double>::infinity();
  const int kAttempts = 10000;
  for (int i = 0; i < kAttempts && population.size() < static_cast<size_t>(cfg.population); ++i) {
    ArchGene g = sample_uniform(space, rng);
    min_cost = std::min(min_cost, ev.cost_of(g));
    if (ev.feasible(g)) population.push_back(std::move(g));
  }
  if (population.empty())
    throw InfeasibleError("no feasible gene under " + cfg.constraint_metric + " budget " +
                          std::to_string(cfg.budget) + " (minimum sampled cost " +
                          std::to_string(min_cost) + ")");
  // top up with copies so the population reaches its nominal size
  for (size_t i = 0; population.size() < static_cast<size_t>(cfg.population); ++i)
    population.push_back(population[i % population.size()]);
  return population;
}

}  // namespace

SearchResult evolve(const SearchSpace& space, const EvoConfig& cfg, const FitnessFn& fitness,
                    const CostFn& cost) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng = Rng(cfg.seed).fork(fnv1a("search.evolve"));
  Evaluator ev{fitness, cost, cfg.budget, cfg.jobs, {}, {}, 0};
  SearchResult result;

  std::vector<ArchGene> genes = initial_feasible(space, cfg, rng, ev);
  std::vector<double> fits = ev.fitness_of(genes);
  std::vector<Member> population;
  for (size_t i = 0; i < genes.size(); ++i) {
    Member m{genes[i], genes[i].to_text(), fits[i], ev.cost_of(genes[i])};
    result.history.push_back({0, m.key, m.fitness, m.cost, true});
    population.push_back(std::move(m));
  }
  sort_members(population);
  // drop duplicate keys so the survivor set stays diverse
  auto dedupe = [](std::vector<Member>& v) {
    std::vector<Member> out;
    for (auto& m : v)
      if (std::find_if(out.begin(), out.end(), [&](const Member& o) { return o.key == m.key; }) ==
          out.end())
        out.push_back(std::move(m));
    v = std::move(out);
  };
  dedupe(population);

  Member best = population.front();

  for (int gen = 1; gen <= cfg.steps; ++gen) {
    std::vector<ArchGene> children;
    auto try_add = [&](auto&& make) {
      for (int attempt = 0; attempt < 100; ++attempt) {
        ArchGene child = make();
        if (ev.feasible(child)) {
          children.push_back(std::move(child));
          return;
        }
        result.history.push_back({gen, child.to_text(),
                                  std::numeric_limits<double>::quiet_NaN(), ev.cost_of(child),
                                  false});
      }
    };
    for (int i = 0; i < cfg.crossover_count; ++i)
      try_add([&] {
        const size_t pa = rng.uniform_int(population.size());
        size_t pb = rng.uniform_int(population.size());
        if (population.size() > 1 && pb == pa) pb = (pb + 1) % population.size();
        return crossover(population[pa].gene, population[pb].gene, rng, space);
      });
    for (int i = 0; i < cfg.mutation_count; ++i)
      try_add([&] {
        const size_t pa = rng.uniform_int(population.size());
        return mutate(population[pa].gene, cfg.mutation_prob, rng, space);
      });

    std::vector<double> child_fits = ev.fitness_of(children);
    for (size_t i = 0; i < children.size(); ++i) {
      Member m{children[i], children[i].to_text(), child_fits[i], ev.cost_of(children[i])};
      result.history.push_back({gen, m.key, m.fitness, m.cost, true});
      population.push_back(std::move(m));
    }
    sort_members(population);
    dedupe(population);
    if (population.size() > static_cast<size_t>(cfg.population))
      population.resize(static_cast<size_t>(cfg.population));
    if (population.front().fitness > best.fitness) best = population.front();
  }

  result.best = best.gene;
  result.best_fitness = best.fitness;
  result.evaluations = ev.evaluations;
  result.unique_genes = ev.fitness_cache.size();
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

SearchResult random_search(const SearchSpace& space, const EvoConfig& cfg,
                           const FitnessFn& fitness, const CostFn& cost) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng = Rng(cfg.seed).fork(fnv1a("search.random"));
  Evaluator ev{fitness, cost, cfg.budget, cfg.jobs, {}, {}, 0};
  SearchResult result;

  const uint64_t budget = cfg.evaluation_budget();
  double min_cost = std::numeric_limits<double>::infinity();
  uint64_t drawn = 0;
  bool found_any = false;
  std::vector<ArchGene> batch;
  uint64_t spent = 0;
  while (spent < budget) {
    batch.clear();
    while (batch.size() < 64 && spent + batch.size() < budget) {
      ArchGene g = sample_uniform(space, rng);
      drawn++;
      min_cost = std::min(min_cost, ev.cost_of(g));
      if (ev.feasible(g)) {
        batch.push_back(std::move(g));
        found_any = true;
      } else if (!found_any && drawn >= 10000) {
        throw InfeasibleError("no feasible gene under " + cfg.constraint_metric + " budget " +
                              std::to_string(cfg.budget) + " (minimum sampled cost " +
                              std::to_string(min_cost) + ")");
      }
    }
    std::vector<double> fits = ev.fitness_of(batch);
    for (size_t i = 0; i < batch.size(); ++i) {
      const std::string key = batch[i].to_text();
      result.history.push_back({static_cast<int>(spent + i), key, fits[i], ev.cost_of(batch[i]),
                                true});
      if (result.history.size() == 1 || fits[i] > result.best_fitness) {
        result.best = batch[i];
        result.best_fitness = fits[i];
      }
    }
    spent += batch.size();
  }

  result.evaluations = spent;  // every sample spends budget, cached or not
  result.unique_genes = ev.fitness_cache.size();
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

void write_history_csv(const std::string& path, const std::vector<SearchHistoryRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open history csv: " + path);
  os << "generation,candidate_gene,fitness,cost_metric,feasible\n";
  for (const auto& r : rows)
    os << r.generation << "," << r.gene << "," << r.fitness << "," << r.cost << ","
       << (r.feasible ? 1 : 0) << "\n";
  if (!os) throw IoError("write failed: " + path);
}

std::vector<double> LatencyPredictor::features(const ArchGene& gene,
                                               const SearchSpace& space) const {
  std::vector<double> f;
  f.reserve(gene.slots.size() * 6 + 3);
  for (const auto& sg : gene.slots) {
    for (int t = 0; t < 4; ++t)
      f.push_back(sg.active && static_cast<int>(sg.type) == t ? 1.0 : 0.0);
    f.push_back(sg.downsample ? 1.0 : 0.0);
    f.push_back(sg.active ? 1.0 : 0.0);
  }
  CostReport r = count_ops(gene, space);
  f.push_back(static_cast<double>(r.num_mult));
  f.push_back(static_cast<double>(r.num_add));
  f.push_back(static_cast<double>(r.num_shift));
  return f;
}

double LatencyPredictor::predict(const ArchGene& gene, const SearchSpace& space) const {
  std::vector<double> f = features(gene, space);
  if (f.size() != feat_mean.numel())
    throw DimensionError("predictor trained for a different space (feature length " +
                         std::to_string(feat_mean.numel()) + " vs " + std::to_string(f.size()) + ")");
  Tensor x({1, f.size()});
  for (size_t i = 0; i < f.size(); ++i)
    x.data[i] = (f[i] - feat_mean.data[i]) / feat_std.data[i];
  Tape tape;
  auto wc = [&](const Tensor& t) { return tape.constant(t); };
  Var h1 = tape.relu(tape.add_bias(tape.matmul(wc(x), wc(w1)), wc(b1)));
  Var h2 = tape.relu(tape.add_bias(tape.matmul(h1, wc(w2)), wc(b2)));
  Var out = tape.softplus(tape.add_bias(tape.matmul(h2, wc(w3)), wc(b3)));
  return out.value().data[0] * label_mean;
}

void LatencyPredictor::save(const std::string& path) const {
  std::map<std::string, Tensor> t;
  t.emplace("w1", w1);
  t.emplace("b1", b1);
  t.emplace("w2", w2);
  t.emplace("b2", b2);
  t.emplace("w3", w3);
  t.emplace("b3", b3);
  t.emplace("feat_mean", feat_mean);
  t.emplace("feat_std", feat_std);
  t.emplace("label_mean", Tensor({1}, {label_mean}));
  save_checkpoint(path, t);
}

LatencyPredictor LatencyPredictor::load(const std::string& path) {
  auto t = load_checkpoint(path);
  LatencyPredictor p;
  auto take = [&](const char* name) {
    auto it = t.find(name);
    if (it == t.end()) throw IoError(std::string("predictor checkpoint missing ") + name);
    return it->second;
  };
  p.w1 = take("w1");
  p.b1 = take("b1");
  p.w2 = take("w2");
  p.b2 = take("b2");
  p.w3 = take("w3");
  p.b3 = take("b3");
  p.feat_mean = take("feat_mean");
  p.feat_std = take("feat_std");
  p.label_mean = take("label_mean").data.at(0);
  p.hidden = static_cast<int>(p.b1.numel());
  return p;
}

namespace {

struct Adam {
  double lr = 1e-2, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, applied where decay[i] is set
  int t = 0;
  std::vector<std::vector<double>> m, v;
  std::vector<bool> decay;

  void init(const std::vector<Tensor*>& params, std::vector<bool> decay_mask) {
    decay = std::move(decay_mask);
    m.resize(params.size());
    v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m[i].assign(params[i]->numel(), 0.0);
      v[i].assign(params[i]->numel(), 0.0);
    }
  }
  void step(const std::vector<Tensor*>& params) {
    t++;
    const double c1 = 1.0 - std::pow(beta1, t), c2 = 1.0 - std::pow(beta2, t);
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor* p = params[i];
      for (size_t j = 0; j < p->numel(); ++j) {
        const double g = p->grad[j];
        m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g;
        v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g * g;
        p->data[j] -= lr * (m[i][j] / c1) / (std::sqrt(v[i][j] / c2) + eps);
        if (weight_decay > 0.0 && decay[i]) p->data[j] -= lr * weight_decay * p->data[j];
      }
      p->zero_grad();
    }
  }
};

}  // namespace

LatencyPredictor fit_latency_predictor(const std::vector<std::pair<ArchGene, double>>& samples,
                                       const SearchSpace& space, uint64_t seed,
                                       PredictorFitReport* report, int hidden, int epochs) {
  if (samples.size() < 200)
    throw ContractError("latency predictor needs at least 200 samples, got " +
                        std::to_string(samples.size()));
  for (const auto& [gene, lat] : samples)
    if (!(lat > 0.0)) throw ContractError("latency labels must be positive");

  LatencyPredictor p;
  p.hidden = hidden;
  const size_t f = p.features(samples[0].first, space).size();
  const size_t h = static_cast<size_t>(hidden);
  Rng init = Rng(seed).fork(fnv1a("predictor.init"));
  auto init_normal = [&](Tensor& t, double sd) {
    for (double& x : t.data) x = sd * init.gaussian();
  };
  p.w1 = Tensor({f, h});
  init_normal(p.w1, std::sqrt(2.0 / static_cast<double>(f)));
  p.b1 = Tensor({h}, 0.0);
  p.w2 = Tensor({h, h});
  init_normal(p.w2, std::sqrt(2.0 / static_cast<double>(h)));
  p.b2 = Tensor({h}, 0.0);
  // zero weights + bias at softplus^{-1}(1): the fit starts as the constant
  // label mean and picks up input sensitivity only where the labels call
  // for it
  p.w3 = Tensor({h, 1}, 0.0);
  p.b3 = Tensor({1}, std::log(std::exp(1.0) - 1.0));

  // deterministic 80/20 split
  std::vector<size_t> order(samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split = Rng(seed).fork(fnv1a("predictor.split"));
  for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[split.uniform_int(i)]);
  const size_t train_n = samples.size() * 8 / 10;

  std::vector<std::vector<double>> feats(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) feats[i] = p.features(samples[i].first, space);

  p.feat_mean = Tensor({f}, 0.0);
  p.feat_std = Tensor({f}, 0.0);
  double label_sum = 0.0;
  bool degenerate = true;
  for (size_t i = 0; i < train_n; ++i) {
    for (size_t j = 0; j < f; ++j) p.feat_mean.data[j] += feats[order[i]][j];
    label_sum += samples[order[i]].second;
    if (samples[order[i]].second != samples[order[0]].second) degenerate = false;
  }
  for (size_t j = 0; j < f; ++j) p.feat_mean.data[j] /= static_cast<double>(train_n);
  for (size_t i = 0; i < train_n; ++i)
    for (size_t j = 0; j < f; ++j) {
      const double d = feats[order[i]][j] - p.feat_mean.data[j];
      p.feat_std.data[j] += d * d;
    }
  for (size_t j = 0; j < f; ++j) {
    p.feat_std.data[j] = std::sqrt(p.feat_std.data[j] / static_cast<double>(train_n));
    if (p.feat_std.data[j] < 1e-12) p.feat_std.data[j] = 1.0;
  }
  p.label_mean = label_sum / static_cast<double>(train_n);

  std::vector<Tensor*> params{&p.w1, &p.b1, &p.w2, &p.b2, &p.w3, &p.b3};
  Adam adam;
  adam.init(params, {false, false, false, false, false, false});
  // full-batch steps: the sample sets are small and minibatch noise would
  // keep the fit from settling
  Tensor x({train_n, f});
  Tensor y({train_n, 1});
  for (size_t b = 0; b < train_n; ++b) {
    const size_t s = order[b];
    for (size_t j = 0; j < f; ++j)
      x.data[b * f + j] = (feats[s][j] - p.feat_mean.data[j]) / p.feat_std.data[j];
    y.data[b] = samples[s].second / p.label_mean;
  }
  const double lr0 = adam.lr;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    adam.lr = lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / std::max(1, epochs)));
    Tape tape;
    Var h1 = tape.relu(tape.add_bias(tape.matmul(tape.constant(x), tape.leaf(p.w1)),
                                     tape.leaf(p.b1)));
    Var h2 = tape.relu(tape.add_bias(tape.matmul(h1, tape.leaf(p.w2)), tape.leaf(p.b2)));
    Var pred = tape.softplus(tape.add_bias(tape.matmul(h2, tape.leaf(p.w3)), tape.leaf(p.b3)));
    Var diff = tape.sub(pred, tape.constant(y));
    Var mse = tape.mean(tape.mul(diff, diff));
    // small ridge keeps the interpolant flat between training points
    Var w1v = tape.leaf(p.w1), w2v = tape.leaf(p.w2), w3v = tape.leaf(p.w3);
    Var ridge = tape.add(tape.add(tape.mean(tape.mul(w1v, w1v)), tape.mean(tape.mul(w2v, w2v))),
                         tape.mean(tape.mul(w3v, w3v)));
    Var loss = tape.add(mse, tape.scale(ridge, 1e-3));
    tape.backward(loss);
    adam.step(params);
  }

  double mape = 0.0;
  size_t held = 0;
  for (size_t i = train_n; i < samples.size(); ++i) {
    const auto& [gene, lat] = samples[order[i]];
    mape += std::abs(p.predict(gene, space) - lat) / lat;
    held++;
  }
  if (report) {
    report->holdout_mape = held > 0 ? mape / static_cast<double>(held) : 0.0;
    report->degenerate_labels = degenerate;
  }
  return p;
}

}  // namespace sanas
