#include "sanas/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "sanas/errors.hpp"

namespace sanas {

using nlohmann::json;

namespace {

void expect_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("unknown config key '" + where + "." + it.key() + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.space.in_channels = 3;
  c.space.in_resolution = 16;
  c.space.num_classes = 4;
  c.space.stages = {{1, 2, 16, 16}, {1, 2, 32, 8}, {1, 3, 64, 4}};
  c.space.attn_max_resolution = 8;
  c.space.attn_heads = 4;
  c.space.finalize();
  c.evolution = EvoConfig::cv_default();
  c.evolution.constraint_metric = "flops";
  c.evolution.budget = 0.0;
  return c;
}

RunConfig RunConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
  expect_keys(j, "config",
              {"search_space", "optimizer", "loss", "sharing", "dataset", "cost_profile",
               "evolution", "seed", "supernet_steps", "retrain_steps", "eval_limit"});
  RunConfig c = defaults();

  if (j.contains("search_space")) {
    const json& s = j.at("search_space");
    expect_keys(s, "search_space",
                {"in_channels", "in_resolution", "num_classes", "stages", "attn_max_resolution",
                 "attn_heads"});
    read(s, "in_channels", c.space.in_channels);
    read(s, "in_resolution", c.space.in_resolution);
    read(s, "num_classes", c.space.num_classes);
    read(s, "attn_max_resolution", c.space.attn_max_resolution);
    read(s, "attn_heads", c.space.attn_heads);
    if (s.contains("stages")) {
      c.space.stages.clear();
      for (const json& st : s.at("stages")) {
        expect_keys(st, "search_space.stages[]",
                    {"min_blocks", "max_blocks", "channels", "resolution"});
        StageSpec stage;
        read(st, "min_blocks", stage.min_blocks);
        read(st, "max_blocks", stage.max_blocks);
        read(st, "channels", stage.channels);
        read(st, "resolution", stage.resolution);
        c.space.stages.push_back(stage);
      }
    }
    c.space.finalize();
  }

  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    expect_keys(o, "optimizer", {"lr", "momentum", "batch_size", "cosine_decay"});
    read(o, "lr", c.optimizer.lr);
    read(o, "momentum", c.optimizer.momentum);
    read(o, "batch_size", c.optimizer.batch_size);
    read(o, "cosine_decay", c.optimizer.cosine_decay);
  }

  if (j.contains("loss")) {
    const json& l = j.at("loss");
    expect_keys(l, "loss", {"kl_weight"});
    read(l, "kl_weight", c.loss.kl_weight);
    if (c.loss.kl_weight < 0.0) throw ConfigError("loss.kl_weight must be nonnegative");
  }

  if (j.contains("sharing")) c.sharing = sharing_mode_from_name(j.at("sharing").get<std::string>());

  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    expect_keys(d, "dataset",
                {"type", "train_count", "val_count", "noise_sigma", "classes", "channels",
                 "height", "width", "train_path", "val_path"});
    read(d, "type", c.dataset.type);
    if (c.dataset.type == "synthetic") {
      read(d, "train_count", c.dataset.train_count);
      read(d, "val_count", c.dataset.val_count);
      read(d, "noise_sigma", c.dataset.synthetic.noise_sigma);
      read(d, "classes", c.dataset.synthetic.classes);
      read(d, "channels", c.dataset.synthetic.channels);
      read(d, "height", c.dataset.synthetic.height);
      read(d, "width", c.dataset.synthetic.width);
    } else if (c.dataset.type == "file") {
      read(d, "train_path", c.dataset.train_path);
      read(d, "val_path", c.dataset.val_path);
      if (c.dataset.train_path.empty() || c.dataset.val_path.empty())
        throw ConfigError("dataset.type 'file' needs train_path and val_path");
    } else {
      throw ConfigError("dataset.type must be 'synthetic' or 'file'");
    }
  }

  if (j.contains("cost_profile")) {
    c.cost_profile = j.at("cost_profile").get<std::string>();
    CostTable::builtin(c.cost_profile);  // validates the name
  }

  if (j.contains("evolution")) {
    const json& e = j.at("evolution");
    expect_keys(e, "evolution",
                {"steps", "population", "crossover", "mutation", "mutation_prob", "constraint",
                 "seed", "jobs"});
    read(e, "steps", c.evolution.steps);
    read(e, "population", c.evolution.population);
    read(e, "crossover", c.evolution.crossover_count);
    read(e, "mutation", c.evolution.mutation_count);
    read(e, "mutation_prob", c.evolution.mutation_prob);
    if (e.contains("constraint")) {
      const json& cn = e.at("constraint");
      expect_keys(cn, "evolution.constraint", {"metric", "budget"});
      read(cn, "metric", c.evolution.constraint_metric);
      read(cn, "budget", c.evolution.budget);
    }
    c.evolution.validate();
  }

  read(j, "seed", c.seed);
  read(j, "supernet_steps", c.supernet_steps);
  read(j, "retrain_steps", c.retrain_steps);
  read(j, "eval_limit", c.eval_limit);
  if (c.supernet_steps < 0 || c.retrain_steps < 0) throw ConfigError("step counts must be >= 0");
  return c;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json_text(ss.str());
}

std::string RunConfig::to_json_text() const {
  json j;
  json stages = json::array();
  for (const StageSpec& s : space.stages)
    stages.push_back({{"min_blocks", s.min_blocks},
                      {"max_blocks", s.max_blocks},
                      {"channels", s.channels},
                      {"resolution", s.resolution}});
  j["search_space"] = {{"in_channels", space.in_channels},
                       {"in_resolution", space.in_resolution},
                       {"num_classes", space.num_classes},
                       {"stages", stages},
                       {"attn_max_resolution", space.attn_max_resolution},
                       {"attn_heads", space.attn_heads}};
  j["optimizer"] = {{"lr", optimizer.lr},
                    {"momentum", optimizer.momentum},
                    {"batch_size", optimizer.batch_size},
                    {"cosine_decay", optimizer.cosine_decay}};
  j["loss"] = {{"kl_weight", loss.kl_weight}};
  j["sharing"] = sharing_mode_name(sharing);
  if (dataset.type == "synthetic") {
    j["dataset"] = {{"type", "synthetic"},
                    {"train_count", dataset.train_count},
                    {"val_count", dataset.val_count},
                    {"noise_sigma", dataset.synthetic.noise_sigma},
                    {"classes", dataset.synthetic.classes},
                    {"channels", dataset.synthetic.channels},
                    {"height", dataset.synthetic.height},
                    {"width", dataset.synthetic.width}};
  } else {
    j["dataset"] = {{"type", "file"},
                    {"train_path", dataset.train_path},
                    {"val_path", dataset.val_path}};
  }
  j["cost_profile"] = cost_profile;
  j["evolution"] = {{"steps", evolution.steps},
                    {"population", evolution.population},
                    {"crossover", evolution.crossover_count},
                    {"mutation", evolution.mutation_count},
                    {"mutation_prob", evolution.mutation_prob},
                    {"constraint",
                     {{"metric", evolution.constraint_metric}, {"budget", evolution.budget}}}};
  j["seed"] = seed;
  j["supernet_steps"] = supernet_steps;
  j["retrain_steps"] = retrain_steps;
  j["eval_limit"] = eval_limit;
  return j.dump(2) + "\n";
}

Dataset RunConfig::load_train() const {
  if (dataset.type == "file") return load_dataset(dataset.train_path);
  SyntheticSpec s = dataset.synthetic;
  s.count = dataset.train_count;
  return make_synthetic(s, Rng(seed).fork(fnv1a("dataset.train")).next_u64());
}

Dataset RunConfig::load_val() const {
  if (dataset.type == "file") return load_dataset(dataset.val_path);
  SyntheticSpec s = dataset.synthetic;
  s.count = dataset.val_count;
  return make_synthetic(s, Rng(seed).fork(fnv1a("dataset.val")).next_u64());
}

}  // namespace sanas
