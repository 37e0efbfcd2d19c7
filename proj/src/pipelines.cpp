#include "intrafusion/pipelines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <ostream>
#include <thread>

#include "intrafusion/engine.hpp"
#include "intrafusion/errors.hpp"
#include "intrafusion/eval.hpp"
#include "intrafusion/rng.hpp"

namespace intrafusion {

double learning_rate(const TrainConfig& config, int epoch) {
  return config.base_lr * std::pow(config.lr_decay, std::floor(static_cast<double>(epoch) / config.lr_step));
}

TrainResult train(const ModelGraph& model, const Dataset& data, const TrainConfig& config) {
  if (config.epochs < 0) throw InputError("epochs must be non-negative");
  if (!(config.base_lr > 0.0)) throw InputError("base learning rate must be positive");
  if (config.batch_size <= 0) throw InputError("batch size must be positive");
  TrainResult res{model, {}};
  if (config.epochs == 0) return res;
  if (data.size() == 0) throw InputError("cannot train on an empty dataset");

  std::map<ParamKey, std::vector<float>> velocity;
  std::vector<std::size_t> order(data.size());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    const double lr = learning_rate(config, epoch);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), order.size() - begin);
      const Dataset batch = data.subset(std::span<const std::size_t>(order).subspan(begin, count));
      LossAndGradients lg = loss_and_gradients(res.model, batch.features, batch.labels, Mode::kTraining);
      loss_sum += lg.loss * static_cast<double>(count);
      const Tensor& logits = lg.trace.output(res.model);
      correct += count_correct(logits, batch.labels);
      for (auto& [key, grad] : lg.grads) {
        Tensor& p = res.model.node(key.layer).param(key.name);
        auto& v = velocity[key];
        if (v.size() != p.numel()) v.assign(p.numel(), 0.0f);
        const float mom = static_cast<float>(config.momentum);
        const float step = static_cast<float>(lr);
        for (std::size_t i = 0; i < p.numel(); ++i) {
          v[i] = mom * v[i] + grad[i];
          p[i] -= step * v[i];
        }
      }
      update_running_stats(res.model, lg.trace);
    }
    res.trace.push_back({epoch, lr, loss_sum / static_cast<double>(data.size()),
                         static_cast<double>(correct) / static_cast<double>(data.size())});
  }
  return res;
}

TrainResult finetune(const ModelGraph& model, const Dataset& data, int epochs, std::uint64_t seed, int batch_size) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.base_lr = kFinetuneBaseLr;
  cfg.seed = seed;
  cfg.batch_size = batch_size;
  return train(model, data, cfg);
}

void write_trace_csv(std::ostream& out, std::span<const EpochRecord> trace) {
  out << "epoch,lr,loss,accuracy\n";
  out << std::setprecision(9);
  for (const auto& r : trace) out << r.epoch << ',' << r.lr << ',' << r.loss << ',' << r.accuracy << '\n';
}

SplitPlan make_split_plan(std::size_t size, int k, std::uint64_t seed) {
  if (k < 2 || k % 2 != 0) throw InputError("k must be even and at least 2");
  if (size < static_cast<std::size_t>(k)) throw InputError("dataset smaller than k");
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(idx);
  SplitPlan plan;
  plan.k = k;
  const std::size_t part = size / static_cast<std::size_t>(k);
  plan.subsets.resize(static_cast<std::size_t>(k));
  for (std::size_t p = 0; p < plan.subsets.size(); ++p) {
    plan.subsets[p].assign(idx.begin() + static_cast<std::ptrdiff_t>(p * part),
                           idx.begin() + static_cast<std::ptrdiff_t>((p + 1) * part));
  }
  for (std::size_t r = part * static_cast<std::size_t>(k); r < size; ++r) {
    plan.subsets[r - part * static_cast<std::size_t>(k)].push_back(idx[r]);
  }
  // Lexicographic k/2-combinations of subset ids.
  const int half = k / 2;
  std::vector<int> comb(static_cast<std::size_t>(half));
  std::iota(comb.begin(), comb.end(), 0);
  while (true) {
    plan.combinations.push_back(comb);
    std::vector<std::size_t> set;
    for (int s : comb) set.insert(set.end(), plan.subsets[static_cast<std::size_t>(s)].begin(), plan.subsets[static_cast<std::size_t>(s)].end());
    std::sort(set.begin(), set.end());
    plan.training_sets.push_back(std::move(set));
    int pos = half - 1;
    while (pos >= 0 && comb[static_cast<std::size_t>(pos)] == k - half + pos) --pos;
    if (pos < 0) break;
    ++comb[static_cast<std::size_t>(pos)];
    for (int q = pos + 1; q < half; ++q) comb[static_cast<std::size_t>(q)] = comb[static_cast<std::size_t>(q - 1)] + 1;
  }
  return plan;
}

void parallel_for(int count, int threads, const std::function<void(int)>& fn) {
  if (count <= 0) return;
  const int workers = std::max(1, std::min(threads, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::mutex mu;
  int next = 0;
  std::exception_ptr failure;
  {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        while (true) {
          int task;
          {
            std::lock_guard lock(mu);
            if (next >= count || failure) return;
            task = next++;
          }
          try {
            fn(task);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

std::string_view pipeline_mode_name(PipelineMode mode) {
  switch (mode) {
    case PipelineMode::kWhole: return "whole";
    case PipelineMode::kPaf: return "paf";
    case PipelineMode::kFap: return "fap";
  }
  return "?";
}

PipelineMode parse_pipeline_mode(std::string_view name) {
  for (auto m : {PipelineMode::kWhole, PipelineMode::kPaf, PipelineMode::kFap}) {
    if (pipeline_mode_name(m) == name) return m;
  }
  throw InputError("unknown pipeline mode '" + std::string(name) + "' (whole, paf, fap)");
}

ModelGraph iterative_prune(const ModelGraph& model, const Dataset& data, const PipelineConfig& config,
                           std::uint64_t seed) {
  if (config.steps < 1) throw InputError("iterative pruning needs at least one step");
  if (config.sparsity == 0.0) return model;
  const auto groups = build_groups(model);
  ModelGraph current = model;
  for (int step = 1; step <= config.steps; ++step) {
    const double s = config.sparsity * static_cast<double>(step) / static_cast<double>(config.steps);
    std::map<int, int> sizes;
    for (const Group* g : prunable_groups(groups)) sizes[g->id] = sparsity_to_m(g->cardinality, s);
    current = prune_to_sizes(current, sizes, config.prune).model;
    current = finetune(current, data, config.step_epochs, derive_seed(seed, static_cast<std::uint64_t>(step)),
                       config.batch_size).model;
  }
  return current;
}

namespace {

using Clock = std::chrono::steady_clock;

struct StageLog {
  const Dataset& test;
  Clock::time_point start = Clock::now();
  Clock::time_point last = start;
  std::vector<StageRecord> records;

  void add(std::string_view stage, const std::string& model_name, const ModelGraph& model) {
    const auto now = Clock::now();
    StageRecord r;
    r.seq = static_cast<int>(records.size());
    r.stage = stage;
    r.model = model_name;
    r.accuracy = accuracy(model, test);
    r.params = count_params(model).total;
    r.seconds = std::chrono::duration<double>(now - last).count();
    r.elapsed = std::chrono::duration<double>(now - start).count();
    records.push_back(std::move(r));
    last = Clock::now();
  }
};

ModelGraph fresh(const ModelGraph& arch, std::uint64_t seed) {
  ModelGraph m = arch;
  init_params(m, seed);
  for (auto& n : m.nodes) {
    if (n.kind != LayerKind::kBatchNorm) continue;
    n.param("gamma").fill(1.0f);
    n.param("beta").fill(0.0f);
    n.param("running_mean").fill(0.0f);
    n.param("running_var").fill(1.0f);
  }
  return m;
}

TrainConfig train_config(const PipelineConfig& c, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = c.train_epochs;
  t.batch_size = c.batch_size;
  t.base_lr = kTrainBaseLr;
  t.seed = seed;
  return t;
}

// Tags keep every stochastic stage on its own stream.
enum Tag : std::uint64_t { kInit = 1, kTrain, kPrune, kFinetune, kFinetune2, kSplit };

std::uint64_t stream(std::uint64_t seed, Tag tag, std::uint64_t index = 0) {
  return derive_seed(derive_seed(seed, tag), index);
}

std::vector<ModelGraph> train_splits(const ModelGraph& arch, const Dataset& train_data, const PipelineConfig& c,
                                     StageLog& log, std::vector<Dataset>& splits) {
  const SplitPlan plan = make_split_plan(train_data.size(), c.k, stream(c.seed, kSplit));
  for (const auto& set : plan.training_sets) splits.push_back(train_data.subset(set));
  std::vector<ModelGraph> models(splits.size());
  parallel_for(static_cast<int>(models.size()), c.threads, [&](int i) {
    const auto u = static_cast<std::uint64_t>(i);
    models[static_cast<std::size_t>(i)] =
        train(fresh(arch, stream(c.seed, kInit, u)), splits[static_cast<std::size_t>(i)], train_config(c, stream(c.seed, kTrain, u))).model;
  });
  for (std::size_t i = 0; i < models.size(); ++i) log.add("train", std::to_string(i), models[i]);
  return models;
}

ModelGraph fuse_all(const std::vector<ModelGraph>& models, const Dataset& train_data, const PipelineConfig& c) {
  FusionSpec spec;
  spec.models = models;
  spec.weights.assign(models.size(), 1.0 / static_cast<double>(models.size()));
  spec.cost = c.fuse_cost;
  spec.samples = c.fuse_samples;
  const Dataset sample = train_data.slice(0, std::min<std::size_t>(train_data.size(), static_cast<std::size_t>(c.fuse_samples)));
  return fuse_models(spec, &sample.features);
}

}  // namespace

PipelineResult run_pipeline(const ModelGraph& arch, const Dataset& train_data, const Dataset& test_data,
                            const PipelineConfig& c) {
  if (c.train_epochs < 0 || c.step_epochs < 0 || c.finetune_epochs < 0) throw InputError("epochs must be non-negative");
  if (!(c.sparsity >= 0.0 && c.sparsity < 1.0)) throw InputError("sparsity must lie in [0, 1)");
  StageLog log{test_data};
  PipelineResult res;
  switch (c.mode) {
    case PipelineMode::kWhole: {
      ModelGraph m = train(fresh(arch, stream(c.seed, kInit)), train_data, train_config(c, stream(c.seed, kTrain))).model;
      log.add("train", "whole", m);
      m = iterative_prune(m, train_data, c, stream(c.seed, kPrune));
      log.add("prune", "whole", m);
      m = finetune(m, train_data, 2 * c.finetune_epochs, stream(c.seed, kFinetune), c.batch_size).model;
      log.add("finetune", "whole", m);
      res.model = std::move(m);
      break;
    }
    case PipelineMode::kPaf: {
      std::vector<Dataset> splits;
      std::vector<ModelGraph> models = train_splits(arch, train_data, c, log, splits);
      parallel_for(static_cast<int>(models.size()), c.threads, [&](int i) {
        const auto k = static_cast<std::size_t>(i);
        models[k] = iterative_prune(models[k], splits[k], c, stream(c.seed, kPrune, k));
      });
      for (std::size_t i = 0; i < models.size(); ++i) log.add("prune", std::to_string(i), models[i]);
      ModelGraph fused = fuse_all(models, train_data, c);
      log.add("fuse", "fused", fused);
      fused = finetune(fused, train_data, c.finetune_epochs, stream(c.seed, kFinetune), c.batch_size).model;
      log.add("finetune", "fused", fused);
      res.model = std::move(fused);
      break;
    }
    case PipelineMode::kFap: {
      std::vector<Dataset> splits;
      std::vector<ModelGraph> models = train_splits(arch, train_data, c, log, splits);
      ModelGraph fused = fuse_all(models, train_data, c);
      log.add("fuse", "fused", fused);
      fused = finetune(fused, train_data, c.finetune_epochs, stream(c.seed, kFinetune), c.batch_size).model;
      log.add("finetune", "fused", fused);
      fused = iterative_prune(fused, train_data, c, stream(c.seed, kPrune));
      log.add("prune", "fused", fused);
      fused = finetune(fused, train_data, c.finetune_epochs, stream(c.seed, kFinetune2), c.batch_size).model;
      log.add("finetune", "fused", fused);
      res.model = std::move(fused);
      break;
    }
  }
  res.stages = std::move(log.records);
  return res;
}

void write_stages_csv(std::ostream& out, std::span<const StageRecord> stages, bool timings) {
  out << "seq,stage,model,accuracy,params";
  if (timings) out << ",seconds,elapsed";
  out << '\n' << std::setprecision(9);
  for (const auto& r : stages) {
    out << r.seq << ',' << r.stage << ',' << r.model << ',' << r.accuracy << ',' << r.params;
    if (timings) out << ',' << r.seconds << ',' << r.elapsed;
    out << '\n';
  }
}

}  // namespace intrafusion
